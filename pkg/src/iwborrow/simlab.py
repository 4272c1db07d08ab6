"""Simulation study: an internal RCT plus two external sources.

The data-generating model is logistic in ``x = (1, x1, x2, x3, x4)`` with
``s = (1, x4)``; (x1, x2) are bivariate normal and x3, x4 Bernoulli, each
with source-specific parameters.  The retrospective study (RES) is control
only, the single-arm trial (SCT) treatment only and the RCT randomizes 1:1.
Every analysis drops x2, so covariate discordance in x2 confounds borrowing
unless the weights adjust for it.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.special import expit

from . import rng as rngmod
from .analysis import METHODS, AnalysisSpec, WeightingConfig, analyze, borrowing_weights
from .dataset import CovariateSpec, Formula, TrialDataset
from .estimand import DecisionRule
from .inference import SamplerConfig

__all__ = [
    "CovariateModel",
    "ScenarioConfig",
    "MetricsRow",
    "SIM_SCHEMA",
    "ANALYSIS_FORMULA",
    "default_scenarios",
    "concordant_scenario",
    "scenario_table",
    "generate_scenario",
    "true_marginal_effect",
    "method_specs",
    "run_methods",
    "run_study",
    "aggregate_metrics",
]

SIM_SCHEMA = (
    CovariateSpec("x1", "continuous"),
    CovariateSpec("x2", "continuous"),
    CovariateSpec("x3", "binary"),
    CovariateSpec("x4", "binary", role="both"),
)

#: The misspecified analysis model (x2 omitted).
ANALYSIS_FORMULA = Formula(("x1", "x3", "x4"), ("x4",))

SOURCES = ("rct", "res", "sct")


@dataclass(frozen=True)
class CovariateModel:
    """(x1, x2) ~ N(mean, diag(sd) R(rho) diag(sd)); x3 ~ B(p3); x4 ~ B(p4)."""

    mean: tuple[float, float] = (0.0, 0.0)
    sd: tuple[float, float] = (1.0, 1.0)
    rho: float = 0.0
    p3: float = 0.5
    p4: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(v) for v in self.mean))
        object.__setattr__(self, "sd", tuple(float(v) for v in self.sd))
        if len(self.mean) != 2 or len(self.sd) != 2:
            raise ValueError("mean and sd need two entries (x1, x2)")
        if min(self.sd) <= 0:
            raise ValueError("sd must be positive")
        if not -1 <= self.rho <= 1:
            raise ValueError("rho must lie in [-1, 1]")
        for p in (self.p3, self.p4):
            if not 0 < p < 1:
                raise ValueError("Bernoulli probabilities must lie in (0, 1)")

    def sample(self, n: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        z = rng.standard_normal((n, 2))
        x1 = self.mean[0] + self.sd[0] * z[:, 0]
        x2 = self.mean[1] + self.sd[1] * (self.rho * z[:, 0] + math.sqrt(1 - self.rho**2) * z[:, 1])
        x3 = (rng.random(n) < self.p3).astype(float)
        x4 = (rng.random(n) < self.p4).astype(float)
        return {"x1": x1, "x2": x2, "x3": x3, "x4": x4}


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulation scenario.

    ``psi1`` maps source to interaction coefficient; RES is control only so
    its entry is unused.  ``psi0`` is common to all sources.
    """

    label: str
    beta: tuple[float, ...] = (-0.5, 0.4, 0.4, 0.3, 0.3)
    psi0: float = 0.3
    psi1: Mapping[str, float] = field(default_factory=lambda: {"rct": 0.6, "sct": 0.6})
    covariates: Mapping[str, CovariateModel] = field(
        default_factory=lambda: {s: CovariateModel() for s in SOURCES})
    sizes: Mapping[str, int] = field(default_factory=lambda: {"rct": 200, "res": 500, "sct": 100})
    hypothesis: str = "alternative"

    def __post_init__(self):
        beta = tuple(float(b) for b in self.beta)
        if len(beta) != 5:
            raise ValueError("beta must have 5 entries (intercept, x1..x4)")
        object.__setattr__(self, "beta", beta)
        cov = {k: v if isinstance(v, CovariateModel) else CovariateModel(**v)
               for k, v in self.covariates.items()}
        if set(cov) != set(SOURCES):
            raise ValueError(f"covariate models needed for {SOURCES}")
        object.__setattr__(self, "covariates", cov)
        sizes = {k: int(v) for k, v in self.sizes.items()}
        if set(sizes) != set(SOURCES) or min(sizes.values()) < 1:
            raise ValueError(f"sizes >= 1 needed for {SOURCES}")
        object.__setattr__(self, "sizes", sizes)
        psi1 = {k: float(v) for k, v in self.psi1.items()}
        if not {"rct", "sct"} <= set(psi1):
            raise ValueError("psi1 needs entries for rct and sct")
        object.__setattr__(self, "psi1", psi1)
        if self.hypothesis not in ("alternative", "null"):
            raise ValueError("hypothesis must be 'alternative' or 'null'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["covariates"] = {k: asdict(v) for k, v in self.covariates.items()}
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ScenarioConfig":
        d = dict(d)
        if "covariates" in d:
            d["covariates"] = {k: CovariateModel(**v) if isinstance(v, Mapping) else v
                               for k, v in d["covariates"].items()}
        return cls(**d)


def _shifted(base: CovariateModel, shift: float, p3_shift: float, rho: float) -> CovariateModel:
    sd = base.sd
    return replace(base, mean=(base.mean[0] + shift * sd[0], base.mean[1] + shift * sd[1]),
                   p3=base.p3 + p3_shift, rho=rho)


def default_scenarios(shift: float = 0.5, p3_shift: float = 0.2, n0: int = 200,
                    psi1_discordant: float = 1.2) -> list[ScenarioConfig]:
    """Default alternative scenarios 1-8 and null scenarios 01-03.

    Discordant covariates shift RES by ``-shift`` sd and SCT by ``+shift``
    sd on x1 and x2, and move P(x3 = 1) by ``-p3_shift`` / ``+p3_shift``.
    Discordance in psi1 sets the SCT interaction to ``psi1_discordant``.
    """
    base = CovariateModel(p3=0.5, p4=0.3)
    out = []
    alternatives = [
        (1, True, False, 0.0, (500, 100)), (2, True, False, 0.5, (500, 100)),
        (3, False, True, 0.0, (500, 100)), (4, False, True, 0.5, (500, 100)),
        (5, True, True, 0.0, (500, 100)), (6, True, True, 0.5, (500, 100)),
        (7, True, True, 0.0, (1000, 300)), (8, True, True, 0.5, (1000, 300)),
    ]
    for k, cov_disc, psi_disc, rho, (n1, n2) in alternatives:
        s = shift if cov_disc else 0.0
        p = p3_shift if cov_disc else 0.0
        covs = {"rct": replace(base, rho=rho), "res": _shifted(base, -s, -p, rho),
                "sct": _shifted(base, s, p, rho)}
        out.append(ScenarioConfig(
            label=str(k), psi0=0.3,
            psi1={"rct": 0.6, "sct": psi1_discordant if psi_disc else 0.6},
            covariates=covs, sizes={"rct": n0, "res": n1, "sct": n2}))
    for label, psi_sct, rho in (("01", 0.0, 0.0), ("02", 0.3, 0.5), ("03", 0.6, 0.5)):
        covs = {"rct": replace(base, rho=rho), "res": _shifted(base, -shift, -p3_shift, rho),
                "sct": _shifted(base, shift, p3_shift, rho)}
        out.append(ScenarioConfig(label=label, psi0=0.0, psi1={"rct": 0.0, "sct": psi_sct},
                                  covariates=covs, sizes={"rct": n0, "res": 500, "sct": 100},
                                  hypothesis="null"))
    return out


def concordant_scenario(n0: int = 200, n1: int = 500, n2: int = 100, rho: float = 0.0,
                        label: str = "concordant") -> ScenarioConfig:
    """All sources share covariate laws and coefficients (the alternative model)."""
    base = CovariateModel(p3=0.5, p4=0.3, rho=rho)
    return ScenarioConfig(label=label, covariates={s: base for s in SOURCES},
                          sizes={"rct": n0, "res": n1, "sct": n2})


def scenario_table(scenarios: Sequence[ScenarioConfig] | None = None) -> list[dict]:
    """Flat rows describing each scenario (for CSV output)."""
    rows = []
    for sc in scenarios if scenarios is not None else default_scenarios():
        rct, res, sct = (sc.covariates[s] for s in SOURCES)
        cov_disc = any(m != (rct.mean, rct.p3) for m in ((res.mean, res.p3), (sct.mean, sct.p3)))
        rows.append({
            "label": sc.label, "hypothesis": sc.hypothesis,
            "covariate_discordance": int(cov_disc),
            "psi1_discordance": int(sc.psi1["sct"] != sc.psi1["rct"]),
            "rho": rct.rho, "N0": sc.sizes["rct"], "N1": sc.sizes["res"], "N2": sc.sizes["sct"],
            "beta": " ".join(f"{b:g}" for b in sc.beta), "psi0": sc.psi0,
            "psi1_rct": sc.psi1["rct"], "psi1_sct": sc.psi1["sct"],
        })
    return rows


def _make_source(config: ScenarioConfig, source: str, rng: np.random.Generator) -> TrialDataset:
    n = config.sizes[source]
    cov = config.covariates[source].sample(n, rng)
    if source == "rct":
        arm = (rng.random(n) < 0.5).astype(np.int8)
    else:
        arm = np.full(n, 1 if source == "sct" else 0, dtype=np.int8)
    X = np.column_stack([np.ones(n), cov["x1"], cov["x2"], cov["x3"], cov["x4"]])
    psi1 = config.psi1.get(source, 0.0)
    lp = X @ np.asarray(config.beta) + (config.psi0 + psi1 * cov["x4"]) * arm
    y = (rng.random(n) < expit(lp)).astype(np.int8)
    return TrialDataset(source, SIM_SCHEMA, y, arm, cov)


def generate_scenario(config: ScenarioConfig, rng: np.random.Generator) -> dict[str, TrialDataset]:
    """Simulate the RCT, RES and SCT data sets (in that order from ``rng``)."""
    return {s: _make_source(config, s, rng) for s in SOURCES}


def true_marginal_effect(config: ScenarioConfig, n_oracle: int = 1_000_000,
                         rng: np.random.Generator | None = None) -> tuple[float, float]:
    """Monte-Carlo truth of the x4 = 1 subgroup risk difference under the RCT law.

    Returns ``(estimate, standard_error)``.  x2 is integrated over its
    conditional law, so the truth matches the estimand targeted by the
    misspecified analysis.
    """
    rng = rng or rngmod.stream(0, "oracle")
    cov = config.covariates["rct"].sample(n_oracle, rng)
    b = config.beta
    lp = b[0] + b[1] * cov["x1"] + b[2] * cov["x2"] + b[3] * cov["x3"] + b[4]
    diff = expit(lp + config.psi0 + config.psi1["rct"]) - expit(lp)
    return float(diff.mean()), float(diff.std(ddof=1) / math.sqrt(n_oracle))


def method_specs(methods: Sequence[str] = METHODS, sampler: SamplerConfig | None = None,
                 weighting: Mapping[str, Any] | None = None) -> dict[str, AnalysisSpec]:
    """Analysis specification for each named method.

    IW and IW.t weight on x1, x2, x3; IW.m and IW.m.t on x1, x3 only; the
    ``.t`` variants truncate at the RCT sample size.
    """
    sampler = sampler or SamplerConfig(warmup=500, draws=500)
    extra = dict(weighting or {})
    full_set, missing_set = ("x1", "x2", "x3"), ("x1", "x3")
    table = {
        "FB": WeightingConfig(method="full"),
        "NB": WeightingConfig(method="none"),
        "IW": WeightingConfig(covariates=full_set, **extra),
        "IW.t": WeightingConfig(covariates=full_set, truncation="ess_cap", **extra),
        "IW.m": WeightingConfig(covariates=missing_set, **extra),
        "IW.m.t": WeightingConfig(covariates=missing_set, truncation="ess_cap", **extra),
    }
    unknown = set(methods) - set(table)
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}")
    return {m: AnalysisSpec(ANALYSIS_FORMULA, {"x4": 1}, table[m], sampler=sampler) for m in methods}


def run_methods(data: Mapping[str, TrialDataset], specs: Mapping[str, AnalysisSpec],
                rule: DecisionRule, seed: int, thresholds: Sequence[float] = (0.95, 0.975)) -> dict[str, dict]:
    """Analyze one data triple with every method under a shared sampler seed."""
    internal, external = data["rct"], [data["res"], data["sct"]]
    out = {}
    for name, spec in specs.items():
        weights = borrowing_weights(internal, external, spec.weighting)
        res = analyze(internal, external, spec, seed=seed, rule=rule, weights=weights)
        summ = res.estimand.summary()
        row = {
            "median": summ["median"], "mean": summ["mean"], "sd": summ["sd"],
            "lower": summ["q2.5"], "upper": summ["q97.5"], "tau": res.tau,
            "ess": float(weights.ess), "converged": bool(res.converged),
            "max_rhat": float(res.posterior.diagnostics["max_rhat"]),
        }
        for t in thresholds:
            row[f"reject_{t:g}"] = int(res.tau > t)
        out[name] = row
    return out


@dataclass(frozen=True, eq=False)
class _Rep:
    config: ScenarioConfig
    specs: tuple
    rule: DecisionRule
    seed: int
    rep: int
    thresholds: tuple


def _run_rep(task: _Rep) -> dict[str, dict]:
    data = generate_scenario(task.config, rngmod.stream(task.seed, f"simlab/{task.config.label}", task.rep))
    mcmc_seed = int(rngmod.stream(task.seed, f"simlab-mcmc/{task.config.label}", task.rep).integers(2**63))
    return run_methods(data, dict(task.specs), task.rule, mcmc_seed, task.thresholds)


def run_study(config: ScenarioConfig, n_reps: int, seed: int, methods: Sequence[str] = METHODS,
              rule: DecisionRule | None = None, thresholds: Sequence[float] = (0.95, 0.975),
              sampler: SamplerConfig | None = None, weighting: Mapping[str, Any] | None = None,
              threads: int = 1) -> list[dict]:
    """Run every method on ``n_reps`` simulated data sets; one row per (rep, method)."""
    rule = rule or DecisionRule(0.0, np.inf, thresholds[0])
    specs = method_specs(methods, sampler, weighting)
    tasks = [_Rep(config, tuple(specs.items()), rule, seed, r, tuple(thresholds)) for r in range(n_reps)]
    if threads > 1 and n_reps > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_rep, tasks))
    else:
        results = [_run_rep(t) for t in tasks]
    rows = []
    for r, res in enumerate(results):
        for m in methods:
            rows.append({"scenario": config.label, "rep": r, "method": m, **res[m]})
    return rows


@dataclass(frozen=True)
class MetricsRow:
    scenario: str
    method: str
    coverage: float
    bias: float
    rmse: float
    bias_se: float
    rejection: Mapping[str, float]
    n_reps: int
    n_excluded: int

    def flat(self) -> dict:
        out = {"scenario": self.scenario, "method": self.method, "coverage": self.coverage,
               "bias": self.bias, "rmse": self.rmse, "bias_se": self.bias_se}
        out.update({f"rejection_{k}": v for k, v in self.rejection.items()})
        out.update({"n_reps": self.n_reps, "n_excluded": self.n_excluded})
        return out


def aggregate_metrics(rows: Sequence[Mapping[str, Any]], truth: float,
                      thresholds: Sequence[float] = (0.95, 0.975),
                      exclude_nonconverged: bool = True) -> list[MetricsRow]:
    """Bias, RMSE and coverage of posterior medians plus rejection rates, per method.

    Rejection rates are power under alternative scenarios and type-I error
    under null ones.
    """
    if not rows:
        raise ValueError("no replicate rows")
    out = []
    for method in dict.fromkeys(r["method"] for r in rows):
        sel = [r for r in rows if r["method"] == method]
        kept = [r for r in sel if r.get("converged", True) or not exclude_nonconverged]
        if not kept:
            raise ValueError(f"every replicate of {method} failed to converge")
        med = np.array([r["median"] for r in kept])
        err = med - truth
        cover = np.array([r["lower"] <= truth <= r["upper"] for r in kept])
        tau = np.array([r["tau"] for r in kept])
        out.append(MetricsRow(
            scenario=str(kept[0].get("scenario", "")), method=method,
            coverage=float(cover.mean()), bias=float(err.mean()),
            rmse=float(np.sqrt(np.mean(err**2))),
            bias_se=float(err.std(ddof=1) / math.sqrt(err.size)) if err.size > 1 else float("nan"),
            rejection={f"{t:g}": float(np.mean(tau > t)) for t in thresholds},
            n_reps=len(kept), n_excluded=len(sel) - len(kept)))
    return out

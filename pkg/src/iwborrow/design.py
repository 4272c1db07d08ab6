"""Bayesian trial design from external data.

Design priors are the posterior of the analysis-model parameters given the
external data, split by whether the implied subgroup effect Gamma lies in
the alternative region.  Bayesian type-I error and power are estimated by
direct Monte Carlo: draw theta from a design prior, simulate an internal
trial, analyze it and record the posterior probability tau of the
alternative.  Every replicate draws its randomness from substreams keyed on
``(seed, replicate)`` (and the sample size for trial data), so results do
not depend on the number of worker processes and all analysis variants at
a given sample size see the same simulated trials.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.special import expit

from . import rng as rngmod
from .analysis import AnalysisSpec, _design, analyze, as_sources, reference_spec
from .dataset import DesignMatrixBundle, Formula, TrialDataset, build_design
from .estimand import DecisionRule, SubgroupSpec, gamma_values
from .inference import PosteriorDraws, PriorSpec, SamplerConfig, WeightedModel, sample_posterior
from .similarity import WeightVector

__all__ = [
    "DesignError",
    "DesignPrior",
    "OperatingCharacteristics",
    "external_posterior",
    "split_design_priors",
    "simulate_internal_trial",
    "operating_characteristics",
    "rejection_rates",
    "calibrate_nu",
    "calibrate_nu_from_taus",
    "power_curve",
    "sample_size",
    "synthesize_external",
]

log = logging.getLogger(__name__)


class DesignError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class DesignPrior:
    """Parameter draws representing a null or alternative design prior.

    ``covariates`` is the pool whose rows are resampled to build simulated
    trials; ``gamma`` holds each draw's subgroup effect on the design
    reference rows.
    """

    parameter_draws: np.ndarray
    hypothesis: str
    covariates: TrialDataset
    formula: Formula
    gamma: np.ndarray
    retained_fraction: float
    interval: tuple[float, float] = (0.0, np.inf)

    def __post_init__(self):
        if self.hypothesis not in ("null", "alternative", "unconditional"):
            raise ValueError(f"unknown hypothesis {self.hypothesis!r}")
        if not 0 < self.retained_fraction <= 1:
            raise ValueError("retained_fraction must be in (0, 1]")

    @property
    def n_draws(self) -> int:
        return self.parameter_draws.shape[0]

    @classmethod
    def point(cls, theta: Sequence[float], covariates: TrialDataset, formula: Formula,
              hypothesis: str = "unconditional") -> "DesignPrior":
        """Degenerate prior at a single parameter vector."""
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        return cls(theta, hypothesis, covariates, formula, np.full(1, np.nan), 1.0)


@dataclass(frozen=True, eq=False)
class OperatingCharacteristics:
    rejection_rate: float
    mc_standard_error: float
    n_reps: int
    n_excluded: int
    taus: np.ndarray
    config: dict = field(default_factory=dict)

    def rate_at(self, threshold: float) -> float:
        return float(np.mean(self.taus > threshold))

    def to_dict(self) -> dict:
        return {"rejection_rate": self.rejection_rate, "mc_standard_error": self.mc_standard_error,
                "n_reps": self.n_reps, "n_excluded": self.n_excluded, **self.config}


def external_posterior(external, weights: WeightVector | np.ndarray | None, baseline_prior: PriorSpec,
                       formula: Formula, sampler: SamplerConfig | None = None) -> PosteriorDraws:
    """Posterior of theta given (weighted) external data under a proper baseline prior.

    Directions the external data do not inform (e.g. effects in a subgroup
    absent externally) stay at the baseline prior, which must therefore be
    proper.  With no external rows this samples the baseline prior.
    """
    if not baseline_prior.is_proper:
        raise DesignError("baseline design prior must be proper (finite scales)")
    sources = as_sources(external)
    if not sources:
        raise DesignError("need at least one external source (possibly empty) to fix the design")
    schema = sources[0].schema
    beta_names, psi_names = formula.beta_names(schema), formula.psi_names(schema)
    empty = DesignMatrixBundle.empty(len(beta_names), len(psi_names), beta_names, psi_names)
    filled = [s for s in sources if s.n]
    d_ext = _design(filled, formula, empty.p, empty.q) if filled else None
    if d_ext is not None:
        w = np.ones(d_ext.n) if weights is None else weights
    else:
        w = None
    model = WeightedModel(empty, d_ext, w, prior=baseline_prior)
    return sample_posterior(model, sampler or SamplerConfig())


def split_design_priors(draws: PosteriorDraws | np.ndarray, interval: tuple[float, float],
                        reference: SubgroupSpec, covariates: TrialDataset, formula: Formula,
                        min_draws: int = 200) -> dict[str, DesignPrior]:
    """Partition draws into null (Gamma outside ``interval``) and alternative priors.

    Gamma is computed with uniform weights over ``reference`` rows so the
    split is a deterministic function of theta.
    """
    theta = draws.draws if isinstance(draws, PosteriorDraws) else np.atleast_2d(draws)
    p = reference.reference_rows.shape[1]
    gamma = gamma_values(theta[:, :p], theta[:, p:], reference)
    lo, hi = interval
    alt = (gamma > lo) & (gamma < hi)
    n_alt, n_null = int(alt.sum()), int((~alt).sum())
    for label, count in (("null", n_null), ("alternative", n_alt)):
        if count < min_draws:
            raise DesignError(
                f"only {count} draws fall in the {label} region (need {min_draws}); "
                f"supply a {label} design prior manually or widen the draw set")
    total = theta.shape[0]
    return {
        "null": DesignPrior(theta[~alt], "null", covariates, formula, gamma[~alt], n_null / total, interval),
        "alternative": DesignPrior(theta[alt], "alternative", covariates, formula, gamma[alt],
                                   n_alt / total, interval),
    }


def simulate_internal_trial(prior: DesignPrior, n: int, allocation: float = 0.5,
                            rng: np.random.Generator | None = None,
                            theta_rng: np.random.Generator | None = None,
                            source_id: str = "simulated") -> tuple[TrialDataset, np.ndarray]:
    """One synthetic internal trial and the theta that generated it.

    theta is drawn uniformly from the prior's draws (using ``theta_rng`` if
    given, else ``rng``); covariate rows are resampled with replacement from
    ``prior.covariates``; arms are Bernoulli(``allocation``); outcomes follow
    the logistic model.
    """
    if n < 1:
        raise ValueError("trial size must be >= 1")
    if not 0 < allocation < 1:
        raise ValueError("allocation must be in (0, 1)")
    rng = rng or np.random.default_rng()
    theta_rng = theta_rng or rng
    theta = prior.parameter_draws[theta_rng.integers(prior.n_draws)]
    idx = rng.integers(prior.covariates.n, size=n)
    arm = (rng.random(n) < allocation).astype(np.int8)
    base = prior.covariates.take(idx, source_id)
    base = base.replace(arm=arm, outcome=np.zeros(n, dtype=np.int8))
    design = build_design(base, prior.formula)
    p = design.p
    lp = design.prognostic_matrix @ theta[:p] + (design.modifier_matrix @ theta[p:]) * design.arm
    outcome = (rng.random(n) < expit(lp)).astype(np.int8)
    return base.replace(outcome=outcome), theta


# -- replicate machinery ------------------------------------------------------

@dataclass(frozen=True, eq=False)
class _RepTask:
    prior: DesignPrior
    analyses: tuple[tuple[str, AnalysisSpec], ...]
    external: Any
    n: int
    allocation: float
    interval: tuple[float, float]
    seed: int
    rep: int


def _run_rep(task: _RepTask) -> dict[str, tuple[float, bool]]:
    rng = rngmod.stream(task.seed, "trial", task.n, task.rep)
    theta_rng = rngmod.stream(task.seed, "theta", task.rep)
    trial, _ = simulate_internal_trial(task.prior, task.n, task.allocation, rng, theta_rng)
    mcmc_seed = int(rngmod.stream(task.seed, "mcmc-seed", task.n, task.rep).integers(2**63))
    out = {}
    fallback = task.prior.covariates
    for name, spec in task.analyses:
        spec = replace(spec, sampler=replace(spec.sampler, warn=False))
        ref = reference_spec(spec, trial, task.external, fallback=fallback)
        res = analyze(trial, task.external, spec, seed=mcmc_seed, reference=ref,
                      rule=DecisionRule(task.interval[0], task.interval[1], 0.5))
        out[name] = (res.tau, res.converged)
    return out


def _map(fn, tasks, threads: int):
    if threads and threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * threads))))
    return [fn(t) for t in tasks]


def _taus(prior, analyses, external, n, allocation, interval, n_reps, seed, threads):
    tasks = [_RepTask(prior, tuple(analyses), external, n, allocation, tuple(interval), seed, r)
             for r in range(n_reps)]
    results = _map(_run_rep, tasks, threads)
    taus = {name: np.array([r[name][0] for r in results]) for name, _ in analyses}
    ok = {name: np.array([r[name][1] for r in results]) for name, _ in analyses}
    return taus, ok


def _oc(taus: np.ndarray, ok: np.ndarray, threshold: float, config: dict,
        max_excluded: float) -> OperatingCharacteristics:
    n_excl = int((~ok).sum())
    if n_excl > max_excluded * ok.size:
        raise DesignError(f"{n_excl} of {ok.size} replicates failed to converge")
    kept = taus[ok]
    rate = float(np.mean(kept > threshold)) if kept.size else float("nan")
    se = float(np.sqrt(rate * (1 - rate) / kept.size)) if kept.size else float("nan")
    return OperatingCharacteristics(rate, se, int(kept.size), n_excl, kept, config)


def operating_characteristics(prior: DesignPrior, analysis: AnalysisSpec, n: int, rule: DecisionRule,
                              n_reps: int, seed: int, external=None, allocation: float = 0.5,
                              threads: int = 1, max_excluded: float = 0.05) -> OperatingCharacteristics:
    """Rejection rate of ``rule`` over trials simulated from ``prior``.

    Non-converged replicates are excluded and counted; more than
    ``max_excluded`` of them raises :class:`DesignError`.
    """
    if n_reps < 1:
        raise ValueError("n_reps must be >= 1")
    taus, ok = _taus(prior, [("analysis", analysis)], external, n, allocation, rule.interval,
                     n_reps, seed, threads)
    config = {"N_I": n, "nu": rule.threshold, "interval": list(rule.interval),
              "method": analysis.weighting.method, "hypothesis": prior.hypothesis, "seed": seed}
    return _oc(taus["analysis"], ok["analysis"], rule.threshold, config, max_excluded)


def calibrate_nu_from_taus(taus: np.ndarray, alpha: float, nu_grid: Sequence[float]) -> float:
    """Smallest grid threshold whose rejection rate on ``taus`` is <= ``alpha``."""
    grid = np.asarray(nu_grid, dtype=float)
    if np.any(np.diff(grid) <= 0) or np.any((grid <= 0) | (grid >= 1)):
        raise ValueError("nu_grid must be strictly increasing inside (0, 1)")
    taus = np.asarray(taus, dtype=float)
    rates = np.array([np.mean(taus > nu) for nu in grid])
    ok = np.flatnonzero(rates <= alpha)
    if ok.size == 0:
        raise DesignError(f"no threshold meets type-I budget {alpha}; best achievable "
                          f"{rates.min():.4f} at nu={grid[np.argmin(rates)]}")
    return float(grid[ok[0]])


def calibrate_nu(null_prior: DesignPrior, analysis: AnalysisSpec, n: int, alpha: float,
                 nu_grid: Sequence[float], n_reps: int, seed: int, external=None,
                 interval: tuple[float, float] = (0.0, np.inf), allocation: float = 0.5,
                 threads: int = 1) -> tuple[float, OperatingCharacteristics]:
    """Smallest ``nu`` on the grid keeping Bayesian type-I error <= ``alpha``.

    tau is computed once per replicate and thresholded at every grid value.
    Returns the threshold and the operating characteristics at it.
    """
    lo, hi = interval
    oc = operating_characteristics(null_prior, analysis, n, DecisionRule(lo, hi, 0.5), n_reps, seed,
                                   external, allocation, threads)
    nu = calibrate_nu_from_taus(oc.taus, alpha, nu_grid)
    rate = oc.rate_at(nu)
    return nu, replace(oc, rejection_rate=rate,
                       mc_standard_error=float(np.sqrt(rate * (1 - rate) / oc.n_reps)),
                       config={**oc.config, "nu": nu, "alpha": alpha})


def rejection_rates(taus: np.ndarray, thresholds: Sequence[float]) -> np.ndarray:
    taus = np.asarray(taus)
    return np.array([np.mean(taus > t) for t in thresholds])


def power_curve(alt_prior: DesignPrior, variants: Mapping[str, AnalysisSpec], n_grid: Sequence[int],
                rule: DecisionRule, n_reps: int, seed: int, external=None,
                null_prior: DesignPrior | None = None, alpha: float | None = None,
                nu_grid: Sequence[float] | None = None, calibrate_on: str | None = None,
                allocation: float = 0.5, threads: int = 1,
                max_excluded: float = 0.05) -> list[dict]:
    """Power of each analysis variant over a grid of internal sample sizes.

    All variants at a given N analyze the same simulated trials.  If
    ``null_prior`` and ``alpha`` are given, the threshold is calibrated at
    each N on null-prior trials (tau computed once, thresholded over
    ``nu_grid``).  With ``calibrate_on`` naming a variant, that variant's
    threshold is shared by every variant at the same N; otherwise each
    variant gets its own.  Without calibration ``rule.threshold`` is used
    throughout.  ``type1`` reports each variant's null rejection rate at the
    threshold it was given.
    """
    n_grid = [int(n) for n in n_grid]
    if any(b <= a for a, b in zip(n_grid, n_grid[1:])):
        raise ValueError("n_grid must be strictly increasing")
    calibrate = null_prior is not None and alpha is not None
    if calibrate and nu_grid is None:
        nu_grid = np.round(np.arange(0.5, 0.999, 0.001), 3)
    if calibrate_on is not None and calibrate_on not in variants:
        raise ValueError(f"calibrate_on={calibrate_on!r} is not a variant")
    items = list(variants.items())
    rows = []
    for n in n_grid:
        alt_taus, alt_ok = _taus(alt_prior, items, external, n, allocation, rule.interval,
                                 n_reps, seed, threads)
        if calibrate:
            null_taus, null_ok = _taus(null_prior, items, external, n, allocation, rule.interval,
                                       n_reps, seed + 1, threads)
        thresholds = {}
        if calibrate:
            for name in ([calibrate_on] if calibrate_on else variants):
                kept = null_taus[name][null_ok[name]]
                try:
                    thresholds[name] = calibrate_nu_from_taus(kept, alpha, nu_grid)
                except DesignError:
                    thresholds[name] = float(nu_grid[-1])
                    log.warning("N=%d %s: type-I budget unattainable on grid; using nu=%g",
                                n, name, thresholds[name])
        for name, spec in items:
            nu, type1 = rule.threshold, None
            if calibrate:
                nu = thresholds[calibrate_on or name]
                type1 = float(np.mean(null_taus[name][null_ok[name]] > nu))
            oc = _oc(alt_taus[name], alt_ok[name], nu, {}, max_excluded)
            rows.append({"N": n, "variant": name, "nu": float(nu), "power": oc.rejection_rate,
                         "mc_se": oc.mc_standard_error, "type1": type1, "n_reps": oc.n_reps,
                         "n_excluded": oc.n_excluded})
    return rows


def sample_size(curve: Sequence[Mapping[str, Any]], variant: str, target: float) -> tuple[int, float]:
    """Smallest grid N reaching ``target`` power, and the linearly interpolated N."""
    pts = sorted((int(r["N"]), float(r["power"])) for r in curve if r["variant"] == variant)
    if not pts:
        raise ValueError(f"no rows for variant {variant!r}")
    for i, (n, pw) in enumerate(pts):
        if pw >= target:
            if i == 0:
                return n, float(n)
            n0, p0 = pts[i - 1]
            interp = n0 + (target - p0) * (n - n0) / (pw - p0) if pw != p0 else float(n)
            return n, float(interp)
    raise DesignError(f"target power {target} not reached; max {max(p for _, p in pts):.3f}")


def synthesize_external(dataset: TrialDataset, n: int, rng: np.random.Generator,
                        strata: Sequence[str] = ()) -> TrialDataset:
    """Resample ``n`` rows with replacement, stratified by arm (and ``strata`` covariates).

    Stratum sizes keep the source proportions (largest-remainder rounding).
    """
    keys = [dataset.arm.astype(str)] + [dataset.covariates[s].astype(str) for s in strata]
    labels = np.array(["|".join(t) for t in zip(*keys)])
    uniq, inverse = np.unique(labels, return_inverse=True)
    counts = np.bincount(inverse)
    exact = counts / counts.sum() * n
    sizes = np.floor(exact).astype(int)
    short = n - sizes.sum()
    if short:
        order = np.argsort(-(exact - sizes), kind="stable")
        sizes[order[:short]] += 1
    idx = []
    for k in range(uniq.size):
        members = np.flatnonzero(inverse == k)
        idx.append(rng.choice(members, size=sizes[k], replace=True))
    return dataset.take(np.concatenate(idx), source_id=f"{dataset.source_id}-synthetic")

"""Subgroup estimands from posterior draws.

The target quantity is the marginal risk difference in a subgroup,

    Gamma(theta) = sum_n v_n [expit(x_n'beta + s'psi) - expit(x_n'beta)],

averaged over reference covariate rows ``x_n`` (with the subgroup's modifier
values substituted) using Bayesian-bootstrap weights ``v ~ Dir(1, ..., 1)``
drawn afresh for every posterior draw, or uniform weights ``1/N``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.special import expit

from . import rng as rngmod
from .dataset import Formula, TrialDataset, build_design, split_subgroup
from .inference.sampler import PosteriorDraws

__all__ = [
    "SubgroupSpec",
    "EstimandDraws",
    "DecisionRule",
    "conditional_effect_draws",
    "sensitive_set",
    "subgroup_reference",
    "marginal_effect_draws",
    "gamma_values",
    "decision_probability",
    "decide",
    "histogram",
]


@dataclass(frozen=True, eq=False)
class SubgroupSpec:
    """Subgroup definition plus the covariate rows it is marginalized over.

    Attributes
    ----------
    modifier_values : dict
        Effect-modifier values defining the subgroup.
    reference_rows : ndarray, shape (N, p)
        Encoded prognostic rows (intercept included) with the modifier
        values already substituted.
    modifier_vector : ndarray, shape (q,)
        Encoded ``s`` (intercept included).
    provenance : str
        Where the reference rows came from.
    """

    modifier_values: Mapping[str, Any]
    reference_rows: np.ndarray
    modifier_vector: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        rows = np.atleast_2d(np.asarray(self.reference_rows, dtype=float))
        if rows.shape[0] == 0:
            raise ValueError("subgroup has no reference rows")
        object.__setattr__(self, "reference_rows", rows)
        object.__setattr__(self, "modifier_vector", np.asarray(self.modifier_vector, dtype=float))


@dataclass(frozen=True, eq=False)
class EstimandDraws:
    gamma_draws: np.ndarray
    subgroup: SubgroupSpec | None = None
    bootstrap: bool = True

    def __len__(self):
        return self.gamma_draws.size

    def interval(self, level: float = 0.95) -> tuple[float, float]:
        a = (1 - level) / 2
        lo, hi = np.quantile(self.gamma_draws, [a, 1 - a])
        return float(lo), float(hi)

    def summary(self, interval: tuple[float, float] | None = None) -> dict:
        g = self.gamma_draws
        lo, hi = self.interval()
        out = {
            "n_draws": int(g.size),
            "median": float(np.median(g)),
            "mean": float(g.mean()),
            "sd": float(g.std(ddof=1)) if g.size > 1 else 0.0,
            "q2.5": lo,
            "q97.5": hi,
            "bootstrap": bool(self.bootstrap),
        }
        if interval is not None:
            out["interval"] = [float(interval[0]), float(interval[1])]
            out["tau"] = decision_probability(self, interval)
        return out


@dataclass(frozen=True)
class DecisionRule:
    """Reject H0 when P(lower < Gamma < upper | data) > threshold."""

    lower: float = 0.0
    upper: float = np.inf
    threshold: float = 0.95

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError("need lower < upper")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must be in (0, 1)")

    @property
    def interval(self) -> tuple[float, float]:
        return (self.lower, self.upper)

    def with_threshold(self, threshold: float) -> "DecisionRule":
        return DecisionRule(self.lower, self.upper, threshold)


def conditional_effect_draws(draws: PosteriorDraws | np.ndarray, s: Sequence[float]) -> np.ndarray:
    """Per-draw treatment effect ``s'psi`` on the linear-predictor scale."""
    psi = draws.psi if isinstance(draws, PosteriorDraws) else np.atleast_2d(draws)
    s = np.asarray(s, dtype=float)
    if s.shape != (psi.shape[1],):
        raise ValueError(f"s has length {s.size}, psi has {psi.shape[1]} coefficients")
    return psi @ s


def sensitive_set(draws, candidates: Sequence[Sequence[float]], delta_c: float,
                  epsilon: float) -> list[tuple[float, ...]]:
    """Candidates whose effect exceeds ``delta_c`` with posterior probability > 1 - epsilon."""
    if len(candidates) == 0:
        raise ValueError("no candidate profiles")
    out = []
    for s in candidates:
        exceed = np.mean(conditional_effect_draws(draws, s) > delta_c)
        if exceed > 1 - epsilon:
            out.append(tuple(float(v) for v in s))
    return out


def subgroup_reference(dataset: TrialDataset, formula: Formula, modifier_values: Mapping[str, Any],
                       restrict: bool = True) -> SubgroupSpec:
    """Reference rows from ``dataset`` for the subgroup ``modifier_values``.

    With ``restrict`` only rows already in the subgroup are used; otherwise
    every row is used with its modifier values overwritten.
    """
    missing = set(formula.modifiers) - set(modifier_values)
    if missing:
        raise ValueError(f"subgroup must fix every effect modifier; missing {sorted(missing)}")
    rows = split_subgroup(dataset, modifier_values) if restrict else dataset
    if rows.n == 0:
        raise ValueError(f"no rows of {dataset.source_id!r} fall in subgroup {dict(modifier_values)}")
    cov = dict(rows.covariates)
    for name, value in modifier_values.items():
        spec = rows.spec(name)
        cov[name] = np.full(rows.n, value if spec.kind != "categorical" else str(value),
                            dtype=object if spec.kind == "categorical" else float)
    fixed = rows.replace(covariates=cov)
    design = build_design(fixed, formula)
    return SubgroupSpec(dict(modifier_values), design.prognostic_matrix, design.modifier_matrix[0],
                        provenance=f"{dataset.source_id}{'[subgroup]' if restrict else ''}")


def gamma_values(beta: np.ndarray, psi: np.ndarray, subgroup: SubgroupSpec,
                 row_weights: np.ndarray | None = None) -> np.ndarray:
    """Gamma for each parameter draw; ``row_weights`` is ``(R, N)`` or None for uniform."""
    lp0 = np.atleast_2d(beta) @ subgroup.reference_rows.T          # (R, N)
    effect = np.atleast_2d(psi) @ subgroup.modifier_vector          # (R,)
    diff = expit(lp0 + effect[:, None]) - expit(lp0)
    if row_weights is None:
        return diff.mean(axis=1)
    return np.sum(diff * row_weights, axis=1)


def marginal_effect_draws(draws: PosteriorDraws, subgroup: SubgroupSpec, bootstrap: bool = True,
                          seed: int = 0) -> EstimandDraws:
    """Posterior draws of the marginal subgroup risk difference.

    With ``bootstrap`` each posterior draw gets its own Dirichlet(1, ..., 1)
    weighting of the reference rows (normalized unit exponentials from the
    ``"bayesian-bootstrap"`` substream of ``seed``).
    """
    R, N = draws.draws.shape[0], subgroup.reference_rows.shape[0]
    if draws.beta.shape[1] != subgroup.reference_rows.shape[1]:
        raise ValueError("reference rows do not match the prognostic design")
    weights = None
    if bootstrap:
        e = rngmod.stream(seed, "bayesian-bootstrap").standard_exponential((R, N))
        weights = e / e.sum(axis=1, keepdims=True)
    return EstimandDraws(gamma_values(draws.beta, draws.psi, subgroup, weights), subgroup, bootstrap)


def decision_probability(estimand: EstimandDraws | np.ndarray, interval: tuple[float, float]) -> float:
    """Fraction of draws strictly inside ``interval``."""
    g = estimand.gamma_draws if isinstance(estimand, EstimandDraws) else np.asarray(estimand)
    if g.size == 0:
        raise ValueError("no draws")
    lo, hi = interval
    return float(np.mean((g > lo) & (g < hi)))


def decide(tau: float, rule: DecisionRule | float) -> bool:
    threshold = rule.threshold if isinstance(rule, DecisionRule) else float(rule)
    return bool(tau > threshold)


def histogram(values: np.ndarray, bins: int = 40, range_: tuple[float, float] | None = None) -> list[dict]:
    """Binned counts ready for plotting."""
    counts, edges = np.histogram(values, bins=bins, range=range_)
    return [{"lower": float(edges[i]), "upper": float(edges[i + 1]), "count": int(c)}
            for i, c in enumerate(counts)]

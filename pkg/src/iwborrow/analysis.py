"""One complete weighted-borrowing analysis: weights, posterior, estimand.

This glues the similarity, inference and estimand modules together and is
what the simulation study, the design module and the command line call
for every analysis they run.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Sequence

import numpy as np

from .dataset import DesignMatrixBundle, Formula, TrialDataset, build_design, concat_datasets
from .estimand import (DecisionRule, EstimandDraws, SubgroupSpec, decision_probability,
                       marginal_effect_draws, subgroup_reference)
from .inference import PosteriorDraws, PriorSpec, SamplerConfig, WeightedModel, sample_posterior
from .similarity import (WeightVector, compute_weights, constant_weights, fit_similarity_model,
                         gower_weights, propensity_weights, truncate)

__all__ = ["WeightingConfig", "AnalysisSpec", "AnalysisResult", "borrowing_weights",
           "as_sources", "analyze", "METHODS"]

WEIGHT_METHODS = ("posterior_predictive", "gower", "propensity", "full", "none")

#: Named analysis variants used in the simulation study.
METHODS = ("FB", "IW", "IW.t", "IW.m", "IW.m.t", "NB")


@dataclass(frozen=True)
class WeightingConfig:
    """How external patients are weighted.

    ``method`` is one of ``posterior_predictive``, ``gower``,
    ``propensity``, ``full`` (all weights 1) or ``none`` (all 0).
    ``truncation`` is None, ``"ess_cap"`` (cap at the internal sample size)
    or ``("quantile", fraction)``.
    """

    method: str = "posterior_predictive"
    covariates: tuple[str, ...] | None = None
    normalization: str = "max_internal"
    bandwidth: Any = "silverman"
    pseudocount: float = 1.0
    variant: str = "posterior"
    truncation: Any = None
    penalty: float = 0.0

    def __post_init__(self):
        if self.method not in WEIGHT_METHODS:
            raise ValueError(f"unknown weighting method {self.method!r}")
        if self.covariates is not None:
            object.__setattr__(self, "covariates", tuple(self.covariates))
        if isinstance(self.truncation, list):
            object.__setattr__(self, "truncation", tuple(self.truncation))

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "WeightingConfig":
        d = dict(d)
        trunc = d.get("truncation")
        if isinstance(trunc, Mapping):
            (k, v), = trunc.items()
            d["truncation"] = (k, v)
        elif trunc in ("none", "None", ""):
            d["truncation"] = None
        return cls(**d)


def as_sources(external) -> list[TrialDataset]:
    if external is None:
        return []
    if isinstance(external, TrialDataset):
        return [external]
    return list(external)


def _concat_weights(parts: Sequence[WeightVector], method: str) -> WeightVector:
    if len(parts) == 1:
        return parts[0]
    raw = [p.raw if p.raw is not None else p.weights for p in parts]
    return WeightVector(np.concatenate([p.weights for p in parts]), raw=np.concatenate(raw),
                        method=method, normalization=parts[0].normalization,
                        normalizer=parts[0].normalizer)


def borrowing_weights(internal: TrialDataset, external, config: WeightingConfig) -> WeightVector:
    """Weights for every row of the external source(s), stacked in source order."""
    sources = as_sources(external)
    n_ext = sum(s.n for s in sources)
    if config.method == "full":
        w = constant_weights(n_ext, 1.0, "full")
    elif config.method == "none":
        w = constant_weights(n_ext, 0.0, "none")
    elif config.method == "posterior_predictive":
        model = fit_similarity_model(internal, config.covariates, config.bandwidth,
                                     config.pseudocount, config.variant)
        w = _concat_weights([compute_weights(model, s, config.normalization) for s in sources],
                            "posterior_predictive")
    else:
        pooled = concat_datasets(sources)
        if config.method == "gower":
            w = gower_weights(internal, pooled, config.covariates)
        else:
            w = propensity_weights(internal, pooled, config.covariates, config.penalty)
    if config.truncation is not None and n_ext:
        if config.truncation == "ess_cap":
            w = truncate(w, ("ess_cap", internal.n))
        else:
            w = truncate(w, tuple(config.truncation))
    return w


@dataclass(frozen=True)
class AnalysisSpec:
    """Everything needed to analyze one internal data set with external borrowing."""

    formula: Formula
    subgroup: Mapping[str, Any]
    weighting: WeightingConfig = field(default_factory=WeightingConfig)
    prior_scale: float = 2.5
    prior_loc: float = 0.0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    reference: str = "internal"
    restrict_reference: bool = True
    bootstrap: bool = True

    def with_weighting(self, **changes) -> "AnalysisSpec":
        return replace(self, weighting=replace(self.weighting, **changes))

    def prior(self, dim: int) -> PriorSpec:
        return PriorSpec.normal(dim, self.prior_loc, self.prior_scale)


@dataclass(frozen=True, eq=False)
class AnalysisResult:
    weights: WeightVector
    posterior: PosteriorDraws
    estimand: EstimandDraws
    tau: float | None = None

    @property
    def converged(self) -> bool:
        return self.posterior.converged


def _design(sources: Sequence[TrialDataset], formula: Formula, p: int, q: int) -> DesignMatrixBundle | None:
    if not sources:
        return None
    parts = [build_design(s, formula) for s in sources]
    return DesignMatrixBundle(
        np.vstack([b.prognostic_matrix for b in parts]),
        np.vstack([b.modifier_matrix for b in parts]),
        np.concatenate([b.arm for b in parts]),
        np.concatenate([b.outcome for b in parts]),
        parts[0].beta_names, parts[0].psi_names)


def reference_spec(spec: AnalysisSpec, internal: TrialDataset, external,
                   fallback: TrialDataset | None = None) -> SubgroupSpec:
    sources = as_sources(external)
    if spec.reference == "internal":
        base = internal
    elif spec.reference == "external":
        base = concat_datasets(sources)
    elif spec.reference == "pooled":
        base = concat_datasets([internal] + sources, "pooled")
    else:
        raise ValueError(f"unknown reference source {spec.reference!r}")
    try:
        return subgroup_reference(base, spec.formula, spec.subgroup, spec.restrict_reference)
    except ValueError:
        if fallback is None:
            raise
        return subgroup_reference(fallback, spec.formula, spec.subgroup, spec.restrict_reference)


def analyze(internal: TrialDataset, external, spec: AnalysisSpec, seed: int = 0,
            rule: DecisionRule | None = None, weights: WeightVector | None = None,
            reference: SubgroupSpec | None = None) -> AnalysisResult:
    """Weight, fit and summarize one data set.

    ``seed`` drives the sampler and the Bayesian bootstrap; the same seed
    with different weighting methods gives paired analyses.
    """
    sources = as_sources(external)
    if weights is None:
        weights = borrowing_weights(internal, sources, spec.weighting)
    d_int = build_design(internal, spec.formula)
    d_ext = _design(sources, spec.formula, d_int.p, d_int.q)
    model = WeightedModel(d_int, d_ext, weights if d_ext is not None else None,
                          prior=spec.prior(d_int.p + d_int.q))
    draws = sample_posterior(model, spec.sampler.with_seed(seed))
    ref = reference if reference is not None else reference_spec(spec, internal, sources)
    est = marginal_effect_draws(draws, ref, bootstrap=spec.bootstrap, seed=seed)
    tau = decision_probability(est, rule.interval) if rule is not None else None
    return AnalysisResult(weights, draws, est, tau)

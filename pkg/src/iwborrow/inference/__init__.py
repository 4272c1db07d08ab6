"""Weighted logistic posterior: evaluation, sampling, diagnostics."""

from .model import (PriorSpec, ParameterVector, WeightedModel, log_posterior,
                    grad_log_posterior)
from .sampler import SamplerConfig, PosteriorDraws, ConvergenceWarning, sample_posterior
from .quadrature import GridTooNarrow, quadrature_posterior

__all__ = [
    "PriorSpec", "ParameterVector", "WeightedModel", "log_posterior", "grad_log_posterior",
    "SamplerConfig", "PosteriorDraws", "ConvergenceWarning", "sample_posterior",
    "GridTooNarrow", "quadrature_posterior",
]

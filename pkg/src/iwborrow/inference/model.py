"""Individually weighted logistic posterior.

log pi(theta) = log pi0(theta) + sum_internal l_n(theta) + sum_external w_n l_n(theta)

with l_n the Bernoulli log-likelihood of ``y_n`` under success probability
``expit(x_n'beta + (s_n'psi) a_n)``.  Rows with identical design and outcome
are merged (their weights summed) before evaluation, which is exact and
makes designs with few distinct covariate patterns cheap.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..dataset import DesignMatrixBundle
from ..similarity import WeightVector

__all__ = ["PriorSpec", "ParameterVector", "WeightedModel", "log_posterior", "grad_log_posterior"]

_LOG_2PI = np.log(2 * np.pi)


@dataclass(frozen=True, eq=False)
class PriorSpec:
    """Independent normal priors per coefficient; ``scale = inf`` means flat."""

    loc: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        loc = np.atleast_1d(np.asarray(self.loc, dtype=float))
        scale = np.atleast_1d(np.asarray(self.scale, dtype=float))
        loc, scale = np.broadcast_arrays(loc, scale)
        if np.any(~(scale > 0)):
            raise ValueError("prior scales must be positive")
        object.__setattr__(self, "loc", loc.copy())
        object.__setattr__(self, "scale", scale.copy())

    @classmethod
    def normal(cls, dim: int, loc: float | Sequence[float] = 0.0,
               scale: float | Sequence[float] = 2.5) -> "PriorSpec":
        return cls(np.broadcast_to(np.asarray(loc, float), (dim,)),
                   np.broadcast_to(np.asarray(scale, float), (dim,)))

    @classmethod
    def flat(cls, dim: int) -> "PriorSpec":
        return cls(np.zeros(dim), np.full(dim, np.inf))

    @property
    def dim(self) -> int:
        return self.loc.size

    @property
    def is_proper(self) -> bool:
        return bool(np.all(np.isfinite(self.scale)))

    @property
    def precision(self) -> np.ndarray:
        return np.where(np.isfinite(self.scale), 1.0 / self.scale**2, 0.0)

    def logpdf(self, theta: np.ndarray) -> np.ndarray:
        fin = np.isfinite(self.scale)
        const = -np.sum(np.log(self.scale[fin])) - 0.5 * fin.sum() * _LOG_2PI
        dev = theta - self.loc
        return -0.5 * (dev * dev) @ self.precision + const

    def grad(self, theta: np.ndarray) -> np.ndarray:
        return -(theta - self.loc) * self.precision


@dataclass(frozen=True)
class ParameterVector:
    beta: np.ndarray
    psi: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.beta, float), np.asarray(self.psi, float)])

    @classmethod
    def split(cls, theta: np.ndarray, p: int) -> "ParameterVector":
        theta = np.asarray(theta, float)
        return cls(theta[:p].copy(), theta[p:].copy())


def _as_weights(weights, n: int) -> np.ndarray:
    if weights is None:
        return np.zeros(n)
    if isinstance(weights, WeightVector):
        w = weights.effective
    else:
        w = np.asarray(weights, dtype=float)
        if np.any(w < 0) or np.any(w > 1) or np.any(~np.isfinite(w)):
            raise ValueError("weights must lie in [0, 1]")
    if w.shape != (n,):
        raise ValueError(f"expected {n} weights, got {w.shape}")
    return w


class WeightedModel:
    """Weighted logistic posterior over ``theta = (beta, psi)``.

    Parameters
    ----------
    internal : DesignMatrixBundle
        Trial data (weight 1).  May have zero rows.
    external : DesignMatrixBundle, optional
    weights : WeightVector or array, optional
        One weight per external row; truncated rows count as 0.
        Required when ``external`` is given.
    prior : PriorSpec, optional
        Defaults to N(0, 2.5) on every coefficient.
    """

    def __init__(self, internal: DesignMatrixBundle, external: DesignMatrixBundle | None = None,
                 weights: WeightVector | np.ndarray | None = None, prior: PriorSpec | None = None):
        self.internal = internal
        self.external = external
        self.p, self.q = internal.p, internal.q
        self.names = tuple(internal.beta_names) + tuple(internal.psi_names)
        blocks_z = [internal.full_matrix()]
        blocks_y = [internal.outcome]
        blocks_w = [np.ones(internal.n)]
        if external is not None:
            if (external.p, external.q) != (self.p, self.q):
                raise ValueError("internal and external designs have different shapes")
            if weights is None:
                raise ValueError("external data need weights")
            self.external_weights = _as_weights(weights, external.n)
            blocks_z.append(external.full_matrix())
            blocks_y.append(external.outcome)
            blocks_w.append(self.external_weights)
        else:
            self.external_weights = np.zeros(0)
        self.dim = self.p + self.q
        self.prior = prior if prior is not None else PriorSpec.normal(self.dim)
        if self.prior.dim != self.dim:
            raise ValueError(f"prior has dimension {self.prior.dim}, model {self.dim}")
        Z = np.vstack(blocks_z)
        y = np.concatenate(blocks_y)
        w = np.concatenate(blocks_w)
        keep = w > 0
        Z, y, w = Z[keep], y[keep], w[keep]
        if Z.shape[0]:
            rows, inverse = np.unique(np.column_stack([Z, y]), axis=0, return_inverse=True)
            w = np.bincount(inverse.ravel(), weights=w, minlength=rows.shape[0])
            Z, y = rows[:, :-1], rows[:, -1]
        self.Z = np.ascontiguousarray(Z)
        self.y = y
        self.w = w
        self.sign = 2.0 * y - 1.0
        self.sw = self.sign * self.w
        self._prec = self.prior.precision

    @property
    def n_rows(self) -> int:
        return self.Z.shape[0]

    def _check(self, theta) -> np.ndarray:
        theta = np.asarray(theta.vector if isinstance(theta, ParameterVector) else theta, dtype=float)
        if theta.shape[-1] != self.dim:
            raise ValueError(f"theta has length {theta.shape[-1]}, model expects {self.dim}")
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta must be finite")
        return theta

    def log_likelihood(self, theta) -> np.ndarray:
        theta = self._check(theta)
        u = (theta @ self.Z.T) * self.sign
        # log expit(u) = -(max(-u, 0) + log1p(exp(-|u|)))
        return -(np.maximum(-u, 0.0) + np.log1p(np.exp(-np.abs(u)))) @ self.w

    def logp(self, theta) -> np.ndarray:
        return self.logp_only(self._check(theta))

    def logp_grad(self, theta) -> tuple[np.ndarray, np.ndarray]:
        """Log posterior and gradient; ``theta`` may be ``(d,)`` or ``(chains, d)``."""
        return self.unconstrained_logp_grad(self._check(theta))

    def logp_only(self, theta):
        """Log density without input validation."""
        u = (theta @ self.Z.T) * self.sign
        ll = -(np.maximum(-u, 0.0) + np.log1p(np.exp(-np.abs(u)))) @ self.w
        return ll + self.prior.logpdf(theta)

    def grad_only(self, theta):
        """Gradient without the log density (leapfrog inner steps)."""
        with np.errstate(over="ignore"):
            tail = 1.0 / (1.0 + np.exp((theta @ self.Z.T) * self.sign))
        return (tail * self.sw) @ self.Z - (theta - self.prior.loc) * self._prec

    def unconstrained_logp_grad(self, theta):
        """Like :meth:`logp_grad` without input validation (sampler inner loop)."""
        u = (theta @ self.Z.T) * self.sign
        e = np.exp(-np.abs(u))
        ll = -(np.maximum(-u, 0.0) + np.log1p(e)) @ self.w
        # d/d eta of log expit(sign * eta) = sign * expit(-u) = y - expit(eta)
        tail = np.where(u >= 0, e, 1.0) / (1.0 + e)
        grad = (tail * self.sw) @ self.Z + self.prior.grad(theta)
        return ll + self.prior.logpdf(theta), grad


def log_posterior(theta, model: WeightedModel) -> float:
    """Unnormalized log density of the weighted posterior at ``theta``."""
    return float(model.logp(theta))


def grad_log_posterior(theta, model: WeightedModel) -> np.ndarray:
    return model.logp_grad(theta)[1]

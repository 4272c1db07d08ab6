"""Per-patient borrowing weights for external data.

The default weight of an external patient is the posterior-predictive
probability (or density) of their weighting covariates under a similarity
model fitted to the internal trial: a product over covariates of a
Gaussian kernel density (continuous), a Beta-Binomial predictive (binary) or
a Dirichlet-Multinomial predictive (categorical).  Raw weights are
normalized to [0, 1].  Gower similarity and a logistic propensity score are
provided as alternatives.  :func:`truncate` drops the low-weight tail so the
external effective sample size does not exceed the trial's.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from .dataset import TrialDataset

__all__ = [
    "SimilarityError",
    "ContinuousComponent",
    "BinaryComponent",
    "CategoricalComponent",
    "SimilarityModel",
    "WeightVector",
    "silverman_bandwidth",
    "default_weighting_covariates",
    "fit_similarity_model",
    "raw_weight",
    "raw_weights",
    "compute_weights",
    "gower_weights",
    "propensity_weights",
    "truncate",
    "effective_sample_size",
    "constant_weights",
]

log = logging.getLogger(__name__)

NORMALIZATIONS = ("max_internal", "max_external", "cap_at_one")


class SimilarityError(ValueError):
    pass


def silverman_bandwidth(x: np.ndarray) -> float:
    """Silverman's rule of thumb, ``0.9 * min(sd, IQR/1.34) * n**(-1/5)``."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 2:
        raise SimilarityError("need at least two values for a bandwidth")
    sd = np.std(x, ddof=1)
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34)
    if spread <= 0:
        spread = sd
    return 0.9 * spread * n ** (-0.2)


@dataclass(frozen=True, eq=False)
class ContinuousComponent:
    """Gaussian kernel density of the internal values."""

    name: str
    values: np.ndarray
    bandwidth: float

    def density(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        u = (z[:, None] - self.values[None, :]) / self.bandwidth
        return np.exp(-0.5 * u * u).mean(axis=1) / (self.bandwidth * np.sqrt(2 * np.pi))

    def __call__(self, z):
        return self.density(np.atleast_1d(z))


@dataclass(frozen=True)
class FlatComponent:
    """Factor 1 for every value."""

    name: str

    def __call__(self, z):
        return np.ones(np.atleast_1d(z).shape[0])


@dataclass(frozen=True)
class BinaryComponent:
    """Beta-Binomial posterior predictive; ``p_one`` = P(z = 1 | internal)."""

    name: str
    p_one: float

    def __call__(self, z):
        z = np.asarray(np.atleast_1d(z), dtype=float)
        return np.where(z == 1.0, self.p_one, 1.0 - self.p_one)


@dataclass(frozen=True)
class CategoricalComponent:
    """Dirichlet-Multinomial posterior predictive over declared levels."""

    name: str
    levels: tuple[str, ...]
    probs: tuple[float, ...]

    def __call__(self, z):
        z = np.asarray(np.atleast_1d(z)).astype(str)
        lookup = dict(zip(self.levels, self.probs))
        try:
            return np.array([lookup[v] for v in z])
        except KeyError as e:
            raise SimilarityError(f"{self.name}: unknown level {e.args[0]!r}") from None


@dataclass(frozen=True, eq=False)
class SimilarityModel:
    """Fitted similarity model: one predictive component per weighting covariate.

    ``internal`` is kept so the ``max_internal`` normalizer can be computed.
    """

    components: tuple
    internal: TrialDataset | None = None
    variant: str = "posterior"

    @property
    def covariate_list(self) -> list[str]:
        return [c.name for c in self.components]


@dataclass(frozen=True, eq=False)
class WeightVector:
    """Borrowing weights for the rows of one external dataset.

    ``weights`` are in [0, 1]; rows with ``retained == False`` have been
    truncated away and contribute nothing.
    """

    weights: np.ndarray
    raw: np.ndarray | None = None
    truncation: str = "none"
    cutoff_value: float | None = None
    retained: np.ndarray | None = None
    method: str = "posterior_predictive"
    normalization: str | None = None
    normalizer: float | None = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1:
            raise SimilarityError("weights must be a vector")
        if np.any(~np.isfinite(w)) or np.any(w < 0) or np.any(w > 1):
            raise SimilarityError("weights must lie in [0, 1]")
        retained = np.ones(w.size, dtype=bool) if self.retained is None else np.asarray(self.retained, dtype=bool)
        if retained.shape != w.shape:
            raise SimilarityError("retained mask must match weights")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "retained", retained)

    def __len__(self):
        return self.weights.size

    @property
    def effective(self) -> np.ndarray:
        """Weights with truncated rows set to zero; what enters the likelihood."""
        return np.where(self.retained, self.weights, 0.0)

    @property
    def ess(self) -> float:
        return effective_sample_size(self)

    def summary(self) -> dict:
        return {
            "method": self.method,
            "normalization": self.normalization,
            "truncation": self.truncation,
            "ess": float(self.ess),
            "cutoff": None if self.cutoff_value is None else float(self.cutoff_value),
            "n_external": int(self.weights.size),
            "n_retained": int(self.retained.sum()),
        }


def constant_weights(n: int, value: float, method: str | None = None) -> WeightVector:
    """Same weight for every row; ``value`` 1 is full borrowing, 0 no borrowing."""
    return WeightVector(np.full(n, float(value)), method=method or f"constant({value:g})")


def default_weighting_covariates(dataset: TrialDataset) -> list[str]:
    return [s.name for s in dataset.schema if s.role == "prognostic_only"]


def fit_similarity_model(internal: TrialDataset, weighting_covariates: Sequence[str] | None = None,
                         bandwidth: str | float | Mapping[str, float] = "silverman",
                         pseudocount: float = 1.0, variant: str = "posterior") -> SimilarityModel:
    """Fit one predictive component per weighting covariate on the internal data.

    Parameters
    ----------
    internal : TrialDataset
    weighting_covariates : list of str, optional
        Defaults to every prognostic-only covariate.  Effect modifiers are
        rejected: weighting on them would down-weight exactly the sparse
        subgroups that borrowing is meant to enrich.
    bandwidth : "silverman", float or mapping name -> float
        Kernel bandwidth for continuous covariates.
    pseudocount : float
        Beta / Dirichlet prior mass per cell.
    variant : {"posterior", "prior"}
        ``"prior"`` gives the auxiliary (prior-predictive) similarity, which
        ignores the internal data: binary/categorical components use the
        pseudocounts alone and continuous components are flat.
    """
    if pseudocount <= 0:
        raise SimilarityError("pseudocount must be positive")
    if variant not in ("posterior", "prior"):
        raise SimilarityError(f"unknown variant {variant!r}")
    if weighting_covariates is None:
        weighting_covariates = default_weighting_covariates(internal)
    comps = []
    for name in weighting_covariates:
        spec = internal.spec(name)
        if spec.is_modifier:
            raise SimilarityError(f"{name!r} is an effect modifier; weighting on it is not supported")
        if not internal.has(name):
            raise SimilarityError(f"{name!r} is not recorded in the internal data")
        col = internal.covariates[name]
        if spec.kind == "continuous":
            if variant == "prior":
                comps.append(FlatComponent(name))
                continue
            if np.ptp(col) == 0:
                raise SimilarityError(f"{name!r} is constant in the internal data; "
                                      "declare it binary/categorical or drop it")
            if isinstance(bandwidth, Mapping):
                h = float(bandwidth.get(name, silverman_bandwidth(col)))
            elif bandwidth == "silverman":
                h = silverman_bandwidth(col)
            else:
                h = float(bandwidth)
            if not h > 0:
                raise SimilarityError(f"{name!r}: bandwidth must be positive")
            comps.append(ContinuousComponent(name, np.array(col, dtype=float), h))
        elif spec.kind == "binary":
            k = 0.0 if variant == "prior" else float(col.sum())
            n = 0.0 if variant == "prior" else float(col.size)
            comps.append(BinaryComponent(name, (k + pseudocount) / (n + 2 * pseudocount)))
        else:
            counts = np.array([(col == lv).sum() for lv in spec.levels], dtype=float)
            if variant == "prior":
                counts[:] = 0.0
            probs = (counts + pseudocount) / (counts.sum() + pseudocount * len(spec.levels))
            comps.append(CategoricalComponent(name, spec.levels, tuple(probs.tolist())))
    return SimilarityModel(tuple(comps), internal, variant)


def raw_weight(model: SimilarityModel, z: Mapping[str, object]) -> float:
    """Posterior-predictive similarity of one covariate vector (unnormalized)."""
    w = 1.0
    for comp in model.components:
        if comp.name not in z or z[comp.name] is None:
            raise SimilarityError(f"missing value for weighting covariate {comp.name!r}")
        w *= float(comp(z[comp.name])[0])
    return w


def raw_weights(model: SimilarityModel, dataset: TrialDataset) -> np.ndarray:
    """Raw weight of every row of ``dataset``.

    Components whose covariate is absent for the whole source are skipped
    (factor 1), i.e. the weight then reflects the recorded covariates only.
    """
    w = np.ones(dataset.n)
    for comp in model.components:
        if comp.name not in dataset.covariates:
            raise SimilarityError(f"dataset lacks weighting covariate {comp.name!r}")
        if comp.name in dataset.absent:
            log.info("source %s lacks %s; factor skipped", dataset.source_id, comp.name)
            continue
        w *= comp(dataset.covariates[comp.name])
    return w


def compute_weights(model: SimilarityModel, external: TrialDataset,
                    normalization: str = "max_internal") -> WeightVector:
    """Normalized posterior-predictive weights for ``external``.

    ``max_internal`` divides by the largest raw weight attained by an
    internal patient's own covariates, ``max_external`` by the largest
    external raw weight, ``cap_at_one`` uses the raw value; all are then
    clipped at 1.
    """
    if normalization not in NORMALIZATIONS:
        raise SimilarityError(f"unknown normalization {normalization!r}")
    raw = raw_weights(model, external)
    if normalization == "max_internal":
        if model.internal is None:
            raise SimilarityError("max_internal normalization needs the internal data")
        internal_raw = raw_weights(model, model.internal.replace(absent=external.absent & frozenset(model.covariate_list)))
        normalizer = float(internal_raw.max()) if internal_raw.size else 1.0
    elif normalization == "max_external":
        normalizer = float(raw.max()) if raw.size else 1.0
    else:
        normalizer = 1.0
    if not normalizer > 0:
        raise SimilarityError("normalizer is zero")
    weights = np.minimum(raw / normalizer, 1.0)
    return WeightVector(weights, raw=raw, method="posterior_predictive",
                        normalization=normalization, normalizer=normalizer)


def _check_shared(internal: TrialDataset, external: TrialDataset, covariates: Sequence[str]):
    for name in covariates:
        if not internal.has(name) or not external.has(name):
            raise SimilarityError(f"{name!r} must be recorded in both internal and external data")


def gower_weights(internal: TrialDataset, external: TrialDataset,
                  weighting_covariates: Sequence[str] | None = None) -> WeightVector:
    """Mean Gower similarity of each external patient to the internal patients.

    Continuous distances are absolute differences scaled by the pooled
    range; binary and categorical distances are mismatch indicators.
    """
    if weighting_covariates is None:
        weighting_covariates = default_weighting_covariates(internal)
    _check_shared(internal, external, weighting_covariates)
    k = len(weighting_covariates)
    if k == 0:
        return WeightVector(np.ones(external.n), method="gower")
    dist = np.zeros(external.n)
    for name in weighting_covariates:
        spec = internal.spec(name)
        zi, ze = internal.covariates[name], external.covariates[name]
        if spec.kind == "continuous":
            span = max(zi.max(), ze.max()) - min(zi.min(), ze.min())
            if span == 0:
                warnings.warn(f"{name!r} has zero range; it contributes no distance", stacklevel=2)
                continue
            d = np.abs(ze[:, None] - zi[None, :]).mean(axis=1) / span
        else:
            d = (ze[:, None] != zi[None, :]).mean(axis=1)
        dist += d
    sim = np.clip(1.0 - dist / k, 0.0, 1.0)
    return WeightVector(sim, raw=sim.copy(), method="gower")


def _encode(dataset: TrialDataset, covariates: Sequence[str]) -> np.ndarray:
    cols = [dataset.spec(c).encode(dataset.covariates[c]) for c in covariates]
    return np.hstack(cols) if cols else np.zeros((dataset.n, 0))


def _fit_logistic(X: np.ndarray, y: np.ndarray, penalty: float, max_iter: int = 100,
                  tol: float = 1e-10) -> np.ndarray:
    """Newton-Raphson for logistic regression with an L2 penalty on the slopes.

    Raises SimilarityError on (quasi-)separation when unpenalized.
    """
    n, d = X.shape
    pen = np.full(d, float(penalty))
    pen[0] = 0.0
    beta = np.zeros(d)
    for _ in range(max_iter):
        eta = X @ beta
        p = expit(eta)
        grad = X.T @ (y - p) - pen * beta
        H = (X * (p * (1 - p))[:, None]).T @ X + np.diag(pen)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        beta = beta + step
        if np.max(np.abs(X @ beta)) > 30 and penalty == 0:
            raise SimilarityError("membership model is (quasi-)separated; "
                                  "set a positive propensity penalty")
        if np.max(np.abs(step)) < tol:
            return beta
    if penalty == 0:
        raise SimilarityError("membership model did not converge (possible separation); "
                              "set a positive propensity penalty")
    return beta


def propensity_weights(internal: TrialDataset, external: TrialDataset,
                       weighting_covariates: Sequence[str] | None = None,
                       penalty: float = 0.0) -> WeightVector:
    """Estimated probability of internal-trial membership for each external patient.

    A logistic model of membership (1 = internal) on the weighting
    covariates is fitted by (optionally ridge-penalized) maximum likelihood.
    Continuous covariates are standardized on the pooled sample so the
    penalty is scale-free.
    """
    if weighting_covariates is None:
        weighting_covariates = default_weighting_covariates(internal)
    _check_shared(internal, external, weighting_covariates)
    Xi, Xe = _encode(internal, weighting_covariates), _encode(external, weighting_covariates)
    X = np.vstack([Xi, Xe])
    if X.shape[1]:
        mu, sd = X.mean(axis=0), X.std(axis=0)
        sd[sd == 0] = 1.0
        X = (X - mu) / sd
    X = np.hstack([np.ones((X.shape[0], 1)), X])
    y = np.concatenate([np.ones(internal.n), np.zeros(external.n)])
    beta = _fit_logistic(X, y, penalty)
    w = expit(X[internal.n:] @ beta)
    return WeightVector(w, raw=w.copy(), method="propensity")


def _order(weights: np.ndarray) -> np.ndarray:
    """Indices by decreasing weight, ties kept in input order."""
    return np.argsort(-weights, kind="stable")


def truncate(weights: WeightVector, policy: str | tuple, n_internal: float | None = None,
             fraction: float | None = None) -> WeightVector:
    """Drop the low-weight tail of ``weights``.

    ``policy="ess_cap"`` keeps patients in decreasing weight order while the
    retained weight sum stays <= ``n_internal``.  ``policy="quantile"``
    drops the ``floor(fraction * n)`` smallest weights.  Tuples
    ``("ess_cap", n)`` and ``("quantile", f)`` are also accepted.
    """
    if isinstance(policy, (tuple, list)):
        policy, arg = policy
        if policy == "ess_cap":
            n_internal = arg
        else:
            fraction = arg
    if weights.truncation != "none":
        raise SimilarityError("weights are already truncated")
    w = weights.weights
    order = _order(w)
    retained = np.zeros(w.size, dtype=bool)
    if policy == "ess_cap":
        if n_internal is None or not n_internal > 0:
            raise SimilarityError("ess_cap needs a positive internal sample size")
        if w.sum() <= n_internal:
            return replace(weights, truncation=f"ess_cap({n_internal:g})", cutoff_value=None,
                           retained=np.ones(w.size, dtype=bool))
        csum = np.cumsum(w[order])
        keep = int(np.searchsorted(csum, n_internal, side="right"))
        retained[order[:keep]] = True
        label = f"ess_cap({n_internal:g})"
    elif policy == "quantile":
        if fraction is None or not 0 <= fraction < 1:
            raise SimilarityError("quantile fraction must be in [0, 1)")
        drop = int(np.floor(fraction * w.size + 1e-9))
        keep = w.size - drop
        retained[order[:keep]] = True
        label = f"quantile({fraction:g})"
    else:
        raise SimilarityError(f"unknown truncation policy {policy!r}")
    cutoff = float(w[order[keep]]) if keep < w.size else None
    return replace(weights, truncation=label, cutoff_value=cutoff, retained=retained)


def effective_sample_size(weights: WeightVector) -> float:
    """Sum of retained weights."""
    return float(weights.effective.sum())

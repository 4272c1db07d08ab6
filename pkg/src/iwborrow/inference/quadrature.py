"""Grid integration of low-dimensional weighted posteriors (test oracle)."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.integrate import trapezoid

from .model import WeightedModel

__all__ = ["GridTooNarrow", "quadrature_posterior"]


class GridTooNarrow(ValueError):
    pass


def quadrature_posterior(model: WeightedModel, bounds: Sequence[tuple[float, float]],
                         n_points: int | Sequence[int] = 401, boundary_tol: float = 1e-8) -> dict:
    """Posterior mean, sd and log normalizing constant by the trapezoid rule.

    Parameters
    ----------
    model : WeightedModel
        At most two parameters.
    bounds : sequence of (low, high)
        Grid range per coordinate.
    n_points : int or sequence of int
        Grid points per coordinate.

    Raises
    ------
    GridTooNarrow
        When the density on the grid boundary carries more than
        ``boundary_tol`` of the total mass.
    """
    d = model.dim
    if d > 2:
        raise ValueError("quadrature supports at most two parameters")
    if len(bounds) != d:
        raise ValueError("need one (low, high) pair per parameter")
    sizes = [n_points] * d if np.isscalar(n_points) else list(n_points)
    axes = [np.linspace(lo, hi, int(m)) for (lo, hi), m in zip(bounds, sizes)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    logf = model.logp(pts).reshape(mesh[0].shape)
    shift = logf.max()
    f = np.exp(logf - shift)

    def integrate(values):
        out = values
        for ax in reversed(range(d)):
            out = trapezoid(out, axes[ax], axis=ax)
        return float(out)

    total = integrate(f)
    edge = np.zeros_like(f, dtype=bool)
    for ax in range(d):
        idx = [slice(None)] * d
        idx[ax] = 0
        edge[tuple(idx)] = True
        idx[ax] = -1
        edge[tuple(idx)] = True
    cell = np.prod([a[1] - a[0] for a in axes])
    if f[edge].sum() * cell > boundary_tol * total:
        raise GridTooNarrow("posterior mass on the grid boundary; widen the bounds")
    mean = np.array([integrate(f * m) / total for m in mesh])
    var = np.array([integrate(f * (m - mu) ** 2) / total for m, mu in zip(mesh, mean)])
    return {
        "mean": mean,
        "sd": np.sqrt(var),
        "log_normalizer": float(np.log(total) + shift),
        "grid": axes,
    }

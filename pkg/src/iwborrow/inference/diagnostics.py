"""Convergence diagnostics for multi-chain draws.

All functions take ``chains`` shaped ``(n_chains, n_draws)``.  R-hat and
bulk ESS use rank normalization and split chains; the autocorrelation
estimate follows Geyer's initial monotone sequence on the multi-chain
variogram, as in Stan.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata

__all__ = ["split_chains", "rank_normalize", "split_rhat", "ess", "bulk_ess", "mcse_mean", "mcse_sd"]


def split_chains(chains: np.ndarray) -> np.ndarray:
    chains = np.atleast_2d(np.asarray(chains, dtype=float))
    n = chains.shape[1]
    half = n // 2
    if half < 1:
        return chains
    return np.vstack([chains[:, :half], chains[:, n - half:]])


def rank_normalize(chains: np.ndarray) -> np.ndarray:
    chains = np.asarray(chains, dtype=float)
    r = rankdata(chains.ravel(), method="average").reshape(chains.shape)
    return ndtri((r - 0.375) / (chains.size + 0.25))


def _rhat(chains: np.ndarray) -> float:
    m, n = chains.shape
    if n < 2:
        return np.nan
    means = chains.mean(axis=1)
    w = chains.var(axis=1, ddof=1).mean()
    b = n * means.var(ddof=1) if m > 1 else 0.0
    if w == 0:
        return 1.0 if b == 0 else np.inf
    var_plus = (n - 1) / n * w + b / n
    return float(np.sqrt(var_plus / w))


def split_rhat(chains: np.ndarray) -> float:
    """Rank-normalized split R-hat (bulk)."""
    return _rhat(rank_normalize(split_chains(chains)))


def _autocov(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    size = 1 << int(np.ceil(np.log2(2 * n)))
    xc = x - x.mean(axis=-1, keepdims=True)
    f = np.fft.rfft(xc, size, axis=-1)
    acov = np.fft.irfft(f * np.conj(f), size, axis=-1)[..., :n] / n
    return acov


def ess(chains: np.ndarray) -> float:
    """Multi-chain effective sample size of the (unsplit) input chains."""
    chains = np.atleast_2d(np.asarray(chains, dtype=float))
    m, n = chains.shape
    if n < 4:
        return float(m * n)
    acov = _autocov(chains)
    chain_mean = chains.mean(axis=1)
    chain_var = acov[:, 0] * n / (n - 1)
    w = chain_var.mean()
    var_plus = w * (n - 1) / n
    if m > 1:
        var_plus += chain_mean.var(ddof=1)
    if var_plus == 0:
        return float(m * n)
    rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # Geyer: sum adjacent pairs while positive, enforce monotone decrease
    t = 0
    pair_prev = np.inf
    total = 0.0
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        pair = min(pair, pair_prev)
        total += pair
        pair_prev = pair
        t += 2
    tau = -1.0 + 2.0 * total
    tau = max(tau, 1.0 / np.log10(m * n))
    return float(m * n / tau)


def bulk_ess(chains: np.ndarray) -> float:
    return ess(rank_normalize(split_chains(chains)))


def mcse_mean(chains: np.ndarray) -> float:
    chains = np.atleast_2d(chains)
    return float(np.std(chains, ddof=1) / np.sqrt(ess(split_chains(chains))))


def mcse_sd(chains: np.ndarray) -> float:
    """Monte-Carlo standard error of the posterior sd (delta method on E[(x-mu)^2])."""
    chains = np.atleast_2d(np.asarray(chains, dtype=float))
    dev2 = (chains - chains.mean()) ** 2
    sd = np.sqrt(dev2.mean())
    var_dev2 = dev2.var(ddof=1)
    e = ess(split_chains(dev2))
    return float(np.sqrt(var_dev2 / e) / (2 * sd))

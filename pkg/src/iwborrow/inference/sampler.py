"""Hamiltonian Monte Carlo with warmup adaptation, vectorized over chains.

Each chain has its own Philox substream, step size and diagonal metric.
Trajectory lengths are randomized (a jittered integration time divided by
the step size).  Warmup follows the usual windowed scheme: a fast
step-size-only buffer, doubling slow windows at whose ends the metric is
re-estimated from the window's draws, and a final step-size-only buffer.
Step size is tuned by dual averaging towards ``target_accept``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import rng as rngmod
from . import diagnostics as diag
from .model import WeightedModel

__all__ = ["SamplerConfig", "PosteriorDraws", "ConvergenceWarning", "sample_posterior"]

log = logging.getLogger(__name__)


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    n_chains: int = 4
    warmup: int = 1000
    draws: int = 1000
    seed: int = 0
    target_accept: float = 0.8
    integration_time: float = 1.5
    metric: str = "dense"
    max_leapfrog: int = 64
    init_radius: float = 1.0
    rhat_threshold: float = 1.01
    max_divergence_rate: float = 0.01
    warn: bool = True

    def __post_init__(self):
        if self.n_chains < 1 or self.draws < 1 or self.warmup < 0:
            raise ValueError("need n_chains >= 1, draws >= 1, warmup >= 0")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must be in (0, 1)")
        if self.metric not in ("diag", "dense"):
            raise ValueError("metric must be 'diag' or 'dense'")

    def with_seed(self, seed: int) -> "SamplerConfig":
        d = asdict(self)
        d["seed"] = int(seed)
        return SamplerConfig(**d)


@dataclass(frozen=True, eq=False)
class PosteriorDraws:
    """Post-warmup draws, chain-major: rows ``c * n_draws ... (c+1) * n_draws - 1``."""

    draws: np.ndarray
    chain_ids: np.ndarray
    names: tuple[str, ...]
    n_beta: int
    diagnostics: dict = field(default_factory=dict)
    seed_record: dict = field(default_factory=dict)
    converged: bool = True
    messages: tuple[str, ...] = ()

    @property
    def beta(self) -> np.ndarray:
        return self.draws[:, : self.n_beta]

    @property
    def psi(self) -> np.ndarray:
        return self.draws[:, self.n_beta:]

    @property
    def n_chains(self) -> int:
        return int(self.chain_ids.max()) + 1 if self.chain_ids.size else 0

    def by_chain(self) -> np.ndarray:
        """Draws reshaped to ``(n_chains, n_draws, dim)``."""
        return self.draws.reshape(self.n_chains, -1, self.draws.shape[1])

    def mean(self) -> np.ndarray:
        return self.draws.mean(axis=0)

    def sd(self) -> np.ndarray:
        return self.draws.std(axis=0, ddof=1)

    def summary(self) -> list[dict]:
        out = []
        for j, name in enumerate(self.names):
            x = self.draws[:, j]
            q = np.quantile(x, [0.025, 0.5, 0.975])
            out.append({
                "name": name, "mean": float(x.mean()), "sd": float(x.std(ddof=1)),
                "q2.5": float(q[0]), "median": float(q[1]), "q97.5": float(q[2]),
                "rhat": self.diagnostics.get("split_rhat", [np.nan] * len(self.names))[j],
                "ess_bulk": self.diagnostics.get("bulk_ess", [np.nan] * len(self.names))[j],
            })
        return out


def _window_ends(warmup: int) -> tuple[int, int, list[int]]:
    """(init_buffer, term_buffer, metric update iterations) for a warmup length."""
    if warmup < 20:
        return warmup, 0, []
    init, term, base = 75, 50, 25
    if init + term + base > warmup:
        init = int(0.15 * warmup)
        term = int(0.1 * warmup)
        base = warmup - init - term
    ends = []
    start, size = init, base
    last = warmup - term
    while start < last:
        end = start + size
        if end + 2 * size > last:
            end = last
        ends.append(end)
        start, size = end, 2 * size
    return init, term, ends


class _DualAveraging:
    def __init__(self, eps: np.ndarray, target: float, gamma=0.05, t0=10.0, kappa=0.75):
        self.target, self.gamma, self.t0, self.kappa = target, gamma, t0, kappa
        self.restart(eps)

    def restart(self, eps: np.ndarray):
        self.mu = np.log(10 * eps)
        self.t = 0
        self.h_bar = np.zeros_like(eps)
        self.log_eps_bar = np.zeros_like(eps)

    def update(self, accept: np.ndarray) -> np.ndarray:
        self.t += 1
        t = self.t
        eta = 1.0 / (t + self.t0)
        self.h_bar = (1 - eta) * self.h_bar + eta * (self.target - accept)
        log_eps = self.mu - np.sqrt(t) / self.gamma * self.h_bar
        x = t ** (-self.kappa)
        self.log_eps_bar = x * log_eps + (1 - x) * self.log_eps_bar
        return np.exp(log_eps)

    def final(self) -> np.ndarray:
        return np.exp(self.log_eps_bar)


class _Metric:
    """Per-chain Euclidean metric given by an inverse mass matrix (posterior covariance).

    ``kind="diag"`` keeps variances only; ``"dense"`` keeps the full matrix.
    """

    def __init__(self, kind: str, n_chains: int, dim: int):
        self.kind = kind
        self.set(np.ones((n_chains, dim)) if kind == "diag" else np.tile(np.eye(dim), (n_chains, 1, 1)))

    def set(self, inv: np.ndarray):
        self.inv = inv
        if self.kind == "diag":
            self.scale = np.sqrt(inv)
        else:
            self.chol = np.linalg.cholesky(inv)
            self.chol_inv_t = np.transpose(np.linalg.inv(self.chol), (0, 2, 1))

    def update(self, window: np.ndarray):
        """Regularized covariance of warmup draws ``window`` shaped (n, C, d)."""
        n, C, d = window.shape
        shrink = n / (n + 5.0)
        jitter = 1e-3 * (5.0 / (n + 5.0))
        if self.kind == "diag":
            var = window.var(axis=0, ddof=1) if n > 1 else np.ones((C, d))
            self.set(shrink * var + jitter)
        else:
            if n > 1:
                x = window - window.mean(axis=0)
                cov = np.einsum("nci,ncj->cij", x, x) / (n - 1)
            else:
                cov = np.tile(np.eye(d), (C, 1, 1))
            self.set(shrink * cov + jitter * np.eye(d))

    def momentum(self, z: np.ndarray) -> np.ndarray:
        if self.kind == "diag":
            return z / self.scale
        return np.einsum("cij,cj->ci", self.chol_inv_t, z)

    def velocity(self, p: np.ndarray) -> np.ndarray:
        if self.kind == "diag":
            return self.inv * p
        return np.einsum("cij,cj->ci", self.inv, p)

    def kinetic(self, p: np.ndarray) -> np.ndarray:
        return 0.5 * np.sum(p * self.velocity(p), axis=1)

    def tolist(self):
        return self.inv.tolist()


def _initial_step(model, q, lp, g, metric: _Metric, gens) -> np.ndarray:
    """Per-chain step size giving a one-step acceptance ratio near 1/2."""
    C, d = q.shape
    eps = np.ones(C)
    p = metric.momentum(np.stack([gens[c].standard_normal(d) for c in range(C)]))

    def one_step(eps):
        ph = p + 0.5 * eps[:, None] * g
        q1 = q + eps[:, None] * metric.velocity(ph)
        with np.errstate(invalid="ignore", over="ignore"):
            lp1, g1 = model.unconstrained_logp_grad(q1)
        p1 = ph + 0.5 * eps[:, None] * g1
        h0 = -lp + metric.kinetic(p)
        with np.errstate(invalid="ignore", over="ignore"):
            h1 = -lp1 + metric.kinetic(p1)
        with np.errstate(invalid="ignore", over="ignore"):
            return np.where(np.isfinite(h1), h0 - h1, -np.inf)

    logr = one_step(eps)
    direction = np.where(logr > np.log(0.5), 1.0, -1.0)
    active = np.ones(C, dtype=bool)
    for _ in range(60):
        if not active.any():
            break
        eps = np.where(active, eps * 2.0 ** direction, eps)
        logr = one_step(eps)
        done = np.where(direction > 0, logr <= np.log(0.5), logr > np.log(0.5))
        active &= ~done
    return np.clip(eps, 1e-8, 1e3)


def sample_posterior(model: WeightedModel, config: SamplerConfig | None = None, **overrides) -> PosteriorDraws:
    """Draw from ``model`` by adaptive HMC.

    Identical ``(model, config)`` gives bit-identical draws.  The result is
    flagged ``converged=False`` (and a :class:`ConvergenceWarning` is
    issued when ``config.warn``) if any coordinate has split R-hat above
    ``rhat_threshold`` or the divergence rate exceeds
    ``max_divergence_rate``.
    """
    config = config or SamplerConfig()
    if overrides:
        config = SamplerConfig(**{**asdict(config), **overrides})
    C, d = config.n_chains, model.dim
    gens = [rngmod.stream(config.seed, "mcmc-chain", c) for c in range(C)]
    q = np.stack([g.uniform(-config.init_radius, config.init_radius, d) for g in gens])
    lp, grad = model.unconstrained_logp_grad(q)
    metric = _Metric(config.metric, C, d)
    eps = _initial_step(model, q, lp, grad, metric, gens)
    da = _DualAveraging(eps, config.target_accept)

    init_buf, term_buf, ends = _window_ends(config.warmup)
    window_draws: list[np.ndarray] = []
    total = config.warmup + config.draws
    out = np.empty((config.draws, C, d))
    accept_sum = np.zeros(C)
    n_div = np.zeros(C, dtype=int)
    n_leap = 0

    for it in range(total):
        warm = it < config.warmup
        z = np.stack([g.standard_normal(d) for g in gens])
        u = np.array([g.random(2) for g in gens])
        p = metric.momentum(z)
        h0 = -lp + metric.kinetic(p)
        steps = np.clip(np.ceil(config.integration_time * (0.5 + u[:, 0]) / eps), 1,
                        config.max_leapfrog).astype(int)
        n_steps = int(steps.max())
        k = np.arange(n_steps)[:, None]
        moving = (k < steps) * eps                                   # position step sizes
        kick = np.where(k < steps - 1, 1.0, np.where(k == steps - 1, 0.5, 0.0)) * eps
        qn = q.copy()
        ph = p + 0.5 * eps[:, None] * grad
        with np.errstate(over="ignore", invalid="ignore"):
            for j in range(n_steps):
                qn = qn + moving[j][:, None] * metric.velocity(ph)
                gn = model.grad_only(qn)
                ph = ph + kick[j][:, None] * gn
            n_leap += n_steps
            lpn = model.logp_only(qn)
            h1 = -lpn + metric.kinetic(ph)
            divergent = ~np.isfinite(h1) | (h1 - h0 > 1000.0)
            accept = np.where(divergent, 0.0, np.minimum(1.0, np.exp(h0 - h1)))
        move = u[:, 1] < accept
        q = np.where(move[:, None], qn, q)
        lp = np.where(move, lpn, lp)
        grad = np.where(move[:, None], gn, grad)

        if warm:
            eps = da.update(accept)
            if init_buf <= it < config.warmup - term_buf:
                window_draws.append(q.copy())
            if ends and it + 1 == ends[0]:
                ends.pop(0)
                metric.update(np.asarray(window_draws))
                window_draws = []
                eps = _initial_step(model, q, lp, grad, metric, gens)
                da.restart(eps)
            if it + 1 == config.warmup:
                eps = da.final()
        else:
            out[it - config.warmup] = q
            accept_sum += accept
            n_div += divergent

    chains = np.transpose(out, (1, 0, 2))  # (C, S, d)
    rhat = [diag.split_rhat(chains[:, :, j]) if C * config.draws >= 4 else np.nan for j in range(d)]
    bess = [diag.bulk_ess(chains[:, :, j]) if C * config.draws >= 4 else np.nan for j in range(d)]
    div_rate = float(n_div.sum()) / (C * config.draws)
    diagnostics = {
        "split_rhat": [float(x) for x in rhat],
        "max_rhat": float(np.nanmax(rhat)) if np.any(np.isfinite(rhat)) else float("nan"),
        "bulk_ess": [float(x) for x in bess],
        "acceptance_rate": float(accept_sum.sum() / (C * config.draws)),
        "divergences": int(n_div.sum()),
        "divergence_rate": div_rate,
        "step_size": [float(x) for x in eps],
        "metric": config.metric,
        "inv_metric": metric.tolist(),
        "leapfrog_evaluations": int(n_leap),
    }
    messages = []
    if C > 1 and config.draws > 3:
        worst = max(rhat)
        if not worst <= config.rhat_threshold:
            messages.append(f"split R-hat {worst:.4f} exceeds {config.rhat_threshold}")
    if div_rate > config.max_divergence_rate:
        messages.append(f"divergence rate {div_rate:.3f} exceeds {config.max_divergence_rate}")
    converged = not messages
    if messages and config.warn:
        warnings.warn("; ".join(messages), ConvergenceWarning, stacklevel=2)
    diagnostics["converged"] = converged
    return PosteriorDraws(
        draws=chains.reshape(C * config.draws, d),
        chain_ids=np.repeat(np.arange(C), config.draws),
        names=model.names,
        n_beta=model.p,
        diagnostics=diagnostics,
        seed_record={**asdict(config), "stream": "mcmc-chain"},
        converged=converged,
        messages=tuple(messages),
    )

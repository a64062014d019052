"""Check loss, empirical Wasserstein-1, and policy-value summaries."""
from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import stats

from .envs import ReturnDistribution
from .errors import InputError
from .neural import QuantileNet


def pinball(u, tau):
    """Check loss ``u * (tau - 1{u <= 0})``."""
    u = np.asarray(u, dtype=float)
    return u * (tau - (u <= 0))


def pinball_grad(u, tau):
    """Derivative of :func:`pinball` in ``u``; the kink takes ``tau - 1``."""
    u = np.asarray(u, dtype=float)
    return tau - (u <= 0).astype(float)


def open_uniform(rng: np.random.Generator, size) -> np.ndarray:
    """Uniform draws on the open interval (0, 1)."""
    u = rng.random(size)
    return np.clip(u, 1e-12, 1.0 - 1e-12)


def midpoint_levels(k: int) -> np.ndarray:
    if k < 1:
        raise InputError("need at least one level")
    return (2.0 * np.arange(1, k + 1) - 1.0) / (2.0 * k)


def _as_sorted(x) -> np.ndarray:
    if isinstance(x, ReturnDistribution):
        return x.samples
    arr = np.sort(np.asarray(x, dtype=float).reshape(-1))
    return arr


def w1_empirical(a, b) -> float:
    """W_1 between two empirical laws via their quantile step functions."""
    a = _as_sorted(a)
    b = _as_sorted(b)
    if a.size == 0 or b.size == 0:
        raise InputError("w1_empirical needs non-empty samples")
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    ca = np.arange(a.size + 1) / a.size
    cb = np.arange(b.size + 1) / b.size
    grid = np.union1d(ca, cb)
    widths = np.diff(grid)
    mids = grid[:-1] + widths / 2
    qa = a[np.minimum((mids * a.size).astype(int), a.size - 1)]
    qb = b[np.minimum((mids * b.size).astype(int), b.size - 1)]
    return float(widths @ np.abs(qa - qb))


def value_from_quantiles(net: QuantileNet, initial_draws: Sequence, levels) -> float:
    """Average of ``f(s_k, a_k, tau_k)`` over paired initial draws and levels."""
    levels = np.asarray(levels, dtype=float).reshape(-1)
    if levels.size == 0 or len(initial_draws) != levels.size:
        raise InputError("levels and initial draws must be non-empty and the same length")
    states = np.array([np.asarray(s, dtype=float) for s, _ in initial_draws])
    actions = np.array([a for _, a in initial_draws], dtype=int)
    return float(np.mean(net.forward(states, actions, levels)))


def mse_over_replicates(estimates, truth: float) -> float:
    est = np.asarray(estimates, dtype=float)
    if est.size == 0:
        raise InputError("no estimates")
    return float(np.mean((est - truth) ** 2))


def sample_from_net(net: QuantileNet, state, action: int, n: int,
                    rng: np.random.Generator) -> ReturnDistribution:
    """Inverse-CDF sampling: push ``U ~ Unif(0, 1)`` through ``f(s, a, .)``."""
    if n < 1:
        raise InputError("n must be >= 1")
    u = open_uniform(rng, n)
    states = np.repeat(np.asarray(state, dtype=float)[None, :], n, axis=0)
    return ReturnDistribution.from_samples(net.forward(states, np.full(n, action), u))


def ks_statistic(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic."""
    return float(stats.ks_2samp(_as_sorted(a), _as_sorted(b)).statistic)

"""Seeded Monte Carlo of tilted Heston dynamics, used as an oracle for the solver."""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np
from scipy.stats import norm

from ..errors import InputError

BATCH = 100_000


class MonteCarloEstimate(NamedTuple):
    price: float
    standard_error: float
    n_paths: int


def heston_monte_carlo(mu: float, kappa: float, theta: float, xi: float, rho: float,
                       v0: float, *, s0: float, maturity: float, payoff: Callable,
                       n_paths: int = 1_000_000, n_steps: int = 200,
                       seed: int = 0) -> MonteCarloEstimate:
    """Log-Euler in ``s`` with full truncation in ``v`` under the pricing tilt.

    Under the tilt ``s`` is driftless and ``v`` drifts at
    ``kappa (theta - v) - mu rho xi``.  Batches draw from child streams of
    one seed and are reduced in order.
    """
    if n_paths < 2 or n_steps < 1:
        raise InputError("need at least 2 paths and 1 step")
    dt = maturity / n_steps
    sq = np.sqrt(dt)
    rho_c = np.sqrt(1.0 - rho * rho)
    shift = kappa * theta - mu * rho * xi
    total = total_sq = 0.0
    streams = np.random.SeedSequence(seed).spawn((n_paths + BATCH - 1) // BATCH)
    done = 0
    for ss in streams:
        m = min(BATCH, n_paths - done)
        rng = np.random.default_rng(ss)
        x = np.full(m, np.log(s0))
        v = np.full(m, float(v0))
        for _ in range(n_steps):
            z1 = rng.standard_normal(m)
            z2 = rng.standard_normal(m)
            vp = np.maximum(v, 0.0)
            root = np.sqrt(vp) * sq
            x += -0.5 * vp * dt + root * z1
            v += (shift - kappa * vp) * dt + xi * root * (rho * z1 + rho_c * z2)
        pay = np.asarray(payoff(np.exp(x)), dtype=float)
        total += float(pay.sum())
        total_sq += float((pay * pay).sum())
        done += m
    mean = total / n_paths
    var = max(total_sq / n_paths - mean * mean, 0.0) * n_paths / (n_paths - 1)
    return MonteCarloEstimate(mean, float(np.sqrt(var / n_paths)), n_paths)


def black_call(s, strike: float, vol: float, tau: float):
    """Driftless Black call on a price ratio; vectorised in ``s``."""
    s = np.asarray(s, dtype=float)
    if tau <= 0.0:
        out = np.maximum(s - strike, 0.0)
    else:
        srt = vol * np.sqrt(tau)
        pos = s > 0.0
        with np.errstate(divide="ignore"):
            d1 = (np.log(np.where(pos, s, 1.0) / strike) + 0.5 * srt * srt) / srt
        out = np.where(pos, s * norm.cdf(d1) - strike * norm.cdf(d1 - srt), 0.0)
    return float(out) if out.ndim == 0 else out

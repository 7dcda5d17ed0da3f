"""Stochastic-volatility models in price-ratio coordinates.

Coefficients are evaluated on arrays of states ``(s, sigma)`` at time
``t``.  ``mu_s`` and ``mu_sigma`` are economic drifts; the pricing measure
shifts them through the calibrated tilt ``alpha``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from ..errors import ConfigurationError, ConvergenceError, InputError, PreconditionError
from ..scenario import _read_json


class Jump(NamedTuple):
    """One catalogue entry: state-dependent jump in ``s`` and ``sigma`` with its rate."""

    j_s: Callable
    j_sigma: Callable
    rate: Callable


def _const(x: float):
    return lambda t, s, v: np.full(np.broadcast(s, v).shape, float(x))


def solve_calibration_root(mu_s, nu_s, jump_sizes=(), jump_rates=(), *, tol: float = 1e-13,
                           max_iter: int = 100, max_halvings: int = 30) -> np.ndarray:
    """Roots of ``g(a) = mu_s - a nu_s + sum j exp(-a j) rate``, elementwise.

    ``g`` is strictly decreasing wherever ``nu_s > 0`` or a jump is active,
    so damped Newton from ``a = 0`` converges.  ``jump_sizes`` and
    ``jump_rates`` are sequences of arrays broadcastable to ``mu_s``.
    """
    mu = np.asarray(mu_s, dtype=float)
    nu = np.broadcast_to(np.asarray(nu_s, dtype=float), mu.shape)
    js = [np.broadcast_to(np.asarray(j, dtype=float), mu.shape) for j in jump_sizes]
    rs = [np.broadcast_to(np.asarray(r, dtype=float), mu.shape) for r in jump_rates]
    active = nu > 0.0
    for j, r in zip(js, rs):
        active = active | ((j != 0.0) & (r > 0.0))
    if np.any(~active & (mu != 0.0)):
        raise PreconditionError("calibration needs nu_s > 0 or an active jump in s")
    if not js:
        out = np.zeros(mu.shape)
        np.divide(mu, nu, out=out, where=active)
        return out

    def g_and_slope(a):
        g = mu - a * nu
        slope = nu.copy()
        for j, r in zip(js, rs):
            e = np.exp(np.clip(-a * j, -700.0, 700.0)) * r
            g = g + j * e
            slope = slope + j * j * e
        return g, slope

    a = np.zeros(mu.shape)
    g, slope = g_and_slope(a)
    scale = np.maximum(np.abs(mu), 1.0)
    for it in range(max_iter):
        todo = active & (np.abs(g) > tol * scale)
        if not todo.any():
            return a
        step = np.where(todo, g / np.where(slope > 0.0, slope, 1.0), 0.0)
        lam = np.ones(mu.shape)
        for _ in range(max_halvings):
            trial = a + lam * step
            tg, ts = g_and_slope(trial)
            worse = todo & ~(np.abs(tg) < np.abs(g))
            if not worse.any():
                break
            lam = np.where(worse, 0.5 * lam, lam)
        a, g, slope = np.where(todo, trial, a), np.where(todo, tg, g), np.where(todo, ts, slope)
    bad = float(np.max(np.abs(g[active]))) if active.any() else 0.0
    raise ConvergenceError(f"calibration root unsolved after {max_iter} iterations; "
                           f"max |g| = {bad:.3e}", iterations=max_iter, residual=bad)


@dataclass(frozen=True)
class StochVolModel:
    """Coefficient evaluators of a one-factor stochastic-volatility model.

    ``sigma`` is absent (``has_sigma=False``) for one-dimensional models.
    """

    kind: str
    params: dict
    mu_s: Callable
    nu_s: Callable
    mu_sigma: Callable = _const(0.0)
    nu_sigma: Callable = _const(0.0)
    nu_ssigma: Callable = _const(0.0)
    jumps: Sequence[Jump] = ()
    has_sigma: bool = True
    time_homogeneous: bool = True
    initial_sigma: float | None = None
    tilted_sigma_drift_fn: Callable | None = field(default=None, repr=False)
    tilted_rates_fn: Callable | None = field(default=None, repr=False)
    alpha_fn: Callable | None = field(default=None, repr=False)

    def alpha(self, t, s, v) -> np.ndarray:
        """Calibrated tilt at each state."""
        if self.alpha_fn is not None:
            return self.alpha_fn(t, s, v)
        s, v = np.broadcast_arrays(np.asarray(s, float), np.asarray(v, float))
        return solve_calibration_root(
            self.mu_s(t, s, v), self.nu_s(t, s, v),
            [jp.j_s(t, s, v) for jp in self.jumps], [jp.rate(t, s, v) for jp in self.jumps])

    def tilted_sigma_drift(self, t, s, v) -> np.ndarray:
        if self.tilted_sigma_drift_fn is not None:
            return self.tilted_sigma_drift_fn(t, s, v)
        return self.mu_sigma(t, s, v) - self.alpha(t, s, v) * self.nu_ssigma(t, s, v)

    def tilted_rates(self, t, s, v) -> list:
        """Jump rates under the pricing measure, ``exp(-alpha j_s) rate``."""
        if not self.jumps:
            return []
        if self.tilted_rates_fn is not None:
            return self.tilted_rates_fn(t, s, v)
        a = self.alpha(t, s, v)
        return [np.exp(-a * jp.j_s(t, s, v)) * jp.rate(t, s, v) for jp in self.jumps]

    def check_covariance(self, t, s, v, tol: float = -1e-10) -> None:
        """Raise unless ``[[nu_s, nu_ssigma], [nu_ssigma, nu_sigma]]`` is PSD at every state."""
        a, c, b = self.nu_s(t, s, v), self.nu_ssigma(t, s, v), self.nu_sigma(t, s, v)
        scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-300)
        det = a * b - c * c
        if np.any(a < tol * scale) or np.any(b < tol * scale) or \
                np.any(det < tol * scale * scale):
            raise InputError(f"{self.kind}: instantaneous covariance is not PSD on the grid")

    def to_json(self) -> dict:
        return {"kind": self.kind, **self.params}


def bsm(mu: float, sigma: float, jumps: Sequence = ()) -> StochVolModel:
    """Lognormal ratio with relative jumps ``s -> s (1 + j)``.

    The calibrated tilt is ``alpha = a / s`` with the constant ``a`` solving
    ``mu - a sigma^2 + sum j exp(-a j) rate = 0``.
    """
    if not sigma > 0.0:
        raise InputError("bsm: sigma must be positive")
    sizes = [float(j["j"]) if isinstance(j, dict) else float(j[0]) for j in jumps]
    rates = [float(j["rate"]) if isinstance(j, dict) else float(j[1]) for j in jumps]
    if any(j <= -1.0 for j in sizes) or any(r < 0.0 for r in rates):
        raise InputError("bsm: relative jumps must exceed -1 with nonnegative rates")
    a = float(solve_calibration_root(np.array(mu), np.array(sigma ** 2), sizes, rates))
    catalogue = tuple(Jump((lambda j: lambda t, s, v: s * j)(j), _const(0.0), _const(r))
                      for j, r in zip(sizes, rates))

    def tilted(t, s, v):
        shape = np.broadcast(s, v).shape
        return [np.full(shape, np.exp(-a * j) * r) for j, r in zip(sizes, rates)]

    def alpha(t, s, v):
        with np.errstate(divide="ignore"):
            return np.where(s > 0.0, a / np.where(s > 0.0, s, 1.0), 0.0)

    return StochVolModel(
        "bsm", {"mu": mu, "sigma": sigma,
                "jumps": [{"j": j, "rate": r} for j, r in zip(sizes, rates)]},
        mu_s=lambda t, s, v: mu * s, nu_s=lambda t, s, v: sigma ** 2 * s * s,
        jumps=catalogue, has_sigma=False, tilted_rates_fn=tilted, alpha_fn=alpha)


def heston(mu: float, kappa: float, theta: float, xi: float, rho: float,
           v0: float) -> StochVolModel:
    """Square-root variance ``v``; the second state coordinate is the variance.

    With ``mu_s = mu s`` the tilt is ``mu / (v s)`` and the tilted variance
    drift ``kappa (theta - v) - mu rho xi`` is regular at ``v = 0``.
    """
    if not (kappa > 0.0 and theta > 0.0 and xi > 0.0):
        raise InputError("heston: kappa, theta and xi must be positive")
    if abs(rho) > 1.0:
        raise InputError("heston: |rho| must not exceed 1")
    if v0 < 0.0:
        raise InputError("heston: v0 must be nonnegative")

    def alpha(t, s, v):
        d = v * s
        return np.where(d > 0.0, mu / np.where(d > 0.0, d, 1.0), 0.0)

    return StochVolModel(
        "heston", {"mu": mu, "kappa": kappa, "theta": theta, "xi": xi, "rho": rho, "v0": v0},
        mu_s=lambda t, s, v: mu * s + 0.0 * v,
        nu_s=lambda t, s, v: np.maximum(v, 0.0) * s * s,
        mu_sigma=lambda t, s, v: kappa * (theta - v) + 0.0 * s,
        nu_sigma=lambda t, s, v: xi * xi * np.maximum(v, 0.0) + 0.0 * s,
        nu_ssigma=lambda t, s, v: rho * xi * np.maximum(v, 0.0) * s,
        initial_sigma=v0,
        tilted_sigma_drift_fn=lambda t, s, v: kappa * (theta - v) - mu * rho * xi + 0.0 * s,
        alpha_fn=alpha)


def sabr(sigma0: float, alpha: float, beta: float, rho: float) -> StochVolModel:
    """Driftless CEV ratio with lognormal volatility."""
    if not alpha > 0.0:
        raise InputError("sabr: alpha must be positive")
    if not 0.0 <= beta <= 1.0:
        raise InputError("sabr: beta must lie in [0, 1]")
    if abs(rho) > 1.0:
        raise InputError("sabr: |rho| must not exceed 1")
    if not sigma0 > 0.0:
        raise InputError("sabr: sigma0 must be positive")

    def cev(s):
        return np.power(np.maximum(s, 0.0), beta)

    zero = _const(0.0)
    return StochVolModel(
        "sabr", {"sigma0": sigma0, "alpha": alpha, "beta": beta, "rho": rho},
        mu_s=zero, nu_s=lambda t, s, v: v * v * cev(s) ** 2,
        nu_sigma=lambda t, s, v: alpha * alpha * v * v + 0.0 * s,
        nu_ssigma=lambda t, s, v: rho * alpha * v * v * cev(s),
        initial_sigma=sigma0, alpha_fn=lambda t, s, v: np.zeros(np.broadcast(s, v).shape))


MODEL_PARAMS = {
    "bsm": ({"mu", "sigma"}, {"jumps"}),
    "heston": ({"mu", "kappa", "theta", "xi", "rho", "v0"}, set()),
    "sabr": ({"sigma0", "alpha", "beta", "rho"}, set()),
}


def model_from_json(source) -> StochVolModel:
    data = _read_json(source)
    kind = data.get("kind")
    if kind == "custom":
        raise ConfigurationError("custom models are built in Python with StochVolModel")
    if kind not in MODEL_PARAMS:
        raise InputError(f"model: unknown kind {kind!r}")
    required, optional = MODEL_PARAMS[kind]
    params = {k: v for k, v in data.items() if k != "kind"}
    missing = required - set(params)
    extra = set(params) - required - optional
    if missing:
        raise InputError(f"model {kind}: missing {sorted(missing)}")
    if extra:
        raise InputError(f"model {kind}: unknown fields {sorted(extra)}")
    builder = {"bsm": bsm, "heston": heston, "sabr": sabr}[kind]
    return builder(**params)


def calibration_alpha(model: StochVolModel, state, t: float = 0.0):
    """Calibrated tilt of ``model`` at ``state = (s, sigma)``."""
    s, v = state if len(state) == 2 else (state[0], 0.0)
    out = model.alpha(t, np.asarray(s, dtype=float), np.asarray(v, dtype=float))
    return float(out) if np.ndim(out) == 0 else out

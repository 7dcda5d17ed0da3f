"""Lévy-Khintchine exponents, exponential tilts and continuous-time moment rates.

Jump measures are finite catalogues: a list of jump vectors with
frequencies, so every integral below is an exact finite sum.

A :class:`ConvexityModel` is a joint triple over ``(df/f, ds, dc)`` where
``f`` is the funding ratio, ``s`` the underlying price ratios and ``c`` the
derivative price ratio.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from ._linalg import as_symmetric, check_psd, spd_solve
from .errors import ConvergenceError, InputError, MagnitudeError
from .scenario import _read_json

MAX_EXPONENT = 700.0


def _exp_checked(x):
    x = np.asarray(x, dtype=float)
    if x.size and np.max(x) > MAX_EXPONENT:
        raise MagnitudeError(f"exponent {np.max(x):.1f} overflows; rescale k or the jumps")
    return np.exp(x)


@dataclass(frozen=True)
class LevyTriple:
    """Drift, covariance and finite jump catalogue, all per unit time."""

    mu: np.ndarray
    nu: np.ndarray
    jump_sizes: np.ndarray | None = None   # (n_jumps, dim)
    jump_rates: np.ndarray | None = None   # (n_jumps,)

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        d = mu.size
        nu = as_symmetric(np.atleast_2d(np.asarray(self.nu, dtype=float)), "nu")
        if nu.shape != (d, d):
            raise InputError(f"nu: expected shape ({d}, {d}), got {nu.shape}")
        check_psd(nu, "nu")
        if self.jump_sizes is None:
            j, rates = np.zeros((0, d)), np.zeros(0)
        else:
            j = np.asarray(self.jump_sizes, dtype=float).reshape(-1, d)
            rates = np.atleast_1d(np.asarray(self.jump_rates, dtype=float))
            if rates.shape != (j.shape[0],):
                raise InputError("jump_rates: one rate per jump vector required")
        if not (np.all(np.isfinite(rates)) and np.all(rates >= 0.0)):
            raise InputError("jump rates must be finite and nonnegative")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(j))):
            raise InputError("triple: non-finite value")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "jump_sizes", j)
        object.__setattr__(self, "jump_rates", rates)

    @property
    def dim(self) -> int:
        return self.mu.size

    @property
    def max_jump(self) -> float:
        """``J``: largest jump magnitude in the catalogue."""
        return float(np.max(np.linalg.norm(self.jump_sizes, axis=1))) if len(self.jump_rates) else 0.0

    @property
    def total_rate(self) -> float:
        """``Phi``: total jump frequency."""
        return float(self.jump_rates.sum())

    @property
    def small_jump_parameter(self) -> float:
        return self.max_jump ** 2 * self.total_rate

    def increment_moments(self) -> tuple:
        """Mean and covariance rate of increments ``(mu + sum j phi, nu + sum j j^T phi)``."""
        j, r = self.jump_sizes, self.jump_rates
        return self.mu + r @ j, self.nu + (j * r[:, None]).T @ j

    @classmethod
    def from_json(cls, data) -> "LevyTriple":
        data = _read_json(data)
        if "mu" not in data or "nu" not in data:
            raise InputError("triple: mu and nu are required")
        jumps = data.get("jumps", [])
        try:
            sizes = [np.atleast_1d(np.asarray(x["j"], dtype=float)) for x in jumps]
            rates = [float(x["rate"]) for x in jumps]
        except (KeyError, TypeError) as exc:
            raise InputError(f"jumps: each entry needs 'j' and 'rate' ({exc!r})") from exc
        return cls(data["mu"], data["nu"], sizes or None, rates or None)

    def to_json(self) -> dict:
        return {"mu": self.mu.tolist(), "nu": self.nu.tolist(),
                "jumps": [{"j": j.tolist(), "rate": float(r)}
                          for j, r in zip(self.jump_sizes, self.jump_rates)]}


def characteristic_exponent(triple: LevyTriple, k) -> float:
    """``k.mu + k.nu.k / 2 + sum (exp(k.j) - 1) phi``."""
    k = np.atleast_1d(np.asarray(k, dtype=float))
    if k.shape != (triple.dim,):
        raise InputError(f"k: expected length {triple.dim}")
    jumps = float(triple.jump_rates @ (_exp_checked(triple.jump_sizes @ k) - 1.0))
    return float(k @ triple.mu + 0.5 * k @ triple.nu @ k) + jumps


class SmoothFunction(NamedTuple):
    """Evaluators of a function of the state and its derivatives."""

    value: Callable
    grad: Callable
    hess: Callable
    time_derivative: Callable | None = None


def ito_exponent(triple: LevyTriple, func: SmoothFunction, state, k: float, t: float = 0.0
                 ) -> float:
    """Exponent of ``f(t, s)`` for scalar conjugate ``k`` at the given state."""
    s = np.atleast_1d(np.asarray(state, dtype=float))
    g = np.atleast_1d(np.asarray(func.grad(s), dtype=float))
    h = np.atleast_2d(np.asarray(func.hess(s), dtype=float))
    f_t = 0.0 if func.time_derivative is None else float(func.time_derivative(t, s))
    drift = f_t + g @ triple.mu + 0.5 * np.trace(h @ triple.nu)
    base = float(func.value(s))
    df = np.array([float(func.value(s + j)) - base for j in triple.jump_sizes])
    jumps = float(triple.jump_rates @ (_exp_checked(k * df) - 1.0)) if df.size else 0.0
    return float(k * drift + 0.5 * k * k * (g @ triple.nu @ g)) + jumps


# -- funding/market convexity ------------------------------------------------

@dataclass(frozen=True)
class ConvexityModel:
    """Funding ratio ``f`` and a joint triple over ``(df/f, ds, dc)``."""

    f: float
    triple: LevyTriple

    def __post_init__(self):
        if not (self.f > 0.0 and np.isfinite(self.f)):
            raise InputError("f: funding ratio must be positive and finite")
        if self.triple.dim < 3:
            raise InputError("joint triple needs at least (f, s, c) coordinates")

    @property
    def n_s(self) -> int:
        return self.triple.dim - 2

    def _s(self):
        return slice(1, 1 + self.n_s)

    mu_f = property(lambda self: float(self.triple.mu[0]))
    mu_s = property(lambda self: self.triple.mu[self._s()])
    mu_c = property(lambda self: float(self.triple.mu[-1]))
    nu_f = property(lambda self: float(self.triple.nu[0, 0]))
    nu_s = property(lambda self: self.triple.nu[self._s(), self._s()])
    nu_c = property(lambda self: float(self.triple.nu[-1, -1]))
    nu_fs = property(lambda self: self.triple.nu[0, self._s()])
    nu_fc = property(lambda self: float(self.triple.nu[0, -1]))
    nu_sc = property(lambda self: self.triple.nu[self._s(), -1])
    j_f = property(lambda self: self.triple.jump_sizes[:, 0])
    j_s = property(lambda self: self.triple.jump_sizes[:, self._s()])
    j_c = property(lambda self: self.triple.jump_sizes[:, -1])
    rates = property(lambda self: self.triple.jump_rates)

    @classmethod
    def from_blocks(cls, f: float, *, mu_s, nu_s, mu_f=0.0, mu_c=0.0, nu_f=0.0, nu_c=0.0,
                    nu_fs=None, nu_fc=0.0, nu_sc=None, jumps=()) -> "ConvexityModel":
        """Assemble from named blocks; ``jumps`` holds ``(j_f, j_s, j_c, rate)``."""
        mu_s = np.atleast_1d(np.asarray(mu_s, dtype=float))
        n = mu_s.size
        nu_s = np.atleast_2d(np.asarray(nu_s, dtype=float))
        nu_fs = np.zeros(n) if nu_fs is None else np.atleast_1d(np.asarray(nu_fs, float))
        nu_sc = np.zeros(n) if nu_sc is None else np.atleast_1d(np.asarray(nu_sc, float))
        mu = np.concatenate([[mu_f], mu_s, [mu_c]])
        nu = np.zeros((n + 2, n + 2))
        nu[0, 0], nu[-1, -1], nu[0, -1] = nu_f, nu_c, nu_fc
        nu[1:-1, 1:-1] = nu_s
        nu[0, 1:-1], nu[1:-1, -1] = nu_fs, nu_sc
        nu = np.triu(nu) + np.triu(nu, 1).T
        sizes = [np.concatenate([[jf], np.atleast_1d(js), [jc]]) for jf, js, jc, _ in jumps]
        rates = [r for *_, r in jumps]
        return cls(float(f), LevyTriple(mu, nu, sizes or None, rates or None))

    @classmethod
    def from_json(cls, data) -> "ConvexityModel":
        data = _read_json(data)
        if "f" not in data:
            raise InputError("convexity model: f is required")
        if "mu" in data:
            return cls(float(data["f"]), LevyTriple.from_json(data))
        blocks = {k: data[k] for k in ("mu_s", "nu_s", "mu_f", "mu_c", "nu_f", "nu_c",
                                       "nu_fs", "nu_fc", "nu_sc") if k in data}
        if "mu_s" not in blocks or "nu_s" not in blocks:
            raise InputError("convexity model: mu_s and nu_s are required")
        jumps = [(x.get("j_f", 0.0), x["j_s"], x.get("j_c", 0.0), x["rate"])
                 for x in data.get("jumps", [])]
        return cls.from_blocks(float(data["f"]), jumps=jumps, **blocks)

    def to_json(self) -> dict:
        out = self.triple.to_json()
        out["f"] = self.f
        return out


class TiltedParameters(NamedTuple):
    mu_s: np.ndarray
    mu_c: float
    rates: np.ndarray


def tilt_parameters(model: ConvexityModel, alpha) -> TiltedParameters:
    """Drifts and jump rates under the exponential tilt with weights ``alpha``."""
    a = np.atleast_1d(np.asarray(alpha, dtype=float))
    f = model.f
    mu_s = model.mu_s - f * model.nu_s @ a
    mu_c = model.mu_c - f * float(a @ model.nu_sc)
    rates = _exp_checked(-f * (1.0 + model.j_f) * (model.j_s @ a)) * model.rates
    return TiltedParameters(mu_s, mu_c, rates)


class MomentRates(NamedTuple):
    M_s: np.ndarray
    M_c: float
    V_s: np.ndarray
    V_c: float
    C_sc: np.ndarray


def moment_rates(model: ConvexityModel, alpha) -> MomentRates:
    """Mean, variance and covariance rates of funded increments under the tilt."""
    tp = tilt_parameters(model, alpha)
    g = (1.0 + model.j_f) * tp.rates          # first-moment jump weights
    g2 = (1.0 + model.j_f) ** 2 * tp.rates    # second-moment jump weights
    js, jc = model.j_s, model.j_c
    m_s = tp.mu_s + model.nu_fs + g @ js
    m_c = tp.mu_c + model.nu_fc + float(g @ jc)
    v_s = model.nu_s + (js * g2[:, None]).T @ js
    v_c = model.nu_c + float(g2 @ (jc * jc))
    c_sc = model.nu_sc + (js * (g2 * jc)[:, None]).sum(axis=0)
    return MomentRates(m_s, m_c, v_s, v_c, c_sc)


def optimal_hedge_rate(model: ConvexityModel, alpha) -> tuple:
    """Hedge weights ``V_s^-1 C_sc`` and residual variance rate ``f^2 (V_c - beta.C_sc)``."""
    r = moment_rates(model, alpha)
    beta = spd_solve(r.V_s, r.C_sc, name="V_s rate")
    v = model.f ** 2 * (r.V_c - float(beta @ r.C_sc))
    return beta, v


def delta_gamma(model: ConvexityModel, alpha) -> tuple:
    """Diffusive delta ``nu_s^-1 nu_sc`` and its first-order jump correction."""
    delta = spd_solve(model.nu_s, model.nu_sc, name="nu_s")
    tp = tilt_parameters(model, alpha)
    g2 = (1.0 + model.j_f) ** 2 * tp.rates
    misfit = model.j_c - model.j_s @ delta
    scaled = spd_solve(model.nu_s, model.j_s.T, name="nu_s").T if len(g2) else model.j_s
    gamma = (scaled * (g2 * misfit)[:, None]).sum(axis=0)
    return delta, gamma


class DriftSolution(NamedTuple):
    alpha: np.ndarray
    M_s: np.ndarray
    M_c: float
    iterations: int


def drift_conditions(model: ConvexityModel, alpha) -> tuple:
    """Residuals ``(M_s[alpha], M_c[alpha])`` of the continuous fair-pricing system."""
    r = moment_rates(model, alpha)
    return r.M_s, r.M_c


def solve_drift_conditions(model: ConvexityModel, *, tol: float = 1e-12, max_iter: int = 50,
                           max_halvings: int = 20) -> DriftSolution:
    """Damped Newton for ``M_s[alpha] = 0``; returns the pricing residual ``M_c``.

    The Jacobian is ``-f V_s[alpha]``, so each step solves ``f V_s d = M_s``.
    """
    alpha = np.zeros(model.n_s)
    r = moment_rates(model, alpha)
    norm = float(np.linalg.norm(r.M_s))
    it = 0
    while norm > tol * max(1.0, float(np.abs(model.mu_s).max())):
        if it >= max_iter:
            raise ConvergenceError(f"drift condition unsolved after {max_iter} iterations; "
                                   f"|M_s| = {norm:.3e}", iterations=it, residual=norm)
        step = spd_solve(model.f * r.V_s, r.M_s, name="V_s rate")
        scale = 1.0
        for _ in range(max_halvings + 1):
            trial = alpha + scale * step
            try:
                tr = moment_rates(model, trial)
                tnorm = float(np.linalg.norm(tr.M_s))
            except MagnitudeError:
                tnorm = np.inf
            if tnorm < norm:
                break
            scale *= 0.5
        else:
            raise ConvergenceError(f"no descent at iteration {it}; |M_s| = {norm:.3e}",
                                   iterations=it, residual=norm)
        alpha, r, norm = trial, tr, tnorm
        it += 1
    return DriftSolution(alpha, r.M_s, r.M_c, it)


# -- Monte Carlo validators -----------------------------------------------------

BATCH = 100_000


def _batches(n: int, seed: int):
    children = np.random.SeedSequence(seed).spawn((n + BATCH - 1) // BATCH)
    for i, ss in enumerate(children):
        yield np.random.default_rng(ss), min(BATCH, n - i * BATCH)


def simulate_increments(triple: LevyTriple, dt: float, n: int, *, seed: int = 0
                        ) -> np.ndarray:
    """Euler plus compound-Poisson increments over one step ``dt``.

    Batches use child streams of one root seed and are concatenated in
    order, so output does not depend on how batches are scheduled.
    """
    w, v = np.linalg.eigh(triple.nu)
    root = v * np.sqrt(np.clip(w, 0.0, None))
    out = []
    for rng, m in _batches(n, seed):
        diff = rng.standard_normal((m, triple.dim)) @ root.T
        x = triple.mu * dt + np.sqrt(dt) * diff
        if len(triple.jump_rates):
            counts = rng.poisson(triple.jump_rates * dt, size=(m, len(triple.jump_rates)))
            x += counts @ triple.jump_sizes
        out.append(x)
    return np.concatenate(out)


def monte_carlo_moment_rates(model: ConvexityModel, alpha, dt: float, n: int, *,
                             seed: int = 0) -> tuple:
    """Self-normalised tilted estimates of ``(M_s, M_c)`` rates with standard errors.

    Economic increments are reweighted by ``exp(-alpha . f (1 + df/f) ds)``.
    """
    a = np.atleast_1d(np.asarray(alpha, dtype=float))
    x = simulate_increments(model.triple, dt, n, seed=seed)
    xf, xs, xc = x[:, 0], x[:, 1:-1], x[:, -1]
    growth = 1.0 + xf
    logw = -model.f * growth * (xs @ a)
    w = np.exp(logw - logw.max())
    w /= w.sum()
    samples = np.column_stack([growth[:, None] * xs, growth * xc]) / dt
    mean = w @ samples
    se = np.sqrt((w[:, None] ** 2 * (samples - mean) ** 2).sum(axis=0))
    return mean, se

"""Tilt kernels, mark-to-market calibration and one-period fair pricing.

The price measure is obtained from the economic measure by a density
``W``.  The exponential kernel ``W ∝ exp(-alpha . R_p)`` is calibrated by
Newton iteration so that underlying returns have zero mean under the tilted
measure; it is the minimum relative entropy measure satisfying that
constraint.  The linear kernel ``1 - alpha . (R_p - M_p)`` is kept for
comparison and can go negative.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple, Sequence

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import linprog
from scipy.special import logsumexp

from ._linalg import spd_solve
from .errors import (ConfigurationError, ConvergenceError, InputError, MagnitudeError,
                     PreconditionError, RankError)
from .scenario import MarketSlice, ScenarioMeasure, kl_divergence, normalized_return

log = logging.getLogger(__name__)

MAX_EXPONENT = 700.0


class KernelKind(str, Enum):
    LINEAR = "linear"
    EXPONENTIAL = "exponential"


@dataclass(frozen=True)
class TiltKernel:
    """Density of the tilted measure relative to the economic measure."""

    alpha: np.ndarray
    values: np.ndarray
    kind: KernelKind
    log_values: np.ndarray | None = None
    iterations: int = 0
    residual_norm: float = float("nan")
    history: tuple = field(default=(), compare=False)

    @property
    def negative(self) -> bool:
        return bool(np.any(self.values < 0.0))

    def tilted_weights(self, measure: ScenarioMeasure | np.ndarray) -> np.ndarray:
        w = measure.weights if isinstance(measure, ScenarioMeasure) else np.asarray(measure)
        return w * self.values


def _returns(measure: ScenarioMeasure, market) -> np.ndarray:
    if isinstance(market, MarketSlice):
        return normalized_return(market, measure).underlying
    r = np.asarray(market, dtype=float)
    return r[:, None] if r.ndim == 1 else r


def linear_kernel(measure: ScenarioMeasure, market, alpha) -> TiltKernel:
    """``W = 1 - alpha . (R_p - E[R_p])``; normalised by construction."""
    r = _returns(measure, market)
    a = np.atleast_1d(np.asarray(alpha, dtype=float))
    w = 1.0 - (r - measure.expect(r)) @ a
    residual = float(np.linalg.norm(measure.weights @ (w[:, None] * r)))
    return TiltKernel(a, w, KernelKind.LINEAR, residual_norm=residual)


def linear_calibration(measure: ScenarioMeasure, market) -> TiltKernel:
    """Linear kernel with ``alpha = V_p^-1 M_p``, which zeroes the tilted mean exactly."""
    r = _returns(measure, market)
    m = measure.expect(r)
    d = r - m
    v = (d * measure.weights[:, None]).T @ d
    return linear_kernel(measure, r, spd_solve(v, m))


def _exp_kernel(weights: np.ndarray, r: np.ndarray, alpha: np.ndarray):
    x = -(r @ alpha)
    big = float(np.max(np.abs(x))) if x.size else 0.0
    if big > MAX_EXPONENT:
        raise MagnitudeError(
            f"|alpha . R_p| reaches {big:.1f} > {MAX_EXPONENT:.0f}; rescale the returns")
    pos = weights > 0.0
    log_z = logsumexp(x[pos], b=weights[pos])
    log_w = x - log_z
    return np.exp(log_w), log_w


def exponential_kernel(measure: ScenarioMeasure, market, alpha) -> TiltKernel:
    """``W = exp(-alpha . R_p) / E[exp(-alpha . R_p)]``, strictly positive."""
    r = _returns(measure, market)
    a = np.atleast_1d(np.asarray(alpha, dtype=float))
    w, log_w = _exp_kernel(measure.weights, r, a)
    residual = float(np.linalg.norm(measure.weights @ (w[:, None] * r)))
    return TiltKernel(a, w, KernelKind.EXPONENTIAL, log_w, residual_norm=residual)


def _tilted_moments(weights, r, alpha):
    w, log_w = _exp_kernel(weights, r, alpha)
    t = weights * w
    m = t @ r
    d = r - m
    v = (d * t[:, None]).T @ d
    # log E[exp(-alpha . R)], the convex dual of the entropy problem
    live = weights > 0.0
    dual = -float(np.average(r[live] @ alpha + log_w[live], weights=weights[live]))
    return w, log_w, m, v, dual


MAX_LOG_STEP = 10.0


def _arbitrage_hint(weights, r) -> str:
    witness = find_static_arbitrage(weights, r)
    return "" if witness is None else f"; static arbitrage portfolio {witness.tolist()}"


def calibrate_returns(weights, returns, *, max_iter: int = 50, tol: float = 1e-10,
                      max_halvings: int = 20) -> TiltKernel:
    """Newton iteration ``alpha <- alpha + V[alpha]^-1 M[alpha]`` from ``alpha = 0``.

    Steps are first shortened so no log-kernel value moves by more than
    ``MAX_LOG_STEP``, then halved, at most ``max_halvings`` times, until they
    lower the dual objective ``log E[exp(-alpha . R)]``.  The Newton direction
    always descends on the dual; near the root, where the dual is flat to
    rounding, a falling ``|M[alpha]|`` is accepted instead.  Works on raw
    per-scenario returns.
    """
    weights = np.asarray(weights, dtype=float)
    r = np.asarray(returns, dtype=float)
    if r.ndim == 1:
        r = r[:, None]
    alpha = np.zeros(r.shape[1])
    live = weights > 0.0
    w, log_w, m, v, dual = _tilted_moments(weights, r, alpha)
    norm = float(np.linalg.norm(m))
    history = [norm]
    it = 0
    while norm > tol:
        if it >= max_iter:
            raise ConvergenceError(
                f"calibration did not converge in {max_iter} iterations; "
                f"|E[R_p]| = {norm:.3e}{_arbitrage_hint(weights, r)}",
                iterations=it, residual=norm)
        try:
            step = spd_solve(v, m, name="V_p[alpha]")
        except RankError as exc:
            raise RankError(f"iteration {it}: {exc}{_arbitrage_hint(weights, r)}") from exc
        # trust region: the log-kernel may move by at most MAX_LOG_STEP per iteration
        spread = float(np.max(np.abs(r[live] @ step)))
        scale = min(1.0, MAX_LOG_STEP / spread) if spread > 0.0 else 1.0
        slack = 1e-14 * max(1.0, abs(dual))
        for _ in range(max_halvings + 1):
            trial = alpha + scale * step
            try:
                tw, tlog, tm, tv, tdual = _tilted_moments(weights, r, trial)
                tnorm = float(np.linalg.norm(tm))
            except MagnitudeError:
                tnorm = tdual = np.inf
            # the dual may only stall at rounding level, where |M| must still fall
            if tdual < dual or (tdual <= dual + slack and tnorm < norm):
                break
            scale *= 0.5
        else:
            raise ConvergenceError(
                f"no descent after {max_halvings} step halvings at iteration {it}; "
                f"|E[R_p]| = {norm:.3e}{_arbitrage_hint(weights, r)}",
                iterations=it, residual=norm)
        alpha, w, log_w, m, v, norm, dual = trial, tw, tlog, tm, tv, tnorm, tdual
        it += 1
        history.append(norm)
        log.debug("newton iteration %d: |M| = %.3e (step scale %.3g)", it, norm, scale)
    return TiltKernel(alpha, w, KernelKind.EXPONENTIAL, log_w, it, norm, tuple(history))


def calibrate(measure: ScenarioMeasure, market, *, max_iter: int = 50,
              tol: float = 1e-10) -> TiltKernel:
    """Calibrate the exponential kernel so tilted underlying returns have zero mean."""
    return calibrate_returns(measure.weights, _returns(measure, market),
                             max_iter=max_iter, tol=tol)


def find_static_arbitrage(weights, returns, tol: float = 1e-12) -> np.ndarray | None:
    """Portfolio with nonnegative return in every scenario and positive mean, if any."""
    w = np.asarray(weights, dtype=float)
    r = np.asarray(returns, dtype=float)
    live = r[w > 0.0]
    n = r.shape[1]
    res = linprog(-(w[w > 0.0] @ live), A_ub=-live, b_ub=np.zeros(len(live)),
                  bounds=[(-1.0, 1.0)] * n, method="highs")
    if res.status == 0 and -res.fun > tol:
        return res.x
    return None


def fair_price_one_period(measure: ScenarioMeasure, market: MarketSlice, terminal,
                          kernel: TiltKernel, *, tol: float = 1e-8) -> float:
    """Start price ``a0`` giving zero tilted mean to the derivative return.

    ``a0/b0 = E[W (b1/u1) (a1/b1)] / E[W (b1/u1)]``.
    """
    if isinstance(terminal, str):
        terminal = measure.observable(terminal)
    a1 = np.asarray(terminal, dtype=float)
    if a1.shape != (measure.n,):
        raise InputError(f"terminal: expected {measure.n} values, got shape {a1.shape}")
    r = _returns(measure, market)
    tilted = kernel.tilted_weights(measure)
    drift = float(np.linalg.norm(tilted @ r))
    if drift > tol:
        raise PreconditionError(
            f"kernel is not calibrated to this slice: |E_tilted[R_p]| = {drift:.3e}")
    rho = market.b1 / market.u1
    return market.b0 * float(tilted @ (rho * a1 / market.b1)) / float(tilted @ rho)


class Certificate(NamedTuple):
    passed: bool
    kl: float
    worst_gap: float
    worst_direction: np.ndarray | None
    stationarity_constant: float
    stationarity_error: float
    constraint_error: float
    trials: int


def max_entropy_certificate(measure: ScenarioMeasure, market, kernel: TiltKernel,
                            trials: int = 1000, *, seed: int = 0,
                            steps: Sequence[float] = (1e-2, 1e-3),
                            slack: float = 1e-12, stationarity_tol: float = 1e-9,
                            tol: float = 1e-8) -> Certificate:
    """Check that no feasible perturbation of ``W`` lowers its relative entropy.

    Random directions are projected onto ``{E[dW] = 0, E[dW R_p] = 0}`` and
    scaled so that ``W + h dW`` stays positive.  Also verifies that
    ``log W + alpha . R_p`` is constant across scenarios.
    """
    r = _returns(measure, market)
    w = measure.weights
    vals = kernel.values
    if np.any(vals <= 0.0):
        raise PreconditionError("certificate requires a strictly positive kernel")
    drift = float(np.linalg.norm((w * vals) @ r))
    if drift > tol:
        raise PreconditionError(f"kernel is not calibrated: |E_tilted[R_p]| = {drift:.3e}")
    log_w = kernel.log_values if kernel.log_values is not None else np.log(vals)
    base = w * vals * log_w
    kl = float(base.sum())

    constraints = np.vstack([w, (w[:, None] * r).T])
    basis = null_space(constraints)
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((trials, basis.shape[1]))
    d = g @ basis.T
    size = np.max(np.abs(d) / vals, axis=1) if basis.shape[1] else np.zeros(trials)
    usable = size > 0.0
    d = d[usable] / size[usable, None]
    constraint_error = float(np.max(np.abs(d @ constraints.T))) if len(d) else 0.0

    worst_gap = np.inf if len(d) else 0.0
    worst_dir = None
    for h in steps if len(d) else ():
        pert = vals + h * d
        gap = np.sum(w * pert * np.log(pert) - base, axis=1)
        i = int(np.argmin(gap))
        if gap[i] < worst_gap:
            worst_gap, worst_dir = float(gap[i]), d[i]

    resid = log_w + r @ kernel.alpha
    positive = w > 0.0
    const = float(np.average(resid[positive], weights=w[positive]))
    stat_err = float(np.max(np.abs(resid[positive] - const)))
    passed = worst_gap >= -slack and stat_err <= stationarity_tol
    return Certificate(passed, kl, worst_gap, None if worst_gap >= -slack else worst_dir,
                       -const, stat_err, constraint_error, int(usable.sum()))


def kernel_kl(measure: ScenarioMeasure, kernel: TiltKernel) -> float:
    """Relative entropy of the tilted measure from the economic measure."""
    return kl_divergence(kernel.tilted_weights(measure), measure.weights)


# -- funding arrangements -------------------------------------------------

class FundingKind(str, Enum):
    FUTURES = "futures"
    CLEARED = "cleared"
    COLLATERALISED = "collateralised"
    UNCOLLATERALISED = "uncollateralised"


@dataclass(frozen=True)
class FundingArrangement:
    """Contractual funding terms of a derivative.

    ``rate`` is the per-period margin interest of a cleared trade;
    ``collateral`` optionally maps node ids (or times) to collateral prices.
    """

    kind: FundingKind
    rate: float | None = None
    collateral: dict | None = None

    def __post_init__(self):
        kind = FundingKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is FundingKind.CLEARED:
            if self.rate is None:
                raise ConfigurationError("cleared arrangement needs a margin rate")
            if not np.isfinite(self.rate):
                raise ConfigurationError("rate must be finite")
        if self.collateral is not None:
            if any(not (v > 0.0) for v in self.collateral.values()):
                raise ConfigurationError("collateral prices must be strictly positive")

    @classmethod
    def from_json(cls, data: dict) -> "FundingArrangement":
        if "kind" not in data:
            raise InputError("arrangement: kind is required")
        try:
            return cls(data["kind"], data.get("rate"), data.get("collateral"))
        except ValueError as exc:
            raise InputError(f"arrangement: {exc}") from exc

    def to_json(self) -> dict:
        out = {"kind": self.kind.value}
        if self.rate is not None:
            out["rate"] = self.rate
        if self.collateral is not None:
            out["collateral"] = dict(self.collateral)
        return out


def implied_funding(arrangement: FundingArrangement, *, b0=None, b1=None, u0=None, u1=None,
                    dt: float | None = None) -> tuple:
    """Funding prices ``(b0, b1)`` that the arrangement settles against."""
    kind = arrangement.kind
    if kind is FundingKind.FUTURES:
        return 1.0, 1.0
    if kind is FundingKind.CLEARED:
        if dt is None:
            raise ConfigurationError("cleared arrangement needs the time step dt")
        return 1.0, 1.0 + arrangement.rate * dt
    if kind is FundingKind.COLLATERALISED:
        if b0 is None or b1 is None:
            raise ConfigurationError("collateralised arrangement needs collateral prices b0, b1")
        return b0, b1
    if u0 is None or u1 is None:
        raise ConfigurationError("uncollateralised arrangement needs unsecured prices u0, u1")
    return u0, u1


def funded_increment(a0, a1, b0, b1):
    """Net self-funded settlement ``da - (a/b) db``."""
    return (a1 - a0) - (a0 / b0) * (b1 - b0)


def settlement_increment(arrangement: FundingArrangement, a0, a1, *, b0=None, b1=None,
                         u0=None, u1=None, dt: float | None = None):
    """Net settlement over one period under the arrangement's own convention."""
    da = a1 - a0
    kind = arrangement.kind
    if kind is FundingKind.FUTURES:
        return da
    if kind is FundingKind.CLEARED:
        if dt is None:
            raise ConfigurationError("cleared arrangement needs the time step dt")
        return da - a0 * arrangement.rate * dt
    if kind is FundingKind.COLLATERALISED:
        if b0 is None or b1 is None:
            raise ConfigurationError("collateralised arrangement needs collateral prices b0, b1")
        return da - (a0 / b0) * (b1 - b0)
    if u0 is None or u1 is None:
        raise ConfigurationError("uncollateralised arrangement needs unsecured prices u0, u1")
    return da - (a0 / u0) * (u1 - u0)

"""Finite-difference solution of the fair-price equation in ratio coordinates.

The price ratio ``c(t, s, sigma)`` satisfies ``c_t + L c = 0`` where

    L c = c_sigma (mu_sigma - alpha nu_ssigma) + c_ss nu_s / 2
          + c_sigmasigma nu_sigma / 2 + c_ssigma nu_ssigma
          + sum (c(s + j_s, sigma + j_sigma) - c - c_s j_s) exp(-alpha j_s) phi

There is no discount term: funding is carried by the coordinates.  Time
stepping is theta-weighted in the diffusion with the jump sum explicit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from ..errors import InputError, SolverError
from .grid import Grid, central_weights, interpolate, linear_extrapolation_ratio, locate
from .models import StochVolModel

log = logging.getLogger(__name__)


@dataclass
class PideProblem:
    """Terminal-value problem for one derivative on a grid.

    ``payoff`` is an array of grid shape or a callable ``payoff(s, sigma)``
    on mesh arrays.  ``query`` is the state ``(s, sigma)`` whose price is
    reported; ``sigma`` defaults to the model's initial volatility.
    """

    model: StochVolModel
    grid: Grid
    maturity: float
    payoff: np.ndarray | Callable
    n_steps: int = 400
    theta: float = 0.5
    rannacher_half_steps: int = 2
    query: tuple | None = None
    max_growth: float = 10.0

    def __post_init__(self):
        if not self.maturity > 0.0:
            raise InputError("maturity must be positive")
        if self.n_steps < 1:
            raise InputError("n_steps must be at least 1")
        if not 0.5 <= self.theta <= 1.0:
            raise InputError("theta must lie in [0.5, 1]")
        if self.rannacher_half_steps % 2 or self.rannacher_half_steps < 0:
            raise InputError("rannacher_half_steps must be a nonnegative even number")
        if self.model.has_sigma == self.grid.is_1d:
            raise InputError(f"{self.model.kind} model needs a "
                             f"{'2-D' if self.model.has_sigma else '1-D'} grid")

    def terminal_values(self) -> np.ndarray:
        if callable(self.payoff):
            s, v = self.grid.mesh()
            values = np.asarray(self.payoff(s, v), dtype=float)
        else:
            values = np.asarray(self.payoff, dtype=float)
            if values.ndim == 1:
                values = values[:, None]
        if values.shape != self.grid.shape:
            raise InputError(f"payoff: expected grid shape {self.grid.shape}, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise InputError("payoff: non-finite value on grid")
        return values


@dataclass
class PideSolution:
    grid: Grid
    surface: np.ndarray
    price: float | None
    diagnostics: dict = field(default_factory=dict)

    def at(self, s, sigma=None) -> np.ndarray:
        return interpolate(self.grid, self.surface, s, sigma)


class _Triplets:
    def __init__(self):
        self.rows, self.cols, self.vals = [], [], []

    def add(self, rows, cols, vals):
        rows, cols, vals = np.broadcast_arrays(rows, cols, vals)
        self.rows.append(rows.ravel())
        self.cols.append(cols.ravel())
        self.vals.append(vals.ravel())

    def matrix(self, n):
        if not self.rows:
            return sp.csr_matrix((n, n))
        return sp.csr_matrix((np.concatenate(self.vals),
                              (np.concatenate(self.rows), np.concatenate(self.cols))),
                             shape=(n, n))


def _coefficients(model: StochVolModel, grid: Grid, t: float, alpha=None):
    s, v = grid.mesh()
    nu_s = np.broadcast_to(model.nu_s(t, s, v), s.shape)
    if model.has_sigma:
        nu_v = np.broadcast_to(model.nu_sigma(t, s, v), s.shape)
        nu_sv = np.broadcast_to(model.nu_ssigma(t, s, v), s.shape)
        if alpha is None:
            drift = model.tilted_sigma_drift(t, s, v)
        else:
            drift = model.mu_sigma(t, s, v) - alpha * nu_sv
        drift = np.broadcast_to(drift, s.shape)
    else:
        nu_v = nu_sv = drift = np.zeros(s.shape)
    if alpha is None:
        rates = model.tilted_rates(t, s, v)
    else:
        rates = [np.exp(-alpha * jp.j_s(t, s, v)) * jp.rate(t, s, v) for jp in model.jumps]
    return s, v, nu_s, nu_v, nu_sv, drift, rates


def _cross_terms(L: _Triplets, grid: Grid, ii, jj, a) -> None:
    """Seven-point ``a c_{s sigma}`` along the diagonal matching the sign of ``a``.

    Averages the two one-sided mixed differences whose corners carry
    positive weight, so only axial neighbours take negative weight.
    """
    hs_m = (grid.s[1:-1] - grid.s[:-2])[:, None]
    hs_p = (grid.s[2:] - grid.s[1:-1])[:, None]
    hv_m = (grid.sigma[1:-1] - grid.sigma[:-2])[None, :]
    hv_p = (grid.sigma[2:] - grid.sigma[1:-1])[None, :]
    pos = a >= 0.0
    # (di, dj) offsets of the two cells used, with their mesh areas
    for di, dj, area in ((1, 1, hs_p * hv_p), (-1, -1, hs_m * hv_m),
                         (1, -1, hs_p * hv_m), (-1, 1, hs_m * hv_p)):
        use = pos if di == dj else ~pos
        w = np.where(use, 0.5 * a / area, 0.0) * di * dj
        L.add(grid.index(ii, jj), grid.index(ii + di, jj + dj), w)
        L.add(grid.index(ii, jj), grid.index(ii + di, jj), -w)
        L.add(grid.index(ii, jj), grid.index(ii, jj + dj), -w)
        L.add(grid.index(ii, jj), grid.index(ii, jj), w)


def absorbing_floor(model: StochVolModel, grid: Grid, t: float = 0.0) -> bool:
    """True when the lower ``s`` edge needs no boundary condition.

    That holds when ``s`` neither diffuses nor jumps there, as for price
    ratios absorbed at zero; the edge then evolves by its own equation.
    """
    s, v = grid.s[:1, None], grid.sigma[None, :]
    shape = (1, grid.sigma.size)
    quiet = [model.nu_s(t, s, v)]
    if model.has_sigma:
        quiet.append(model.nu_ssigma(t, s, v))
    quiet += [jp.j_s(t, s, v) for jp in model.jumps]
    return all(np.all(np.broadcast_to(q, shape) == 0.0) for q in quiet)


def assemble_operator(model: StochVolModel, grid: Grid, t: float = 0.0, alpha=None) -> tuple:
    """Sparse diffusion-drift operator, explicit jump operator and out-of-grid count.

    Rows of the far-field ``s`` nodes are left empty; the solver replaces
    them with linearity conditions.  The exception is a degenerate lower
    edge (see :func:`absorbing_floor`), which keeps its own equation.
    """
    ns, nv = grid.shape
    n = grid.size
    s, v, nu_s, nu_v, nu_sv, drift, rates = _coefficients(model, grid, t, alpha)
    d1s, d2s = central_weights(grid.s)
    ii = np.arange(1, ns - 1)[:, None]
    jj = np.arange(nv)[None, :]
    rows = grid.index(ii, jj)
    lo = 0 if absorbing_floor(model, grid, t) else 1
    L = _Triplets()

    for o in range(3):
        L.add(rows, grid.index(ii + o - 1, jj), 0.5 * nu_s[1:-1] * d2s[:, o][:, None])

    if nv > 1:
        d1v, d2v = central_weights(grid.sigma)
        jin = np.arange(1, nv - 1)[None, :]
        iv = np.arange(lo, ns - 1)[:, None]
        rin = grid.index(iv, jin)
        diff = 0.5 * nu_v[lo:-1, 1:-1]
        b = drift[lo:-1, 1:-1]
        central = [diff * d2v[:, o] + b * d1v[:, o] for o in range(3)]
        # hybrid: central drift where it keeps off-diagonals nonnegative, else upwind
        ok = (central[0] >= 0.0) & (central[2] >= 0.0)
        hm = (grid.sigma[1:-1] - grid.sigma[:-2])[None, :]
        hp = (grid.sigma[2:] - grid.sigma[1:-1])[None, :]
        up_lo = diff * d2v[:, 0] + np.where(b < 0.0, -b / hm, 0.0)
        up_hi = diff * d2v[:, 2] + np.where(b > 0.0, b / hp, 0.0)
        up_mid = diff * d2v[:, 1] - np.abs(b) * np.where(b > 0.0, 1.0 / hp, 1.0 / hm)
        L.add(rin, grid.index(iv, jin - 1), np.where(ok, central[0], up_lo))
        L.add(rin, rin, np.where(ok, central[1], up_mid))
        L.add(rin, grid.index(iv, jin + 1), np.where(ok, central[2], up_hi))
        _cross_terms(L, grid, ii, jin, nu_sv[1:-1, 1:-1])
        # zero-flux walls: mirrored second difference, upwinded inward drift only
        for j, k, h in ((0, 1, grid.sigma[1] - grid.sigma[0]),
                        (nv - 1, nv - 2, grid.sigma[-1] - grid.sigma[-2])):
            r = grid.index(iv, j)
            dv = nu_v[lo:-1, j][:, None]
            inward = drift[lo:-1, j][:, None] * (1.0 if k > j else -1.0)
            coef = dv / h ** 2 + np.maximum(inward, 0.0) / h
            L.add(r, r, -coef)
            L.add(r, grid.index(iv, k), coef)

    J = _Triplets()
    out_of_grid = 0
    jrows = grid.index(np.arange(lo, ns - 1)[:, None], jj)
    for jp, lam in zip(model.jumps, rates):
        js = np.broadcast_to(jp.j_s(t, s, v), s.shape)[lo:-1]
        jv = np.broadcast_to(jp.j_sigma(t, s, v), s.shape)[lo:-1]
        lam = np.broadcast_to(lam, s.shape)[lo:-1]
        ts = s[lo:-1] + js
        tv = v[lo:-1] + jv
        out_of_grid += int(np.sum((ts < grid.s[0]) | (ts > grid.s[-1])
                                  | (tv < grid.sigma[0]) | (tv > grid.sigma[-1])))
        i0, ws = locate(grid.s, ts)
        if nv > 1:
            j0, wv = locate(grid.sigma, np.clip(tv, grid.sigma[0], grid.sigma[-1]))
            wv = np.clip(wv, 0.0, 1.0)
            for di, wi in ((0, 1.0 - ws), (1, ws)):
                for dj, wj in ((0, 1.0 - wv), (1, wv)):
                    J.add(jrows, grid.index(i0 + di, j0 + dj), lam * wi * wj)
        else:
            J.add(jrows, grid.index(i0, 0), lam * (1.0 - ws))
            J.add(jrows, grid.index(i0 + 1, 0), lam * ws)
        J.add(jrows, jrows, -lam)
        # compensator; a degenerate floor row has j_s = 0 and needs none
        k = 1 - lo
        for o in range(3):
            J.add(rows, grid.index(ii + o - 1, jj), -lam[k:] * js[k:] * d1s[:, o][:, None])
    return L.matrix(n), (J.matrix(n) if model.jumps else None), out_of_grid


def pide_drift_operator(model: StochVolModel, grid: Grid, surface, t: float = 0.0,
                        alpha=None) -> np.ndarray:
    """``L c`` on the grid, i.e. ``-dc/dt`` implied by the fair-price equation.

    Far-field ``s`` rows are reported as zero (linearity there), except a
    degenerate lower edge.
    """
    c = np.asarray(surface, dtype=float).reshape(grid.shape)
    L, J, _ = assemble_operator(model, grid, t, alpha)
    out = L @ c.ravel()
    if J is not None:
        out = out + J @ c.ravel()
    return out.reshape(grid.shape)


def _boundary_rows(grid: Grid, floor: bool) -> sp.csr_matrix:
    ns, nv = grid.shape
    lo, hi = linear_extrapolation_ratio(grid.s)
    j = np.arange(nv)
    t = _Triplets()
    edges = ((0, 1, 2, lo), (ns - 1, ns - 2, ns - 3, hi))
    for i, a, b, r in edges[floor:]:
        row = grid.index(i, j)
        t.add(row, row, 1.0)
        t.add(row, grid.index(a, j), -(1.0 + r))
        t.add(row, grid.index(b, j), r)
    return t.matrix(grid.size)


def _edge_treatment(grid: Grid, floor: bool) -> tuple:
    interior = np.ones(grid.shape)
    interior[-1, :] = 0.0
    if not floor:
        interior[0, :] = 0.0
    return interior.ravel(), _boundary_rows(grid, floor)


def solve_pide(problem: PideProblem) -> PideSolution:
    """Step the terminal payoff back to ``t = 0``.

    The first step is split into implicit half steps (Rannacher start-up)
    to damp payoff kinks; the remaining steps use ``theta``.
    """
    grid, model = problem.grid, problem.model
    n = grid.size
    c = problem.terminal_values().ravel().copy()
    bound = float(np.max(np.abs(c)))
    if bound == 0.0:
        return PideSolution(grid, np.zeros(grid.shape), 0.0 if problem.query else None,
                            {"steps": 0, "out_of_grid": 0, "factorizations": 0})
    s_mesh, v_mesh = grid.mesh()
    model.check_covariance(0.0, s_mesh, v_mesh)

    eye = sp.identity(n, format="csr")
    dt = problem.maturity / problem.n_steps

    schedule = [(0.5 * dt, 1.0)] * problem.rannacher_half_steps
    full = problem.n_steps - problem.rannacher_half_steps // 2
    if full < 0:
        raise InputError("too few steps for the requested Rannacher start-up")
    schedule += [(dt, problem.theta)] * full

    cache = {}
    factorizations = 0
    out_count = 0
    op = None
    tau = 0.0
    for k, (h, th) in enumerate(schedule):
        t_new = problem.maturity - (tau + h)
        if op is None or not model.time_homogeneous:
            op = assemble_operator(model, grid, t_new)
            out_count = max(out_count, op[2])
            interior, B = _edge_treatment(grid, absorbing_floor(model, grid, t_new))
            R = sp.diags(interior)
            cache.clear()
        L, J, _ = op
        key = round(th * h, 15)
        if key not in cache:
            A = (R @ (eye - th * h * L) + B).tocsc()
            cache[key] = splu(A)
            factorizations += 1
        rhs = c + (1.0 - th) * h * (L @ c)
        if J is not None:
            rhs = rhs + h * (J @ c)
        c = cache[key].solve(interior * rhs)
        tau += h
        peak = float(np.max(np.abs(c)))
        if not np.isfinite(peak) or peak > problem.max_growth * bound:
            raise SolverError(f"instability at step {k + 1}: max |c| = {peak:.3e} exceeds "
                              f"{problem.max_growth:g} x payoff bound {bound:.3e}")
    if out_count:
        log.info("%d jump targets fell outside the grid (extrapolated)", out_count)
    surface = c.reshape(grid.shape)
    price = None
    if problem.query is not None:
        qs = problem.query[0]
        qv = problem.query[1] if len(problem.query) > 1 else model.initial_sigma
        price = float(interpolate(grid, surface, qs, qv)[0])
    return PideSolution(grid, surface, price,
                        {"steps": len(schedule), "out_of_grid": out_count,
                         "factorizations": factorizations})

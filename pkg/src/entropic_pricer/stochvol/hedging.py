"""Option-completed hedges and residual variance rates on solved surfaces."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from ..errors import CompletenessError, InputError
from .grid import Grid, first_derivative, interpolate
from .models import StochVolModel


class Sensitivities(NamedTuple):
    value: float
    d_s: float
    d_sigma: float


def sensitivities(grid: Grid, surface, s: float, sigma: float) -> Sensitivities:
    """Value and first derivatives of a surface at a state."""
    if grid.is_1d:
        raise InputError("sensitivities need a 2-D grid")
    c = np.asarray(surface, dtype=float)
    cs = first_derivative(c, grid.s, 0)
    cv = first_derivative(c, grid.sigma, 1)
    return Sensitivities(*(float(interpolate(grid, x, s, sigma)[0]) for x in (c, cs, cv)))


class CompleteHedge(NamedTuple):
    beta_s: float
    beta_o: float


def complete_hedge_weights(grid: Grid, option_surface, derivative_surface, state, *,
                           tol: float = 1e-12) -> CompleteHedge:
    """Weights in the underlying and one option that cancel both continuous risks.

    ``beta_o = c_sigma / o_sigma`` and ``beta_s = c_s - beta_o o_s``.
    """
    s, v = state
    o = sensitivities(grid, option_surface, s, v)
    c = sensitivities(grid, derivative_surface, s, v)
    scale = max(abs(c.d_sigma), abs(c.d_s), 1.0)
    if abs(o.d_sigma) <= tol * scale:
        raise CompletenessError(
            f"option has no volatility sensitivity at state (s={s!r}, sigma={v!r})")
    beta_o = c.d_sigma / o.d_sigma
    return CompleteHedge(c.d_s - beta_o * o.d_s, beta_o)


class ResidualRate(NamedTuple):
    total: float
    s_term: float
    cross_term: float
    sigma_term: float
    jump_term: float

    @property
    def continuous(self) -> float:
        return self.s_term + self.cross_term + self.sigma_term


def residual_variance_rate(model: StochVolModel, grid: Grid, beta_s: float, beta_o: float,
                           derivative_surface, option_surface, state, t: float = 0.0
                           ) -> ResidualRate:
    """Variance rate of the hedged position; jumps use the economic rates."""
    s, v = state
    c = sensitivities(grid, derivative_surface, s, v)
    o = sensitivities(grid, option_surface, s, v) if option_surface is not None \
        else Sensitivities(0.0, 0.0, 0.0)
    sa, va = np.array([s]), np.array([v])
    nu_s = float(np.broadcast_to(model.nu_s(t, sa, va), (1,))[0])
    nu_v = float(np.broadcast_to(model.nu_sigma(t, sa, va), (1,))[0])
    nu_sv = float(np.broadcast_to(model.nu_ssigma(t, sa, va), (1,))[0])
    es = c.d_s - beta_s - beta_o * o.d_s
    ev = c.d_sigma - beta_o * o.d_sigma
    jump = 0.0
    for jp in model.jumps:
        js = float(np.broadcast_to(jp.j_s(t, sa, va), (1,))[0])
        jv = float(np.broadcast_to(jp.j_sigma(t, sa, va), (1,))[0])
        rate = float(np.broadcast_to(jp.rate(t, sa, va), (1,))[0])
        jc = float(interpolate(grid, derivative_surface, s + js, v + jv)[0]) - c.value
        jo = 0.0
        if option_surface is not None:
            jo = float(interpolate(grid, option_surface, s + js, v + jv)[0]) - o.value
        jump += (jc - beta_s * js - beta_o * jo) ** 2 * rate
    terms = (es * es * nu_s, 2.0 * es * ev * nu_sv, ev * ev * nu_v, jump)
    return ResidualRate(sum(terms), *terms)

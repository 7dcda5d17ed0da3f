"""Stochastic-volatility fair-price equations and their finite-difference solution."""

from .grid import Grid, interpolate, stretched_axis, uniform_axis
from .hedging import (CompleteHedge, ResidualRate, complete_hedge_weights,
                      residual_variance_rate, sensitivities)
from .models import (Jump, StochVolModel, bsm, calibration_alpha, heston, model_from_json,
                     sabr, solve_calibration_root)
from .montecarlo import black_call, heston_monte_carlo
from .pide import (PideProblem, PideSolution, assemble_operator, pide_drift_operator,
                   solve_pide)


__all__ = [
    "Grid", "interpolate", "stretched_axis", "uniform_axis", "CompleteHedge", "ResidualRate",
    "complete_hedge_weights", "residual_variance_rate", "sensitivities", "Jump",
    "StochVolModel", "bsm", "heston", "model_from_json", "sabr", "solve_calibration_root",
    "black_call", "heston_monte_carlo", "PideProblem", "PideSolution", "assemble_operator",
    "pide_drift_operator", "solve_pide", "calibration_alpha",
]

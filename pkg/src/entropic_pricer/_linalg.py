"""Guarded symmetric solves used by the moment-based routines."""

from __future__ import annotations

import numpy as np
from scipy import linalg

from .errors import InputError, RankError

MAX_CONDITION = 1e12
PSD_TOL = -1e-10


def as_symmetric(matrix, name: str = "matrix", tol: float = 1e-12) -> np.ndarray:
    m = np.atleast_2d(np.asarray(matrix, dtype=float))
    if m.shape[0] != m.shape[1]:
        raise InputError(f"{name} must be square, got shape {m.shape}")
    scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
    if m.size and np.max(np.abs(m - m.T)) > tol * scale:
        raise InputError(f"{name} is not symmetric")
    return 0.5 * (m + m.T)


def check_psd(matrix: np.ndarray, name: str = "matrix", tol: float = PSD_TOL) -> None:
    if matrix.size == 0:
        return
    lo = float(np.linalg.eigvalsh(matrix).min())
    if lo < tol:
        raise InputError(f"{name} is not positive semidefinite (min eigenvalue {lo:.3e})")


def spd_solve(matrix, rhs, *, name: str = "V_p", pseudo: bool = False,
              max_condition: float = MAX_CONDITION) -> np.ndarray:
    """Solve ``matrix @ x = rhs`` for a symmetric positive-definite ``matrix``.

    With ``pseudo=True`` a singular matrix is accepted and the minimum-norm
    least-squares solution is returned instead.
    """
    a = np.atleast_2d(np.asarray(matrix, dtype=float))
    b = np.asarray(rhs, dtype=float)
    if pseudo:
        return np.linalg.pinv(a, hermitian=True) @ b
    eig = np.linalg.eigvalsh(a)
    hi = float(eig.max()) if eig.size else 0.0
    lo = float(eig.min()) if eig.size else 0.0
    if hi <= 0.0 or lo <= 0.0 or hi / lo > max_condition:
        cond = np.inf if lo <= 0.0 else hi / lo
        raise RankError(
            f"{name} is singular or ill-conditioned (condition number {cond:.3e}); "
            "run check_no_arbitrage or use the pseudo-inverse mode"
        )
    try:
        factor = linalg.cho_factor(a)
    except linalg.LinAlgError as exc:
        raise RankError(f"{name} is not positive definite") from exc
    return linalg.cho_solve(factor, b)

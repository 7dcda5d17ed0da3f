"""Axes, meshes and finite-difference weights on nonuniform grids."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InputError


def uniform_axis(lo: float, hi: float, n: int) -> np.ndarray:
    return np.linspace(lo, hi, n)


def stretched_axis(lo: float, hi: float, n: int, center: float, intensity: float) -> np.ndarray:
    """Axis clustered near ``center``; smaller ``intensity`` clusters harder.

    Uses ``x = center + intensity * sinh(u)`` with ``u`` uniform, and snaps
    the node nearest to ``center`` onto it.
    """
    if not lo < center < hi:
        raise InputError("stretched_axis: center must lie strictly inside the range")
    u_lo = np.arcsinh((lo - center) / intensity)
    u_hi = np.arcsinh((hi - center) / intensity)
    x = center + intensity * np.sinh(np.linspace(u_lo, u_hi, n))
    x[0], x[-1] = lo, hi
    x[np.argmin(np.abs(x - center))] = center
    return x


@dataclass(frozen=True)
class Grid:
    """Tensor mesh in ``(s, sigma)``; ``sigma`` of length one means a 1-D problem."""

    s: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.s, dtype=float)
        v = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        if s.ndim != 1 or s.size < 4:
            raise InputError("grid: s axis needs at least 4 nodes")
        if np.any(np.diff(s) <= 0.0) or (v.size > 1 and np.any(np.diff(v) <= 0.0)):
            raise InputError("grid: axes must be strictly increasing")
        if v.size == 2:
            raise InputError("grid: sigma axis needs 1 or at least 3 nodes")
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "sigma", v)

    @property
    def shape(self) -> tuple:
        return (self.s.size, self.sigma.size)

    @property
    def size(self) -> int:
        return self.s.size * self.sigma.size

    @property
    def is_1d(self) -> bool:
        return self.sigma.size == 1

    def mesh(self) -> tuple:
        return np.meshgrid(self.s, self.sigma, indexing="ij")

    def index(self, i, j):
        return np.asarray(i) * self.sigma.size + np.asarray(j)


def central_weights(x: np.ndarray) -> tuple:
    """Three-point first and second derivative weights at interior nodes.

    Returns ``(d1, d2)`` each of shape ``(n - 2, 3)`` for offsets (-1, 0, +1).
    """
    hm = x[1:-1] - x[:-2]
    hp = x[2:] - x[1:-1]
    d1 = np.column_stack([-hp / (hm * (hm + hp)), (hp - hm) / (hm * hp), hm / (hp * (hm + hp))])
    d2 = np.column_stack([2.0 / (hm * (hm + hp)), -2.0 / (hm * hp), 2.0 / (hp * (hm + hp))])
    return d1, d2


def first_derivative(values: np.ndarray, x: np.ndarray, axis: int) -> np.ndarray:
    """Central differences inside, one-sided second-order at the ends."""
    return np.gradient(values, x, axis=axis, edge_order=2)


def linear_extrapolation_ratio(x: np.ndarray) -> tuple:
    """Ratios ``r`` of the rows ``c_0 - (1 + r) c_1 + r c_2 = 0`` at both ends."""
    lo = (x[1] - x[0]) / (x[2] - x[1])
    hi = (x[-1] - x[-2]) / (x[-2] - x[-3])
    return lo, hi


def locate(x: np.ndarray, points: np.ndarray) -> tuple:
    """Left-cell index and linear weight for each point, extrapolating past the ends."""
    i = np.clip(np.searchsorted(x, points, side="right") - 1, 0, x.size - 2)
    w = (points - x[i]) / (x[i + 1] - x[i])
    return i, w


def interpolate(grid: Grid, surface: np.ndarray, s, sigma=None) -> np.ndarray:
    """Bilinear interpolation, linear extrapolation in ``s``, clamped in ``sigma``."""
    s = np.atleast_1d(np.asarray(s, dtype=float))
    if grid.is_1d:
        i, w = locate(grid.s, s)
        col = surface[:, 0]
        return (1.0 - w) * col[i] + w * col[i + 1]
    v = np.clip(np.broadcast_to(np.atleast_1d(np.asarray(sigma, dtype=float)), s.shape),
                grid.sigma[0], grid.sigma[-1])
    i, ws = locate(grid.s, s)
    j, wv = locate(grid.sigma, v)
    wv = np.clip(wv, 0.0, 1.0)
    return ((1 - ws) * (1 - wv) * surface[i, j] + ws * (1 - wv) * surface[i + 1, j]
            + (1 - ws) * wv * surface[i, j + 1] + ws * wv * surface[i + 1, j + 1])

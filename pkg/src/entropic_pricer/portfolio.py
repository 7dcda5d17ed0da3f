"""Mean-variance portfolio construction and hedging on return moments."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ._linalg import as_symmetric, check_psd, spd_solve
from .errors import DegenerateReplicationError, InputError, RankError, SectorRedundancyError
from .scenario import MarketSlice, ScenarioMeasure, normalized_return


@dataclass(frozen=True)
class ReturnMoments:
    """First and second moments of underlying and derivative returns.

    The optional second sector (``V_o``, ``C_po``, ``C_oa``) describes a
    further set of hedge instruments with returns ``R_o``.
    """

    M_p: np.ndarray
    V_p: np.ndarray
    M_a: float = 0.0
    V_a: float = 0.0
    C_pa: np.ndarray | None = None
    V_o: np.ndarray | None = None
    C_po: np.ndarray | None = None
    C_oa: np.ndarray | None = None

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.M_p, dtype=float))
        n = m.size
        v = as_symmetric(self.V_p, "V_p")
        if v.shape != (n, n):
            raise InputError(f"V_p: expected shape ({n}, {n}), got {v.shape}")
        c = np.zeros(n) if self.C_pa is None else np.atleast_1d(np.asarray(self.C_pa, float))
        if c.shape != (n,):
            raise InputError(f"C_pa: expected length {n}")
        check_psd(v, "V_p")
        joint = np.block([[v, c[:, None]], [c[None, :], np.array([[float(self.V_a)]])]])
        check_psd(joint, "joint covariance")
        object.__setattr__(self, "M_p", m)
        object.__setattr__(self, "V_p", v)
        object.__setattr__(self, "C_pa", c)
        object.__setattr__(self, "M_a", float(self.M_a))
        object.__setattr__(self, "V_a", float(self.V_a))
        if self.V_o is not None:
            vo = as_symmetric(self.V_o, "V_o")
            k = vo.shape[0]
            cpo = np.asarray(self.C_po, dtype=float).reshape(n, k)
            coa = np.atleast_1d(np.asarray(self.C_oa, dtype=float))
            if coa.shape != (k,):
                raise InputError(f"C_oa: expected length {k}")
            full = np.block([[v, cpo, c[:, None]],
                             [cpo.T, vo, coa[:, None]],
                             [c[None, :], coa[None, :], np.array([[self.V_a]])]])
            check_psd(full, "two-sector joint covariance")
            object.__setattr__(self, "V_o", vo)
            object.__setattr__(self, "C_po", cpo)
            object.__setattr__(self, "C_oa", coa)

    @property
    def n_assets(self) -> int:
        return self.M_p.size

    @property
    def has_second_sector(self) -> bool:
        return self.V_o is not None

    def to_json(self) -> dict:
        out = {"M_p": self.M_p.tolist(), "V_p": self.V_p.tolist(), "M_a": self.M_a,
               "V_a": self.V_a, "C_pa": self.C_pa.tolist()}
        if self.has_second_sector:
            out.update(V_o=self.V_o.tolist(), C_po=self.C_po.tolist(), C_oa=self.C_oa.tolist())
        return out

    @classmethod
    def from_json(cls, data: dict) -> "ReturnMoments":
        if "M_p" not in data or "V_p" not in data:
            raise InputError("moments: M_p and V_p are required")
        keys = ("M_p", "V_p", "M_a", "V_a", "C_pa", "V_o", "C_po", "C_oa")
        extra = set(data) - set(keys)
        if extra:
            raise InputError(f"moments: unknown fields {sorted(extra)}")
        return cls(**{k: data[k] for k in keys if k in data})


class HedgeResult(NamedTuple):
    weights: np.ndarray
    residual_mean: float
    residual_variance: float


def weighted_moments(weights, r_p, r_a=None) -> ReturnMoments:
    """Exact moments of returns under scenario ``weights``."""
    w = np.asarray(weights, dtype=float)
    r_p = np.asarray(r_p, dtype=float)
    m_p = w @ r_p
    dp = r_p - m_p
    v_p = (dp * w[:, None]).T @ dp
    if r_a is None:
        return ReturnMoments(m_p, v_p)
    r_a = np.asarray(r_a, dtype=float)
    m_a = float(w @ r_a)
    da = r_a - m_a
    return ReturnMoments(m_p, v_p, m_a, float(w @ (da * da)), (dp * w[:, None]).T @ da)


def moments_from_measure(measure: ScenarioMeasure, market: MarketSlice,
                         derivative_end=None, derivative_start: float | None = None
                         ) -> ReturnMoments:
    """Mean vector and covariances of the normalised returns under ``measure``."""
    if isinstance(derivative_end, str):
        derivative_end = measure.observable(derivative_end)
    r = normalized_return(market, measure, derivative_end, derivative_start)
    return weighted_moments(measure.weights, r.underlying, r.derivative)


class ArbitrageCheck(NamedTuple):
    passed: bool
    witness: np.ndarray | None
    witness_mean: float


def check_no_arbitrage(moments: ReturnMoments, tol: float = 1e-10) -> ArbitrageCheck:
    """Look for a zero-variance portfolio with nonzero expected return.

    A failing check returns the offending kernel vector, signed so that its
    mean is positive.
    """
    eig, vecs = np.linalg.eigh(moments.V_p)
    kernel = vecs[:, eig < tol]
    if kernel.size:
        means = kernel.T @ moments.M_p
        worst = int(np.argmax(np.abs(means)))
        if abs(means[worst]) > tol:
            witness = kernel[:, worst] * np.sign(means[worst])
            return ArbitrageCheck(False, witness, float(abs(means[worst])))
    return ArbitrageCheck(True, None, 0.0)


def optimal_portfolio(moments: ReturnMoments, risk_scale: float = 1.0, *,
                      pseudo: bool = False) -> np.ndarray:
    """Frontier portfolio ``risk_scale * V_p^-1 M_p``."""
    if risk_scale <= 0.0:
        raise InputError("risk_scale must be positive")
    return risk_scale * spd_solve(moments.V_p, moments.M_p, pseudo=pseudo)


def portfolio_performance(moments: ReturnMoments, weights) -> tuple[float, float]:
    w = np.asarray(weights, dtype=float)
    return float(w @ moments.M_p), float(w @ moments.V_p @ w)


def frontier_slope(moments: ReturnMoments, *, pseudo: bool = False) -> float:
    """Expected return per unit of risk on the efficient frontier."""
    x = spd_solve(moments.V_p, moments.M_p, pseudo=pseudo)
    return float(np.sqrt(max(x @ moments.M_p, 0.0)))


def hedge_weights(moments: ReturnMoments, *, pseudo: bool = False) -> HedgeResult:
    """Minimum-variance hedge ``V_p^-1 C_pa`` and the hedged return moments."""
    beta = spd_solve(moments.V_p, moments.C_pa, pseudo=pseudo)
    sharpe_vec = spd_solve(moments.V_p, moments.M_p, pseudo=pseudo)
    m = moments.M_a - float(sharpe_vec @ moments.C_pa)
    v = moments.V_a - float(beta @ moments.C_pa)
    scale = max(1.0, abs(moments.V_a))
    if v < -1e-10 * scale:
        raise RankError(f"negative residual variance {v:.3e}: covariances inconsistent")
    return HedgeResult(beta, m, v)


def incremental_sharpe(moments: ReturnMoments, *, var_tol: float = 1e-14) -> tuple[float, float]:
    """Split of the joint quadratic form into the underlying part and the
    derivative's increment."""
    x = spd_solve(moments.V_p, moments.M_p)
    beta = spd_solve(moments.V_p, moments.C_pa)
    base = float(x @ moments.M_p)
    resid_mean = moments.M_a - float(x @ moments.C_pa)
    resid_var = moments.V_a - float(beta @ moments.C_pa)
    scale = max(1.0, abs(moments.V_a))
    if resid_var <= var_tol * scale:
        if abs(resid_mean) > 1e-12 * max(1.0, abs(moments.M_a)):
            raise DegenerateReplicationError(
                "derivative is replicable (zero residual variance) but mispriced; "
                f"residual mean {resid_mean:.3e}")
        return base, 0.0
    return base, resid_mean ** 2 / resid_var


def joint_quadratic_form(moments: ReturnMoments) -> float:
    """Direct evaluation of ``[M_p, M_a] . V_joint^-1 [M_p, M_a]``."""
    n = moments.n_assets
    joint = np.empty((n + 1, n + 1))
    joint[:n, :n] = moments.V_p
    joint[:n, n] = joint[n, :n] = moments.C_pa
    joint[n, n] = moments.V_a
    mean = np.append(moments.M_p, moments.M_a)
    return float(mean @ np.linalg.solve(joint, mean))


class TwoSectorHedge(NamedTuple):
    beta_p: np.ndarray
    beta_o: np.ndarray
    residual_variance: float
    single_sector_variance: float


def two_sector_hedge(moments: ReturnMoments, *, max_condition: float = 1e12) -> TwoSectorHedge:
    """Hedge across two sectors of instruments via the Schur complement."""
    if not moments.has_second_sector:
        raise InputError("moments have no second sector (V_o, C_po, C_oa)")
    v_p, c_pa = moments.V_p, moments.C_pa
    v_o, c_po, c_oa = moments.V_o, moments.C_po, moments.C_oa
    beta_single = spd_solve(v_p, c_pa)
    vinv_cpo = spd_solve(v_p, c_po)
    schur = v_o - c_po.T @ vinv_cpo
    schur = 0.5 * (schur + schur.T)
    gap = c_oa - c_po.T @ beta_single
    eig = np.linalg.eigvalsh(schur)
    ref = max(float(np.abs(np.linalg.eigvalsh(v_o)).max()), 1e-300)
    if eig.min() <= ref / max_condition:
        raise SectorRedundancyError(
            "second sector is spanned by the first (singular Schur complement)")
    correction = spd_solve(schur, gap, name="Schur complement")
    beta_p = beta_single - vinv_cpo @ correction
    v_single = moments.V_a - float(beta_single @ c_pa)
    v = v_single - float(correction @ gap)
    return TwoSectorHedge(beta_p, correction, v, v_single)

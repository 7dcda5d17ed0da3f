"""Forecast versus empirical hedge performance and tree backtests.

The forecast measure has density ``A`` against a universal measure ``z``;
the realised (empirical) measure has density ``A + eps D`` with
``D = S A + B``.  ``S`` rescales events the forecast anticipated, ``B`` puts
mass on events it ruled out (``A B = 0``).
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy.interpolate import LinearNDInterpolator

from ._linalg import spd_solve
from .calibration import FundingArrangement
from .errors import InputError, PricerError, RankError
from .portfolio import hedge_weights, weighted_moments
from .scenario import MarketSlice, ScenarioMeasure, normalized_return
from .tree import ScenarioTree, child_returns, price_on_tree

log = logging.getLogger(__name__)

MEASURE_TOL = 1e-12


@dataclass(frozen=True)
class HedgeErrorModel:
    z: ScenarioMeasure
    A: np.ndarray
    S: np.ndarray
    B: np.ndarray
    eps: float

    def __post_init__(self):
        n = self.z.n
        arrays = {}
        for name in ("A", "S", "B"):
            x = np.asarray(getattr(self, name), dtype=float)
            if x.shape != (n,):
                raise InputError(f"{name}: expected {n} values")
            arrays[name] = x
        a, s, b = arrays["A"], arrays["S"], arrays["B"]
        if np.any(a < 0.0):
            raise InputError("A: forecast kernel must be nonnegative")
        if np.any((a != 0.0) & (b != 0.0)):
            raise InputError("A and B must have disjoint support")
        if abs(self.z.expect(a) - 1.0) > MEASURE_TOL:
            raise InputError("A: E_z[A] must equal 1")
        d = s * a + b
        if abs(self.eps * self.z.expect(d)) > MEASURE_TOL:
            raise InputError("D: E_z[D] must vanish so both kernels are measures")
        if np.any(a + self.eps * d < 0.0):
            raise InputError("A + eps D must be nonnegative")
        for name, x in arrays.items():
            object.__setattr__(self, name, x)

    @property
    def D(self) -> np.ndarray:
        return self.S * self.A + self.B

    @property
    def forecast_weights(self) -> np.ndarray:
        return self.z.weights * self.A

    @property
    def empirical_weights(self) -> np.ndarray:
        return self.z.weights * (self.A + self.eps * self.D)

    def measure(self, which: str) -> ScenarioMeasure:
        w = self.forecast_weights if which == "forecast" else self.empirical_weights
        return ScenarioMeasure(self.z.scenario_ids, w / w.sum(), self.z.observables)


def random_hedge_error_model(rng: np.random.Generator, n: int, eps: float, *,
                             n_unanticipated: int = 2, anticipated: bool = True
                             ) -> HedgeErrorModel:
    """Random model whose last ``n_unanticipated`` scenarios the forecast excludes.

    With ``anticipated=False`` the anticipated part ``S`` is constant, which
    contributes nothing to the hedge error.
    """
    z = ScenarioMeasure.uniform(n)
    a = np.zeros(n)
    k = n - n_unanticipated
    a[:k] = rng.uniform(0.5, 1.5, k)
    a /= z.expect(a)
    b = np.zeros(n)
    b[k:] = rng.uniform(0.5, 1.5, n_unanticipated)
    s = rng.normal(size=n) if anticipated else np.zeros(n)
    s[k:] = 0.0
    # shift S on the forecast support so that D integrates to zero
    s[:k] -= z.expect(s * a) + z.expect(b)
    return HedgeErrorModel(z, a, s, b, eps)


def _returns(market: MarketSlice, a1, a0):
    return normalized_return(market, None, a1, a0)


def forecast_and_empirical_hedges(model: HedgeErrorModel, market: MarketSlice, a1, a0: float
                                  ) -> tuple:
    r = _returns(market, a1, a0)
    out = []
    for which, w in (("forecast", model.forecast_weights), ("empirical", model.empirical_weights)):
        try:
            out.append(hedge_weights(weighted_moments(w, r.underlying, r.derivative)).weights)
        except RankError as exc:
            raise RankError(f"{which} measure: {exc}") from exc
    return tuple(out)


class Performance(NamedTuple):
    mean_market: float
    mean_model: float
    variance_market: float
    variance_model: float
    direct_mean: float
    direct_variance: float

    @property
    def mean(self) -> float:
        return self.mean_market + self.mean_model

    @property
    def variance(self) -> float:
        return self.variance_market + self.variance_model


def empirical_performance(model: HedgeErrorModel, market: MarketSlice, a1, a0: float,
                          beta) -> Performance:
    """Realised mean and variance of ``R_a - beta . R_p``, split into market and model risk."""
    r = _returns(market, a1, a0)
    mom = weighted_moments(model.empirical_weights, r.underlying, r.derivative)
    best = hedge_weights(mom)
    gap = best.weights - np.atleast_1d(np.asarray(beta, dtype=float))
    hedged = r.derivative - r.underlying @ (best.weights - gap)
    w = model.empirical_weights
    direct_mean = float(w @ hedged)
    direct_var = float(w @ (hedged - direct_mean) ** 2)
    return Performance(best.residual_mean, float(gap @ mom.M_p), best.residual_variance,
                       float(gap @ mom.V_p @ gap), direct_mean, direct_var)


class HedgeErrorExpansion(NamedTuple):
    omega: np.ndarray
    omega_a: np.ndarray
    omega_b: np.ndarray
    predicted: np.ndarray
    exact: np.ndarray
    drift_term: np.ndarray

    @property
    def error(self) -> float:
        return float(np.linalg.norm(self.exact - self.predicted))


def first_order_hedge_error(model: HedgeErrorModel, market: MarketSlice, a1, a0: float
                            ) -> HedgeErrorExpansion:
    """First-order change of the hedge between forecast and empirical measures.

    ``predicted = V_s^-1 Omega``.  When the residual forecast mean ``m_s`` is
    nonzero the first-order change carries the extra ``drift_term``
    ``-m_s V_s^-1 dM_p``; it vanishes for derivatives fair-priced under the
    forecast.
    """
    r = _returns(market, a1, a0)
    zw = model.z.weights
    fs = weighted_moments(model.forecast_weights, r.underlying, r.derivative)
    hs = hedge_weights(fs)
    beta_s = hs.weights
    dev = r.underlying - fs.M_p
    hedged = r.derivative - r.underlying @ beta_s
    integrand = dev * hedged[:, None]
    omega = (zw * model.eps * model.D) @ integrand
    omega_a = (model.forecast_weights * model.eps * model.S) @ integrand
    unanticipated = model.B != 0.0
    omega_b = (zw * model.eps * np.where(unanticipated, model.B, 0.0)) @ integrand
    predicted = spd_solve(fs.V_p, omega)
    d_mean = (zw * model.eps * model.D) @ dev
    drift = -hs.residual_mean * spd_solve(fs.V_p, d_mean)
    beta_e = forecast_and_empirical_hedges(model, market, a1, a0)[1]
    return HedgeErrorExpansion(omega, omega_a, omega_b, predicted, beta_e - beta_s, drift)


# -- tree backtests -----------------------------------------------------------

CARRY_CONVENTION = ("carry is the hedged P&L interpolated linearly across sibling states "
                    "at zero underlying return; gamma P&L is the remainder")


def minimum_variance_strategy(tree: ScenarioTree, node: str, pricing) -> np.ndarray:
    """Forecast hedge: minimum variance under the economic child weights."""
    weights, r_p = child_returns(tree, node)
    ids = [c for c, _ in tree.nodes[node].children]
    b = pricing.funding
    ra = np.array([(b[c] / tree.nodes[c].u) * (pricing.prices[c] / b[c]
                                                - pricing.prices[node] / b[node]) for c in ids])
    return hedge_weights(weighted_moments(weights, r_p, ra), pseudo=True).weights


def _carry(r_p: np.ndarray, h: np.ndarray) -> float:
    if r_p.shape[1] == 1:
        x = r_p[:, 0]
        order = np.argsort(x)
        return float(np.interp(0.0, x[order], h[order]))
    value = LinearNDInterpolator(r_p, h)(np.zeros((1, r_p.shape[1])))[0]
    if not np.isfinite(value):
        raise PricerError("carry undefined: zero return outside the children's hull")
    return float(value)


@dataclass
class BacktestLedger:
    columns: dict
    beta_names: list
    summary: dict
    error: dict | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def n_rows(self) -> int:
        return len(self.columns["period"])

    def identity_error(self) -> float:
        c = self.columns
        if not self.n_rows:
            return 0.0
        return float(np.max(np.abs(c["hedged_pnl"] - c["carry"] - c["gamma_pnl"])))

    def header(self) -> list:
        return (["path", "period", "node"] + self.beta_names
                + [n.replace("beta", "return_p") for n in self.beta_names]
                + ["return_a", "carry", "gamma_pnl", "hedged_pnl", "cum_pnl"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.header())
        c = self.columns
        k = len(self.beta_names)
        for i in range(self.n_rows):
            row = [str(int(c["path"][i])), str(int(c["period"][i])), c["node"][i]]
            row += [format(float(x), ".17g") for x in c["beta"][i, :k]]
            row += [format(float(x), ".17g") for x in c["return_p"][i, :k]]
            row += [format(float(c[n][i]), ".17g")
                    for n in ("return_a", "carry", "gamma_pnl", "hedged_pnl", "cum_pnl")]
            writer.writerow(row)
        if self.error is not None:
            writer.writerow(["error", json.dumps(self.error, sort_keys=True)])
        return buf.getvalue()

    def summary_json(self) -> dict:
        out = dict(self.summary)
        out["metadata"] = dict(self.metadata)
        if self.error is not None:
            out["error"] = self.error
        return out


def run_backtest(tree: ScenarioTree, arrangement: FundingArrangement, *,
                 strategy: Callable | None = None, n_paths: int = 10_000, seed: int = 0,
                 payoff=None, tol: float = 1e-10) -> BacktestLedger:
    """Sample paths under the pricing measure and attribute hedged P&L per period.

    The strategy maps ``(tree, node, pricing)`` to hedge weights.  P&L is in
    returns normalised by the unsecured funding price.
    """
    strategy = strategy or minimum_variance_strategy
    pricing = price_on_tree(tree, arrangement, payoff=payoff, tol=tol)
    b = pricing.funding
    n_assets = tree.nodes[tree.root].p.size

    per_node = {}
    failure = {}
    for k, node in tree.nodes.items():
        if node.is_leaf:
            continue
        ids = [c for c, _ in node.children]
        weights, r_p = child_returns(tree, k)
        r_a = np.array([(b[c] / tree.nodes[c].u) * (pricing.prices[c] / b[c]
                                                     - pricing.prices[k] / b[k]) for c in ids])
        tilted = weights * pricing.kernels[k].values
        tilted = tilted / tilted.sum()
        try:
            beta = np.atleast_1d(np.asarray(strategy(tree, k, pricing), dtype=float))
            if beta.shape != (n_assets,) or not np.all(np.isfinite(beta)):
                raise PricerError(f"strategy returned invalid weights {beta.tolist()}")
            h = r_a - r_p @ beta
            carry = _carry(r_p, h)
        except Exception as exc:       # a broken strategy truncates the ledger
            failure[k] = f"{type(exc).__name__}: {exc}"
            continue
        per_node[k] = (ids, np.cumsum(tilted), beta, r_p, r_a, h, carry)

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    n_periods = tree.n_periods
    draws = rng.random((n_paths, n_periods))
    current = np.array([tree.root] * n_paths, dtype=object)
    node_col = np.empty((n_paths, n_periods), dtype=object)
    beta_col = np.full((n_paths, n_periods, n_assets), np.nan)
    rp_col = np.full((n_paths, n_periods, n_assets), np.nan)
    cols = {n: np.full((n_paths, n_periods), np.nan)
            for n in ("return_a", "carry", "gamma_pnl", "hedged_pnl")}
    alive = np.ones((n_paths, n_periods), dtype=bool)
    first_error = None
    for t in range(n_periods):
        nxt = current.copy()
        for k in np.unique(current[current != None].astype(str)):  # noqa: E711
            sel = np.flatnonzero(current == k)
            node_col[sel, t] = k
            if tree.nodes[k].is_leaf:
                alive[sel, t] = False
                nxt[sel] = None
                continue
            if k in failure:
                alive[sel, t] = False
                p = int(sel[0])
                if first_error is None or (p, t) < (first_error["path"], first_error["period"]):
                    first_error = {"path": p, "period": t, "node": k, "message": failure[k]}
                nxt[sel] = None
                continue
            ids, cum, beta, r_p, r_a, h, carry = per_node[k]
            j = np.minimum(np.searchsorted(cum, draws[sel, t], side="right"), len(ids) - 1)
            beta_col[sel, t] = beta
            rp_col[sel, t] = r_p[j]
            cols["return_a"][sel, t] = r_a[j]
            cols["hedged_pnl"][sel, t] = h[j]
            cols["carry"][sel, t] = carry
            cols["gamma_pnl"][sel, t] = h[j] - carry
            nxt[sel] = np.array(ids, dtype=object)[j]
        current = nxt
        alive[:, t] &= current != None  # noqa: E711

    flat_alive = alive.ravel()
    if first_error is not None:
        cut = first_error["path"] * n_periods + first_error["period"]
        flat_alive[cut:] = False
    idx = np.flatnonzero(flat_alive)
    paths, periods = np.divmod(idx, n_periods)
    hedged = cols["hedged_pnl"].ravel()[idx]
    cum = np.zeros(len(idx))
    # cumulative P&L within each path, rows are path-major
    if len(idx):
        starts = np.r_[True, paths[1:] != paths[:-1]]
        run = np.cumsum(hedged)
        offset = np.maximum.accumulate(np.where(starts, np.arange(len(idx)), 0))
        cum = run - np.r_[0.0, run][offset]
    columns = {
        "path": paths, "period": periods, "node": node_col.ravel()[idx],
        "beta": beta_col.reshape(-1, n_assets)[idx], "return_p": rp_col.reshape(-1, n_assets)[idx],
        **{n: v.ravel()[idx] for n, v in cols.items()}, "cum_pnl": cum,
    }
    totals = np.zeros(n_paths)
    np.add.at(totals, paths, hedged)
    complete = n_paths if first_error is None else first_error["path"]
    totals = totals[:complete]
    per_period = columns["hedged_pnl"]
    summary = {
        "root_price": pricing.root_price,
        "n_paths": int(complete),
        "n_rows": int(len(idx)),
        "mean_path_pnl": float(totals.mean()) if complete else float("nan"),
        "variance_path_pnl": float(totals.var(ddof=1)) if complete > 1 else float("nan"),
        "standard_error_path_pnl": float(totals.std(ddof=1) / np.sqrt(complete))
        if complete > 1 else float("nan"),
        "mean_period_pnl": float(per_period.mean()) if len(idx) else float("nan"),
        "variance_period_pnl": float(per_period.var(ddof=1)) if len(idx) > 1 else float("nan"),
        "total_carry": float(columns["carry"].sum()),
        "total_gamma_pnl": float(columns["gamma_pnl"].sum()),
    }
    names = [f"beta_{i}" for i in range(n_assets)] if n_assets > 1 else ["beta"]
    return BacktestLedger(columns, names, summary, first_error,
                          {"carry_convention": CARRY_CONVENTION, "seed": seed,
                           "pnl_units": "returns normalised by the unsecured funding price"})

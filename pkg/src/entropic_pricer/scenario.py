"""Finite scenario measures, market slices and the price-functional checks.

A :class:`ScenarioMeasure` is a discrete probability measure over labelled
scenarios carrying a table of observables.  A :class:`MarketSlice` holds the
start and end prices of one settlement period: underlying prices ``p`` with
their funding prices ``q``, the unsecured funding price ``u`` and the
derivative funding price ``b``.  End values are per scenario, start values
are known at the start of the period.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .errors import DomainError, InputError

WEIGHT_TOL = 1e-12
RENORMALIZE_TOL = 1e-9


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ScenarioMeasure:
    """Probability weights over labelled scenarios plus named observables."""

    scenario_ids: tuple
    weights: np.ndarray
    observables: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        ids = tuple(self.scenario_ids)
        if len(set(ids)) != len(ids):
            raise InputError("scenario_ids must be unique")
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size != len(ids):
            raise InputError(f"weights: expected {len(ids)} values, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise InputError("weights: non-finite value")
        if np.any(w < 0.0):
            raise InputError("weights: negative value")
        total = float(w.sum())
        if abs(total - 1.0) > RENORMALIZE_TOL:
            raise InputError(f"weights: sum to {total!r}, not 1")
        if abs(total - 1.0) > WEIGHT_TOL:
            w = w / total
        obs = {}
        for name, values in dict(self.observables).items():
            v = np.asarray(values, dtype=float)
            if v.shape != (len(ids),):
                raise InputError(
                    f"observable {name!r}: expected {len(ids)} values, got shape {v.shape}")
            if not np.all(np.isfinite(v)):
                raise InputError(f"observable {name!r}: non-finite value")
            obs[str(name)] = _frozen(v)
        object.__setattr__(self, "scenario_ids", ids)
        object.__setattr__(self, "weights", _frozen(w))
        object.__setattr__(self, "observables", obs)

    @classmethod
    def uniform(cls, n: int, observables=None) -> "ScenarioMeasure":
        return cls(tuple(range(n)), np.full(n, 1.0 / n), observables or {})

    @property
    def n(self) -> int:
        return len(self.scenario_ids)

    def expect(self, values) -> np.ndarray | float:
        """Expectation over the leading (scenario) axis."""
        v = np.asarray(values, dtype=float)
        out = np.tensordot(self.weights, v, axes=(0, 0))
        return float(out) if np.ndim(out) == 0 else out

    def observable(self, name: str) -> np.ndarray:
        try:
            return self.observables[name]
        except KeyError:
            raise InputError(f"unknown observable {name!r}") from None

    def reweight(self, kernel) -> "ScenarioMeasure":
        """Measure with density ``kernel`` relative to this one."""
        k = np.asarray(kernel, dtype=float)
        w = self.weights * k
        return ScenarioMeasure(self.scenario_ids, w / w.sum(), self.observables)

    def with_observables(self, **columns) -> "ScenarioMeasure":
        obs = dict(self.observables)
        obs.update(columns)
        return ScenarioMeasure(self.scenario_ids, self.weights, obs)

    def to_json(self) -> dict:
        return {
            "scenarios": list(self.scenario_ids),
            "weights": [float(x) for x in self.weights],
            "observables": {k: [float(x) for x in v] for k, v in self.observables.items()},
        }


def load_scenario_json(source) -> ScenarioMeasure:
    """Read ``{"scenarios": [...], "weights": [...], "observables": {...}}``."""
    data = _read_json(source)
    for key in ("scenarios", "weights"):
        if key not in data:
            raise InputError(f"{key}: missing field")
    weights = data["weights"]
    if not isinstance(weights, list) or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool) for x in weights):
        raise InputError("weights: must be a list of plain decimals")
    observables = data.get("observables", {})
    if not isinstance(observables, dict):
        raise InputError("observables: must be an object")
    return ScenarioMeasure(tuple(data["scenarios"]), weights, observables)


def _read_json(source) -> dict:
    if isinstance(source, Mapping):
        return dict(source)
    text = Path(source).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{source}: invalid JSON at line {exc.lineno} column {exc.colno}: "
                         f"{exc.msg}") from exc
    if not isinstance(data, dict):
        raise InputError(f"{source}: top level must be an object")
    return data


@dataclass(frozen=True)
class MarketSlice:
    """Start/end prices for one settlement period.

    ``p0``/``q0`` have shape ``(n_assets,)``; ``p1``/``q1`` have shape
    ``(n_scenarios, n_assets)``.  ``u`` and ``b`` are scalars at the start and
    per-scenario at the end.  ``b`` defaults to ``u`` (unsecured funding).
    """

    p0: np.ndarray
    p1: np.ndarray
    q0: np.ndarray | None = None
    q1: np.ndarray | None = None
    u0: float = 1.0
    u1: np.ndarray | float = 1.0
    b0: float | None = None
    b1: np.ndarray | float | None = None
    w0: float | None = None
    w1: np.ndarray | float | None = None
    f: float | None = None

    def __post_init__(self):
        p0 = np.atleast_1d(np.asarray(self.p0, dtype=float))
        n_assets = p0.size
        p1 = np.asarray(self.p1, dtype=float)
        if p1.ndim == 1 and n_assets == 1:
            p1 = p1[:, None]
        if p1.ndim != 2 or p1.shape[1] != n_assets:
            raise InputError(f"p1: expected shape (n_scenarios, {n_assets}), got {p1.shape}")
        n = p1.shape[0]
        q0 = np.ones(n_assets) if self.q0 is None else np.atleast_1d(np.asarray(self.q0, float))
        if q0.shape != (n_assets,):
            raise InputError("q0: p and q must have equal dimension")
        q1 = np.ones((n, n_assets)) if self.q1 is None else np.asarray(self.q1, dtype=float)
        if q1.ndim == 1 and n_assets == 1 and q1.size == n:
            q1 = q1[:, None]
        try:
            q1 = np.broadcast_to(q1, (n, n_assets)).copy()
        except ValueError:
            raise InputError("q1: p and q must have equal dimension") from None
        u1 = _per_scenario(self.u1, n, "u1")
        b0 = float(self.u0 if self.b0 is None else self.b0)
        b1 = u1.copy() if self.b1 is None else _per_scenario(self.b1, n, "b1")
        fields = dict(p0=p0, p1=p1, q0=q0, q1=q1, u0=float(self.u0), u1=u1, b0=b0, b1=b1)
        if self.w0 is not None or self.w1 is not None:
            if self.w0 is None or self.w1 is None:
                raise InputError("numeraire needs both w0 and w1")
            fields["w0"] = float(self.w0)
            fields["w1"] = _per_scenario(self.w1, n, "w1")
        if self.f is not None:
            fields["f"] = float(self.f)
        for name, value in fields.items():
            arr = np.asarray(value, dtype=float)
            if not np.all(np.isfinite(arr)):
                raise InputError(f"{name}: non-finite value")
            object.__setattr__(self, name, _frozen(arr) if arr.ndim else float(arr))

    @property
    def n_scenarios(self) -> int:
        return self.p1.shape[0]

    @property
    def n_assets(self) -> int:
        return self.p0.size

    def validate_domain(self, scenario_ids: Sequence | None = None) -> None:
        """Raise :class:`DomainError` naming the first scenario with a bad price."""
        ids = scenario_ids if scenario_ids is not None else range(self.n_scenarios)
        if np.any(self.q0 <= 0.0):
            raise DomainError("q0: funding prices must be strictly positive")
        if self.u0 <= 0.0 or self.b0 <= 0.0:
            raise DomainError("u0/b0: funding prices must be strictly positive")
        for name, arr in (("q1", self.q1.min(axis=1)), ("u1", self.u1), ("b1", self.b1)):
            bad = np.flatnonzero(arr <= 0.0)
            if bad.size:
                raise DomainError(
                    f"{name}: non-positive funding price in scenario {list(ids)[bad[0]]!r}")
        if self.w0 is not None:
            if self.w0 <= 0.0 or np.any(self.w1 <= 0.0):
                raise DomainError("w: numeraire must be strictly positive")

    @property
    def funding_ratio_end(self) -> np.ndarray:
        """Per-scenario ``b1/u1``."""
        return self.b1 / self.u1

    def to_json(self) -> dict:
        out = {k: np.asarray(getattr(self, k)).tolist()
               for k in ("p0", "p1", "q0", "q1", "u0", "u1", "b0", "b1")}
        for k in ("w0", "w1", "f"):
            if getattr(self, k) is not None:
                out[k] = np.asarray(getattr(self, k)).tolist()
        return out


def _per_scenario(value, n: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(n, float(arr))
    if arr.shape != (n,):
        raise InputError(f"{name}: expected {n} per-scenario values, got shape {arr.shape}")
    return arr.copy()


def load_slice_json(source) -> MarketSlice:
    data = _read_json(source)
    if "p0" not in data or "p1" not in data:
        raise InputError("slice: p0 and p1 are required")
    known = {"p0", "p1", "q0", "q1", "u0", "u1", "b0", "b1", "w0", "w1", "f"}
    extra = set(data) - known - {"a0", "a1", "derivative"}
    if extra:
        raise InputError(f"slice: unknown fields {sorted(extra)}")
    return MarketSlice(**{k: v for k, v in data.items() if k in known})


class Returns(NamedTuple):
    underlying: np.ndarray          # (n_scenarios, n_assets)
    derivative: np.ndarray | None   # (n_scenarios,)


def normalized_return(market: MarketSlice, measure: ScenarioMeasure | None = None,
                      derivative_end=None, derivative_start: float | None = None,
                      *, form: str = "product") -> Returns:
    """Funded returns normalised by the unsecured funding price.

    ``R_p = (q1/u1) * (p1/q1 - p0/q0)`` and ``R_a = (b1/u1) * (a1/b1 - a0/b0)``.
    ``form="difference"`` evaluates the equivalent
    ``(dp - (p/q) dq) / (u + du)`` instead.
    """
    ids = measure.scenario_ids if measure is not None else None
    if measure is not None and measure.n != market.n_scenarios:
        raise InputError(f"slice has {market.n_scenarios} scenarios, measure has {measure.n}")
    market.validate_domain(ids)
    u1 = market.u1[:, None]
    if form == "product":
        r_p = (market.q1 / u1) * (market.p1 / market.q1 - market.p0 / market.q0)
    elif form == "difference":
        dp = market.p1 - market.p0
        dq = market.q1 - market.q0
        r_p = (dp - (market.p0 / market.q0) * dq) / u1
    else:
        raise ValueError(f"unknown form {form!r}")
    r_a = None
    if derivative_end is not None:
        if derivative_start is None:
            raise InputError("derivative_start is required with derivative_end")
        a1 = _per_scenario(derivative_end, market.n_scenarios, "a1")
        a0 = float(derivative_start)
        if form == "product":
            r_a = (market.b1 / market.u1) * (a1 / market.b1 - a0 / market.b0)
        else:
            r_a = ((a1 - a0) - (a0 / market.b0) * (market.b1 - market.b0)) / market.u1
    return Returns(r_p, r_a)


def kl_divergence(candidate, reference) -> float:
    """Relative entropy ``sum c log(c/r)`` with ``0 log 0 = 0``.

    Returns ``inf`` when the candidate puts mass where the reference has none.
    """
    c = np.asarray(candidate, dtype=float)
    r = np.asarray(reference, dtype=float)
    if c.shape != r.shape:
        raise InputError("candidate and reference must have the same length")
    support = c > 0.0
    if np.any(r[support] <= 0.0):
        return math.inf
    cs, rs = c[support], r[support]
    return float(max(np.sum(cs * np.log(cs / rs)), 0.0))


@dataclass(frozen=True)
class Check:
    name: str
    lhs: float
    rhs: float
    slack: float

    @property
    def passed(self) -> bool:
        return self.slack >= -1e-12


@dataclass(frozen=True)
class CheckReport:
    checks: tuple

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


def price_functional_checks(measure: ScenarioMeasure, a, b) -> CheckReport:
    """Linearity, positivity and Cauchy-Schwarz checks of ``E[.]`` on ``a`` and ``b``.

    Positivity is applied to ``x - min(x)``, which is pointwise nonnegative,
    so its slack is ``E[x] - min(x)``.
    """
    a = np.asarray(measure.observable(a) if isinstance(a, str) else a, dtype=float)
    b = np.asarray(measure.observable(b) if isinstance(b, str) else b, dtype=float)
    ea, eb = measure.expect(a), measure.expect(b)
    eab_sum = measure.expect(a + b)
    cs_lhs = measure.expect(a * b) ** 2
    cs_rhs = measure.expect(a * a) * measure.expect(b * b)
    scale = max(1.0, abs(cs_rhs))
    checks = (
        Check("linearity", eab_sum, ea + eb, -abs(eab_sum - (ea + eb))),
        Check("positivity_a", ea, float(a.min()), ea - float(a.min())),
        Check("positivity_b", eb, float(b.min()), eb - float(b.min())),
        # relative slack so the check is scale free
        Check("cauchy_schwarz", cs_lhs, cs_rhs, (cs_rhs - cs_lhs) / scale),
    )
    return CheckReport(checks)

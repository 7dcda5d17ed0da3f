import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from entropic_pricer import (DomainError, InputError, MarketSlice, ScenarioMeasure,
                             kl_divergence, load_scenario_json, normalized_return,
                             price_functional_checks)


def test_measure_validation():
    with pytest.raises(InputError, match="unique"):
        ScenarioMeasure(("a", "a"), [0.5, 0.5])
    with pytest.raises(InputError, match="weights"):
        ScenarioMeasure(("a", "b"), [0.7, 0.4])
    with pytest.raises(InputError, match="negative"):
        ScenarioMeasure(("a", "b"), [1.5, -0.5])
    with pytest.raises(InputError, match="observable"):
        ScenarioMeasure(("a", "b"), [0.5, 0.5], {"x": [1.0]})
    m = ScenarioMeasure(("a", "b"), [0.5, 0.5 + 1e-10])
    assert abs(m.weights.sum() - 1.0) < 1e-15


def test_weights_must_be_plain_decimals():
    with pytest.raises(InputError, match="weights"):
        load_scenario_json({"scenarios": ["a", "b"], "weights": ["0.5", 0.5]})


def test_malformed_json_reports_position(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"scenarios": [1, 2],\n "weights": [0.5, }')
    with pytest.raises(InputError, match="line 2"):
        load_scenario_json(p)


def test_json_round_trip(tmp_path):
    m = ScenarioMeasure(("up", "down"), [0.6, 0.4], {"pay": [1.0, 0.0]})
    p = tmp_path / "m.json"
    p.write_text(json.dumps(m.to_json()))
    back = load_scenario_json(p)
    assert back.scenario_ids == m.scenario_ids
    np.testing.assert_array_equal(back.weights, m.weights)
    np.testing.assert_array_equal(back.observable("pay"), [1.0, 0.0])


def test_no_motion_gives_zero_return():
    s = MarketSlice(p0=[50.0], p1=[[50.0], [50.0]], q0=[1.2], q1=[[1.2], [1.2]], u0=1.1, u1=1.1)
    np.testing.assert_array_equal(normalized_return(s).underlying, 0.0)


def test_unit_funding_gives_price_increments():
    s = MarketSlice(p0=[100.0], p1=[[110.0], [90.0]])
    np.testing.assert_allclose(normalized_return(s).underlying[:, 0], [10.0, -10.0])


def test_funded_return_example():
    s = MarketSlice(p0=[100.0], p1=[[105.0]], q0=[1.0], q1=[[1.01]], u0=1.0, u1=1.02)
    product = normalized_return(s).underlying[0, 0]
    difference = normalized_return(s, form="difference").underlying[0, 0]
    # (1.01/1.02) * (105/1.01 - 100) = 4/1.02
    assert product == pytest.approx(4.0 / 1.02, rel=1e-14)
    assert difference == pytest.approx(product, rel=1e-14)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(50, 150), st.floats(0.5, 2), st.floats(0.5, 2),
                          st.floats(0.5, 2)), min_size=1, max_size=6),
       st.floats(50, 150), st.floats(0.5, 2), st.floats(0.5, 2), st.floats(20, 200))
def test_return_forms_agree(rows, p0, q0, b0, a0):
    p1, q1, u1, b1 = map(np.array, zip(*rows))
    a1 = p1 * 0.7
    s = MarketSlice(p0=[p0], p1=p1[:, None], q0=[q0], q1=q1[:, None], u0=1.0, u1=u1,
                    b0=b0, b1=b1)
    r1 = normalized_return(s, None, a1, a0)
    r2 = normalized_return(s, None, a1, a0, form="difference")
    np.testing.assert_allclose(r1.underlying, r2.underlying, rtol=1e-10, atol=1e-9)
    np.testing.assert_allclose(r1.derivative, r2.derivative, rtol=1e-10, atol=1e-9)


def test_domain_error_names_scenario():
    m = ScenarioMeasure(("calm", "crash"), [0.5, 0.5])
    s = MarketSlice(p0=[1.0], p1=[[1.0], [1.0]], u1=[1.0, 0.0])
    with pytest.raises(DomainError, match="crash"):
        normalized_return(s, m)


def test_dimension_mismatch():
    with pytest.raises(InputError, match="equal dimension"):
        MarketSlice(p0=[1.0, 2.0], p1=[[1.0, 2.0]], q0=[1.0])


def test_kl_examples():
    assert kl_divergence([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert kl_divergence([0.5, 0.5], [0.6, 0.4]) == pytest.approx(0.5 * math.log(25 / 24),
                                                                  abs=1e-15)
    assert kl_divergence([0.5, 0.5], [0.6, 0.4]) == pytest.approx(0.020411, abs=1e-6)
    assert kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2.0), abs=1e-15)
    assert kl_divergence([0.5, 0.5], [1.0, 0.0]) == math.inf


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 8).flatmap(lambda n: st.tuples(
    st.lists(st.floats(0.01, 1), min_size=n, max_size=n),
    st.lists(st.floats(0.01, 1), min_size=n, max_size=n))))
def test_kl_nonnegative(pair):
    c, r = (np.array(x) / sum(x) for x in pair)
    assert kl_divergence(c, r) >= 0.0


def test_functional_checks_examples():
    m = ScenarioMeasure(("a", "b", "c"), [0.3, 0.3, 0.4])
    ind = np.array([1.0, 0.0, 0.0])
    rep = price_functional_checks(m, ind, ind)
    assert rep.passed
    cs = rep["cauchy_schwarz"]
    assert cs.lhs == pytest.approx(0.09) and cs.rhs == pytest.approx(0.09)
    rep = price_functional_checks(m, np.ones(3), np.ones(3))
    assert rep["linearity"].slack == 0.0 and rep["positivity_a"].slack == 0.0


def test_functional_checks_random(rng):
    for _ in range(50):
        m = ScenarioMeasure.uniform(5, {"a": rng.normal(size=5), "b": rng.normal(size=5)})
        assert price_functional_checks(m, "a", "b").passed

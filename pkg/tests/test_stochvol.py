import numpy as np
import pytest
from scipy.optimize import brentq

from entropic_pricer import CompletenessError, InputError, SolverError
from entropic_pricer.levy import ConvexityModel, solve_drift_conditions
from entropic_pricer.stochvol import (Grid, Jump, PideProblem, StochVolModel, black_call, bsm,
                                      calibration_alpha, complete_hedge_weights, heston,
                                      model_from_json, pide_drift_operator,
                                      residual_variance_rate, sabr, solve_calibration_root,
                                      solve_pide, stretched_axis, uniform_axis)


def const(x):
    return lambda t, s, v: np.full(np.broadcast(s, v).shape, float(x))


def flat_model(mu, nu, jumps=(), **kw):
    return StochVolModel("custom", {}, mu_s=const(mu), nu_s=const(nu), has_sigma=False,
                         jumps=tuple(Jump(const(j), const(0.0), const(r)) for j, r in jumps),
                         **kw)


def test_calibration_root_examples():
    assert float(solve_calibration_root(0.05, 0.04)) == 1.25
    assert calibration_alpha(flat_model(0.05, 0.04), (1.0, 0.0)) == 1.25
    assert calibration_alpha(flat_model(0.0, 0.04, [(0.1, 1.0), (-0.1, 1.0)]), (1.0,)) == 0.0
    g = lambda a: 0.05 - 0.04 * a + 0.1 * np.exp(-0.1 * a)
    oracle = brentq(g, 0.0, 100.0, xtol=1e-14)
    newton = calibration_alpha(flat_model(0.05, 0.04, [(0.1, 1.0)]), (1.0,))
    assert abs(newton - oracle) <= 1e-10


def test_calibration_root_needs_risk():
    with pytest.raises(Exception, match="nu_s > 0"):
        solve_calibration_root(0.05, 0.0)


def test_model_validation_and_json():
    for bad in (dict(kappa=-1.0), dict(rho=1.5), dict(xi=0.0)):
        args = dict(mu=0.05, kappa=2.0, theta=0.04, xi=0.3, rho=-0.7, v0=0.04)
        args.update(bad)
        with pytest.raises(InputError):
            heston(**args)
    with pytest.raises(InputError):
        sabr(0.2, 0.3, 1.2, 0.0)
    for m in (bsm(0.05, 0.2, [{"j": -0.1, "rate": 0.5}]),
              heston(0.05, 2.0, 0.04, 0.3, -0.7, 0.04), sabr(0.2, 0.3, 0.5, -0.3)):
        assert model_from_json(m.to_json()).to_json() == m.to_json()
    with pytest.raises(InputError, match="unknown fields"):
        model_from_json({"kind": "sabr", "sigma0": 0.2, "alpha": 0.3, "beta": 0.5, "rho": 0.0,
                         "nu": 1.0})
    with pytest.raises(InputError, match="missing"):
        model_from_json({"kind": "heston", "mu": 0.05})


S_AXIS = uniform_axis(0.0, 4.0, 41)


def test_operator_linear_and_square():
    grid = Grid(S_AXIS, [0.0])
    m = flat_model(0.05, 0.04)
    lin = pide_drift_operator(m, grid, 3.0 * S_AXIS - 1.0)
    np.testing.assert_allclose(lin, 0.0, atol=1e-14)
    sq = pide_drift_operator(m, grid, S_AXIS ** 2)
    np.testing.assert_allclose(sq[1:-1, 0], 0.04, rtol=1e-12)


def test_operator_bsm_closed_form():
    grid = Grid(stretched_axis(0.0, 400.0, 801, 100.0, 10.0), [0.0])
    m = bsm(0.05, 0.2)
    tau, h = 0.5, 1e-5
    c = black_call(grid.s, 100.0, 0.2, tau)
    theta = (black_call(grid.s, 100.0, 0.2, tau + h)
             - black_call(grid.s, 100.0, 0.2, tau - h)) / (2 * h)
    op = pide_drift_operator(m, grid, c)[:, 0]
    near = (grid.s > 60) & (grid.s < 160)
    assert np.max(np.abs(op[near] - theta[near])) <= 2e-3 * np.max(theta)


def test_operator_matches_levy_drift_condition():
    mu_s, nu_s, mu_v, nu_v, nu_sv = 0.03, 0.05, 0.1, 0.02, -0.01
    js, jv, rate = 0.15, 0.05, 0.8
    model = StochVolModel("custom", {}, mu_s=const(mu_s), nu_s=const(nu_s),
                          mu_sigma=const(mu_v), nu_sigma=const(nu_v), nu_ssigma=const(nu_sv),
                          jumps=(Jump(const(js), const(jv), const(rate)),))
    c = lambda s, v: np.exp(0.3 * s) * (1.0 + v * v)
    grid = Grid(uniform_axis(-2.0, 4.0, 601), uniform_axis(-1.0, 2.0, 301))
    s0, v0 = 1.0, 0.5
    i, j = np.argmin(np.abs(grid.s - s0)), np.argmin(np.abs(grid.sigma - v0))
    s, v = grid.mesh()
    op = pide_drift_operator(model, grid, c(s, v))[i, j]

    e = np.exp(0.3 * s0)
    cs, css = 0.3 * e * (1 + v0 ** 2), 0.09 * e * (1 + v0 ** 2)
    cv, cvv, csv = e * 2 * v0, 2 * e, 0.3 * e * 2 * v0
    mu_c = cs * mu_s + cv * mu_v + 0.5 * css * nu_s + 0.5 * cvv * nu_v + csv * nu_sv
    jc = float(c(s0 + js, v0 + jv) - c(s0, v0))
    lm = ConvexityModel.from_blocks(
        1.0, mu_s=[mu_s], nu_s=[[nu_s]], mu_c=mu_c, nu_sc=[cs * nu_s + cv * nu_sv],
        nu_c=cs * cs * nu_s + 2 * cs * cv * nu_sv + cv * cv * nu_v, jumps=[(0.0, [js], jc, rate)])
    assert op == pytest.approx(solve_drift_conditions(lm).M_c, abs=5e-4)


def bsm_call(strike, n=400, steps=400):
    grid = Grid(stretched_axis(0.0, 4 * strike if strike > 100 else 400.0, n, strike,
                               0.1 * strike), [0.0])
    prob = PideProblem(bsm(0.05, 0.2), grid, 1.0,
                       lambda s, v: np.maximum(s - strike, 0.0), n_steps=steps, query=(100.0,))
    return solve_pide(prob)


@pytest.mark.parametrize("strike", [80.0, 100.0, 120.0])
def test_bsm_matches_black(strike):
    sol = bsm_call(strike)
    assert sol.price == pytest.approx(black_call(100.0, strike, 0.2, 1.0), rel=1e-3)


def test_zero_payoff():
    grid = Grid(S_AXIS, uniform_axis(0.0, 1.0, 11))
    sol = solve_pide(PideProblem(heston(0.05, 2.0, 0.04, 0.3, -0.7, 0.04), grid, 1.0,
                                 np.zeros(grid.shape), query=(2.0,)))
    assert np.all(sol.surface == 0.0) and sol.price == 0.0


def test_grid_convergence_order():
    errs = []
    for n in (60, 120, 240):
        grid = Grid(uniform_axis(0.0, 300.0, n + 1), [0.0])
        prob = PideProblem(bsm(0.0, 0.2), grid, 0.5,
                           lambda s, v: black_call(s, 100.0, 0.2, 0.25), n_steps=2 * n,
                           rannacher_half_steps=0)
        sol = solve_pide(prob)
        exact = black_call(grid.s, 100.0, 0.2, 0.75)
        near = (grid.s >= 50) & (grid.s <= 150)
        errs.append(np.max(np.abs(sol.surface[near, 0] - exact[near])))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 1.8), orders


def parity_cases():
    yield (bsm(0.05, 0.2, [{"j": -0.2, "rate": 0.3}, {"j": 0.1, "rate": 0.5}]),
           Grid(stretched_axis(0.0, 400.0, 201, 100.0, 15.0), [0.0]), None)
    yield (heston(0.05, 2.0, 0.04, 0.3, -0.7, 0.04),
           Grid(stretched_axis(0.0, 400.0, 121, 100.0, 15.0), uniform_axis(0.0, 0.8, 41)), 0.04)
    yield (sabr(0.2, 0.4, 0.7, -0.3),
           Grid(stretched_axis(0.0, 400.0, 121, 100.0, 15.0), uniform_axis(0.0, 1.0, 41)), 0.2)


@pytest.mark.parametrize("case", list(parity_cases()), ids=["bsm", "heston", "sabr"])
def test_put_call_parity(case):
    model, grid, v0 = case
    q = (100.0,) if v0 is None else (100.0, v0)
    call = solve_pide(PideProblem(model, grid, 1.0, lambda s, v: np.maximum(s - 100.0, 0.0),
                                  n_steps=100, query=q))
    put = solve_pide(PideProblem(model, grid, 1.0, lambda s, v: np.maximum(100.0 - s, 0.0),
                                 n_steps=100, query=q))
    s, _ = grid.mesh()
    np.testing.assert_allclose(call.surface - put.surface, s - 100.0, atol=1e-9)


def test_monotone_in_payoff(rng):
    # the far-field linearity rows are not positive, hence the small tolerance
    model = heston(0.05, 2.0, 0.04, 0.3, -0.7, 0.04)
    grid = Grid(stretched_axis(0.0, 400.0, 61, 100.0, 20.0), uniform_axis(0.0, 0.8, 21))
    s, v = grid.mesh()
    for _ in range(6):
        k = rng.uniform(70, 130)
        low = np.maximum(s - k, 0.0)
        high = np.maximum(s - k + rng.uniform(1, 20), 0.0) \
            + rng.uniform(0, 3) * np.exp(-((s - rng.uniform(60, 140)) / 20) ** 2)
        a = solve_pide(PideProblem(model, grid, 1.0, low, n_steps=50, theta=1.0))
        b = solve_pide(PideProblem(model, grid, 1.0, high, n_steps=50, theta=1.0))
        assert np.min(b.surface - a.surface) >= -1e-3 * np.max(high - low)


def test_instability_is_reported():
    grid = Grid(uniform_axis(0.0, 4.0, 41), [0.0])
    jumps = [{"j": 0.5, "rate": 500.0}, {"j": -0.5, "rate": 500.0}]
    prob = PideProblem(bsm(0.0, 0.2, jumps), grid, 1.0,
                       lambda s, v: np.exp(-10.0 * (s - 1.0) ** 2), n_steps=2,
                       rannacher_half_steps=0)
    with pytest.raises(SolverError, match="instability"):
        solve_pide(prob)


def test_grid_model_mismatch():
    with pytest.raises(InputError):
        PideProblem(bsm(0.0, 0.2), Grid(S_AXIS, uniform_axis(0, 1, 5)), 1.0, np.zeros((41, 5)))


HEDGE_GRID = Grid(uniform_axis(50.0, 150.0, 201), uniform_axis(0.05, 0.5, 91))


def smooth_surfaces(rng):
    s, v = HEDGE_GRID.mesh()
    a, b, c, d = rng.uniform(0.5, 1.5, 4)
    option = a * np.exp(-((s - 100) / 40) ** 2) * (v + b * v * v) + 0.1 * s
    deriv = c * np.sin(s / 30) * np.cos(d * v) + v * s / 100
    return option, deriv


def test_complete_hedge_examples(rng):
    option, deriv = smooth_surfaces(rng)
    h = complete_hedge_weights(HEDGE_GRID, option, option, (100.0, 0.2))
    assert h.beta_o == pytest.approx(1.0, abs=1e-12) and h.beta_s == pytest.approx(0.0, abs=1e-12)
    s, v = HEDGE_GRID.mesh()
    flat = np.sin(s / 30)
    h = complete_hedge_weights(HEDGE_GRID, option, flat, (100.0, 0.2))
    assert h.beta_o == 0.0
    assert h.beta_s == pytest.approx(np.cos(100 / 30) / 30, rel=1e-4)


def test_complete_hedge_eliminates_continuous_risk(rng):
    model = heston(0.05, 2.0, 0.04, 0.3, -0.7, 0.04)
    for _ in range(10):
        option, deriv = smooth_surfaces(rng)
        state = (float(rng.uniform(80, 120)), float(rng.uniform(0.1, 0.4)))
        h = complete_hedge_weights(HEDGE_GRID, option, deriv, state)
        full = residual_variance_rate(model, HEDGE_GRID, h.beta_s, h.beta_o, deriv, option, state)
        from entropic_pricer.stochvol import sensitivities
        c = sensitivities(HEDGE_GRID, deriv, *state)
        delta = residual_variance_rate(model, HEDGE_GRID, c.d_s, 0.0, deriv, None, state)
        nu_v = 0.3 * 0.3 * state[1]
        ref = c.d_s ** 2 * state[1] * state[0] ** 2 + c.d_sigma ** 2 * nu_v
        assert abs(full.continuous) <= 1e-8 * ref
        assert delta.total == pytest.approx(c.d_sigma ** 2 * nu_v, rel=1e-12)
        assert delta.total > 0.0


def test_completeness_failure_names_state():
    s, v = HEDGE_GRID.mesh()
    with pytest.raises(CompletenessError, match="s=100.0, sigma=0.2"):
        complete_hedge_weights(HEDGE_GRID, s.copy(), np.sin(s) * v, (100.0, 0.2))


def test_tangent_jumps_leave_no_jump_risk():
    beta_s, beta_o = 0.4, 0.7
    s, v = HEDGE_GRID.mesh()
    option = s * v + v ** 2
    deriv = beta_s * s + beta_o * option
    model = StochVolModel("custom", {}, mu_s=const(0.0), nu_s=const(0.04),
                          nu_sigma=const(0.01),
                          jumps=(Jump(const(2.0), const(0.05), const(1.5)),))
    r = residual_variance_rate(model, HEDGE_GRID, beta_s, beta_o, deriv, option, (100.0, 0.2))
    assert r.jump_term == pytest.approx(0.0, abs=1e-18 + 1e-12 * 100.0)

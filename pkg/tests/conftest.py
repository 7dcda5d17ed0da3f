import numpy as np
import pytest
from scipy.optimize import brentq

from entropic_pricer.calibration import find_static_arbitrage
from entropic_pricer.tree import child_returns

ACCEPTANCE_RESULTS = {}


def random_instance(rng, n_assets=None, n_scen=None, spread=1.0):
    """Random scenario weights and returns admitting an equivalent martingale measure."""
    while True:
        d = int(n_assets or rng.integers(1, 4))
        n = int(n_scen or rng.integers(d + 2, 11))
        w = rng.dirichlet(np.ones(n))
        r = rng.normal(scale=spread, size=(n, d))
        r += rng.normal(scale=0.3 * spread, size=d)
        if find_static_arbitrage(w, r) is None:
            return w, r


def oracle_tilts(tree):
    """Per-node tilted child weights from a bracketing root solve (one underlying)."""
    out = {}
    for k, node in tree.nodes.items():
        if node.is_leaf:
            continue
        w, r = child_returns(tree, k)
        x = r[:, 0]
        g = lambda a: float(np.sum(w * x * np.exp(-a * x)))
        lim = 50.0 / np.max(np.abs(x))
        a = 0.0 if g(0.0) == 0.0 else brentq(g, -lim, lim, xtol=1e-15, rtol=1e-15)
        t = w * np.exp(-a * x)
        out[k] = t / t.sum()
    return out


def record(key, title, passed, detail):
    """Store one acceptance outcome for the summary and echo it."""
    ACCEPTANCE_RESULTS[key] = (bool(passed), title, detail)
    print(f"{key} {'PASS' if passed else 'FAIL'}  {title}: {detail}")
    return bool(passed)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS):
        passed, title, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"{key} {'PASS' if passed else 'FAIL'}  {title}: {detail}")

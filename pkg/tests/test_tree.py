import json

import numpy as np
import pytest

from entropic_pricer import (FundingArrangement, InputError, MarketSlice, ScenarioMeasure,
                             calibrate, fair_price_one_period, load_tree_json, price_on_tree)
from entropic_pricer.tree import (ScenarioTree, TreeNode, child_returns, path_enumeration_price,
                                  random_tree, write_tree_json)
from conftest import oracle_tilts

UNC = FundingArrangement("uncollateralised")


def binomial(weights=(0.5, 0.5), periods=2, move=1.0, payoff=lambda p: max(p - 100.0, 0.0)):
    nodes = {}

    def build(nid, t, p):
        if t == periods:
            nodes[nid] = TreeNode(nid, float(t), np.array([p]), np.array([1.0]), 1.0,
                                  terminal=payoff(p))
            return
        kids = ((nid + "u", weights[0]), (nid + "d", weights[1]))
        build(nid + "u", t + 1, p + move)
        build(nid + "d", t + 1, p - move)
        nodes[nid] = TreeNode(nid, float(t), np.array([p]), np.array([1.0]), 1.0, children=kids)

    build("r", 0, 100.0)
    return ScenarioTree(nodes)


def test_one_period_matches_fair_price():
    tree = binomial((0.6, 0.4), periods=1)
    pricing = price_on_tree(tree, UNC)
    m = ScenarioMeasure(("u", "d"), [0.6, 0.4])
    s = MarketSlice(p0=[100.0], p1=[[101.0], [99.0]])
    expected = fair_price_one_period(m, s, [1.0, 0.0], calibrate(m, s))
    assert pricing.root_price == pytest.approx(expected, abs=1e-14)


def test_two_period_symmetric():
    assert price_on_tree(binomial(), UNC).root_price == pytest.approx(0.5, abs=1e-14)


def test_two_period_skewed_matches_enumeration():
    tree = binomial((0.6, 0.4))
    pricing = price_on_tree(tree, UNC)
    assert pricing.root_price == pytest.approx(
        path_enumeration_price(tree, UNC, oracle_tilts(tree)), abs=1e-10)
    for k, a in pricing.alphas.items():
        assert a[0] == pytest.approx(0.5 * np.log(1.5), abs=1e-10)


@pytest.mark.parametrize("kind", ["futures", "cleared", "collateralised", "uncollateralised"])
def test_random_trees_match_enumeration(kind):
    rng = np.random.default_rng(5)
    for periods, branches in ((3, 3), (4, 2)):
        tree = random_tree(rng, periods, branches, rate=0.01)
        collateral = None
        if kind == "collateralised":
            collateral = {k: float(1.0 + 0.01 * n.time + 0.001 * i)
                          for i, (k, n) in enumerate(sorted(tree.nodes.items()))}
        arr = FundingArrangement(kind, rate=0.02 if kind == "cleared" else None,
                                 collateral=collateral)
        pricing = price_on_tree(tree, arr)
        oracle = path_enumeration_price(tree, arr, oracle_tilts(tree))
        assert pricing.root_price == pytest.approx(oracle, rel=1e-10, abs=1e-10)


def test_cleared_funding_compounds():
    tree = binomial(periods=3)
    from entropic_pricer.tree import node_funding
    b = node_funding(tree, FundingArrangement("cleared", rate=0.04))
    assert b["ruuu"] == pytest.approx(1.04 ** 3, rel=1e-15)


def test_underlying_reprices():
    rng = np.random.default_rng(9)
    tree = random_tree(rng, 3, 3, rate=0.02)
    collateral = {k: float(n.q[0]) for k, n in tree.nodes.items()}
    arr = FundingArrangement("collateralised", collateral=collateral)
    pricing = price_on_tree(tree, arr, payoff=lambda node: float(node.p[0]))
    for k, node in tree.nodes.items():
        assert pricing.prices[k] == pytest.approx(node.p[0], rel=1e-10)


def test_threads_give_identical_prices():
    tree = random_tree(np.random.default_rng(3), 4, 3)
    one = price_on_tree(tree, UNC)
    many = price_on_tree(tree, UNC, threads=4)
    assert one.prices == many.prices


def test_json_round_trip(tmp_path):
    tree = random_tree(np.random.default_rng(4), 2, 3)
    path = tmp_path / "tree.json"
    write_tree_json(tree, path)
    back = load_tree_json(path)
    assert price_on_tree(back, UNC).root_price == price_on_tree(tree, UNC).root_price


def test_tree_validation():
    good = binomial(periods=1).to_json()
    bad = json.loads(json.dumps(good))
    bad["nodes"][0]["children"][0]["weight"] = 0.7
    with pytest.raises(InputError, match="sum"):
        load_tree_json(bad)
    bad = json.loads(json.dumps(good))
    bad["nodes"][1]["time"] = 0.0
    with pytest.raises(InputError, match="time"):
        load_tree_json(bad)
    bad = json.loads(json.dumps(good))
    bad["nodes"][1]["slice"]["u"] = 0.0
    with pytest.raises(InputError, match="positive"):
        load_tree_json(bad)


def test_node_failure_is_named():
    tree = binomial(periods=2)
    nodes = dict(tree.nodes)
    ru = nodes["ru"]
    nodes["ru"] = TreeNode("ru", ru.time, np.array([98.0]), ru.q, ru.u, children=ru.children)
    with pytest.raises(Exception, match="'ru'"):
        price_on_tree(ScenarioTree(nodes), UNC)

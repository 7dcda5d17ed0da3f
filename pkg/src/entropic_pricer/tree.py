"""Scenario trees and multi-period pricing by backward induction.

Every node carries the prices observed there: underlyings ``p`` with their
funding prices ``q``, the unsecured funding price ``u`` and optionally the
derivative funding price ``b``.  Pricing calibrates one exponential kernel
per internal node over that node's children.
"""

from __future__ import annotations

import itertools
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .calibration import FundingArrangement, FundingKind, calibrate_returns
from .errors import ConfigurationError, InputError, PricerError
from .scenario import _read_json

log = logging.getLogger(__name__)

CHILD_WEIGHT_TOL = 1e-12


@dataclass(frozen=True)
class TreeNode:
    id: str
    time: float
    p: np.ndarray
    q: np.ndarray
    u: float = 1.0
    b: float | None = None
    children: tuple = ()           # ((child_id, weight), ...)
    terminal: float | None = None

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass
class ScenarioTree:
    """Finite-branching tree of market states keyed by node id."""

    nodes: dict
    root: str = field(init=False)
    depth: dict = field(init=False, repr=False)

    def __post_init__(self):
        children = {c for n in self.nodes.values() for c, _ in n.children}
        missing = children - set(self.nodes)
        if missing:
            raise InputError(f"tree: unknown child ids {sorted(missing)}")
        roots = [k for k in self.nodes if k not in children]
        if len(roots) != 1:
            raise InputError(f"tree: expected exactly one root, found {roots}")
        self.root = roots[0]
        depth = {self.root: 0}
        order = [self.root]
        for k in order:
            node = self.nodes[k]
            for c, _ in node.children:
                if c in depth:
                    raise InputError(f"tree: node {c!r} has more than one parent")
                if not self.nodes[c].time > node.time:
                    raise InputError(f"tree: time does not increase from {k!r} to {c!r}")
                depth[c] = depth[k] + 1
                order.append(c)
        if len(depth) != len(self.nodes):
            raise InputError("tree: unreachable nodes")
        self.depth = depth
        for k, node in self.nodes.items():
            if node.children:
                total = sum(w for _, w in node.children)
                if abs(total - 1.0) > CHILD_WEIGHT_TOL:
                    raise InputError(f"node {k!r}: child weights sum to {total!r}")
                if any(w < 0.0 for _, w in node.children):
                    raise InputError(f"node {k!r}: negative child weight")
            if np.any(node.q <= 0.0) or node.u <= 0.0 or (node.b is not None and node.b <= 0.0):
                raise InputError(f"node {k!r}: funding prices must be strictly positive")
            if node.p.shape != node.q.shape:
                raise InputError(f"node {k!r}: p and q must have equal dimension")

    @property
    def n_periods(self) -> int:
        return max(self.depth.values())

    def levels(self) -> list:
        out = [[] for _ in range(self.n_periods + 1)]
        for k, d in self.depth.items():
            out[d].append(k)
        return out

    def leaves(self) -> list:
        return [k for k, n in self.nodes.items() if n.is_leaf]

    def paths(self):
        """Yield ``(node_ids, probability)`` for every root-to-leaf path."""
        def walk(k, trail, prob):
            node = self.nodes[k]
            if node.is_leaf:
                yield trail, prob
                return
            for c, w in node.children:
                yield from walk(c, trail + (c,), prob * w)
        yield from walk(self.root, (self.root,), 1.0)

    def to_json(self) -> dict:
        nodes = []
        for k in sorted(self.nodes, key=lambda x: (self.depth[x], str(x))):
            n = self.nodes[k]
            sl = {"p": n.p.tolist(), "q": n.q.tolist(), "u": n.u}
            if n.b is not None:
                sl["b"] = n.b
            entry = {"id": n.id, "time": n.time,
                     "children": [{"id": c, "weight": w} for c, w in n.children], "slice": sl}
            if n.terminal is not None:
                entry["terminal"] = n.terminal
            nodes.append(entry)
        return {"nodes": nodes}


def load_tree_json(source) -> ScenarioTree:
    data = _read_json(source)
    if "nodes" not in data or not isinstance(data["nodes"], list):
        raise InputError("tree: 'nodes' list is required")
    terminal_map = data.get("terminal", {})
    nodes = {}
    for i, entry in enumerate(data["nodes"]):
        try:
            nid = str(entry["id"])
            sl = entry.get("slice", {})
            p = np.atleast_1d(np.asarray(sl["p"], dtype=float))
            q = np.atleast_1d(np.asarray(sl.get("q", np.ones_like(p)), dtype=float))
            kids = tuple((str(c["id"]), float(c["weight"])) for c in entry.get("children", []))
            term = entry.get("terminal", terminal_map.get(nid))
            node = TreeNode(nid, float(entry["time"]), p, q, float(sl.get("u", 1.0)),
                            None if sl.get("b") is None else float(sl["b"]), kids,
                            None if term is None else float(term))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"tree node #{i}: {exc!r}") from exc
        if nid in nodes:
            raise InputError(f"tree: duplicate node id {nid!r}")
        nodes[nid] = node
    return ScenarioTree(nodes)


def node_funding(tree: ScenarioTree, arrangement: FundingArrangement) -> dict:
    """Derivative funding price ``b`` at every node under the arrangement."""
    kind = arrangement.kind
    b = {}
    for level in tree.levels():
        for k in level:
            node = tree.nodes[k]
            if kind is FundingKind.FUTURES:
                b[k] = 1.0
            elif kind is FundingKind.UNCOLLATERALISED:
                b[k] = node.u
            elif kind is FundingKind.COLLATERALISED:
                if arrangement.collateral is not None and k in arrangement.collateral:
                    b[k] = float(arrangement.collateral[k])
                elif node.b is not None:
                    b[k] = node.b
                else:
                    raise ConfigurationError(f"node {k!r}: collateral price b missing")
            else:
                b[k] = 1.0 if k == tree.root else None
    if kind is FundingKind.CLEARED:
        for level in tree.levels():
            for k in level:
                for c, _ in tree.nodes[k].children:
                    dt = tree.nodes[c].time - tree.nodes[k].time
                    b[c] = b[k] * (1.0 + arrangement.rate * dt)
    return b


def child_returns(tree: ScenarioTree, k: str) -> tuple:
    """Child weights and normalised underlying returns seen from node ``k``."""
    node = tree.nodes[k]
    weights = np.array([w for _, w in node.children])
    r = np.array([(tree.nodes[c].q / tree.nodes[c].u) * (tree.nodes[c].p / tree.nodes[c].q
                                                         - node.p / node.q)
                  for c, _ in node.children])
    return weights, r


@dataclass(frozen=True)
class TreePricing:
    prices: dict        # node id -> derivative price a
    funding: dict       # node id -> b
    alphas: dict        # internal node id -> calibrated alpha
    kernels: dict       # internal node id -> TiltKernel over children
    root: str

    @property
    def root_price(self) -> float:
        return self.prices[self.root]

    def table(self, tree: ScenarioTree) -> list:
        rows = []
        for level in tree.levels():
            for k in sorted(level, key=str):
                row = {"id": k, "time": tree.nodes[k].time, "price": self.prices[k],
                       "b": self.funding[k]}
                if k in self.alphas:
                    row["alpha"] = self.alphas[k].tolist()
                rows.append(row)
        return rows


def price_on_tree(tree: ScenarioTree, arrangement: FundingArrangement, *,
                  payoff: Mapping | Callable | None = None, max_iter: int = 50,
                  tol: float = 1e-10, threads: int = 1) -> TreePricing:
    """Backward induction with one calibrated exponential kernel per node.

    ``payoff`` overrides the leaf ``terminal`` values; it may be a mapping
    from leaf id to value or a callable taking the leaf :class:`TreeNode`.
    """
    b = node_funding(tree, arrangement)
    value = {}
    for k in tree.leaves():
        node = tree.nodes[k]
        if payoff is None:
            v = node.terminal
        elif callable(payoff):
            v = payoff(node)
        else:
            v = payoff.get(k)
        if v is None:
            raise InputError(f"leaf {k!r}: terminal payoff missing")
        value[k] = float(v)

    alphas, kernels = {}, {}

    def solve(k):
        weights, r = child_returns(tree, k)
        try:
            return calibrate_returns(weights, r, max_iter=max_iter, tol=tol)
        except PricerError as exc:
            raise type(exc)(f"node {k!r}: {exc}") from exc

    levels = tree.levels()
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for level in reversed(levels[:-1]):
            internal = [k for k in level if not tree.nodes[k].is_leaf]
            results = list(pool.map(solve, internal)) if pool else [solve(k) for k in internal]
            for k, kernel in zip(internal, results):
                node = tree.nodes[k]
                weights = np.array([w for _, w in node.children])
                ids = [c for c, _ in node.children]
                rho = np.array([b[c] / tree.nodes[c].u for c in ids])
                ratio = np.array([value[c] / b[c] for c in ids])
                t = weights * kernel.values * rho
                assert np.all(kernel.values > 0.0)
                value[k] = b[k] * float(t @ ratio) / float(t.sum())
                alphas[k] = kernel.alpha
                kernels[k] = kernel
    finally:
        if pool:
            pool.shutdown()
    return TreePricing(value, b, alphas, kernels, tree.root)


def path_enumeration_price(tree: ScenarioTree, arrangement: FundingArrangement,
                           tilted: Mapping, *, payoff: Mapping | None = None) -> float:
    """Root price as a sum over paths of products of per-period factors.

    ``tilted`` maps each internal node to its tilted child weights.  Each
    factor is the tilted child weight times ``b/u`` normalised over siblings.
    """
    b = node_funding(tree, arrangement)
    total = 0.0
    for path, _ in tree.paths():
        prod = 1.0
        for parent, child in zip(path[:-1], path[1:]):
            node = tree.nodes[parent]
            ids = [c for c, _ in node.children]
            tw = np.asarray(tilted[parent], dtype=float)
            rho = np.array([b[c] / tree.nodes[c].u for c in ids])
            j = ids.index(child)
            prod *= tw[j] * rho[j] / float(tw @ rho)
        leaf = path[-1]
        a = tree.nodes[leaf].terminal if payoff is None else payoff[leaf]
        total += prod * a / b[leaf]
    return b[tree.root] * total


def random_tree(rng: np.random.Generator, n_periods: int, n_branches: int, *,
                p0: float = 100.0, rate: float = 0.0, dt: float = 1.0,
                payoff: Callable | None = None) -> ScenarioTree:
    """Random arbitrage-free non-recombining tree on one underlying.

    Child moves straddle zero so each node admits an equivalent martingale measure.
    """
    payoff = payoff or (lambda p: max(p - p0, 0.0))
    nodes = {}
    counter = itertools.count()

    def build(nid, t, p, u, depth):
        if depth == n_periods:
            nodes[nid] = TreeNode(nid, t, np.array([p]), np.array([u]), u, None, (),
                                  float(payoff(p)))
            return
        w = rng.dirichlet(np.ones(n_branches))
        w[-1] = 1.0 - w[:-1].sum()
        moves = rng.uniform(0.02, 0.15, n_branches)
        signs = np.ones(n_branches)
        signs[: max(1, n_branches // 2)] = -1.0
        rng.shuffle(signs)
        u_next = u * (1.0 + rate * dt)
        kids = []
        for j in range(n_branches):
            cid = f"n{next(counter)}"
            # q = u makes the return sign follow the discounted price move
            build(cid, t + dt, p * (1.0 + rate * dt) * (1.0 + signs[j] * moves[j]), u_next,
                  depth + 1)
            kids.append((cid, float(w[j])))
        nodes[nid] = TreeNode(nid, t, np.array([p]), np.array([u]), u, None, tuple(kids))

    build("root", 0.0, p0, 1.0, 0)
    return ScenarioTree(nodes)


def write_tree_json(tree: ScenarioTree, path) -> None:
    Path(path).write_text(json.dumps(tree.to_json(), indent=2))

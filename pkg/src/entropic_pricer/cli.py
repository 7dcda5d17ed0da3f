"""Command-line interface: ``entropic-pricer <command> --input role=PATH ...``.

Exit codes: 0 success, 1 input error, 2 numerical non-convergence,
3 internal failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .backtest import run_backtest
from .calibration import (FundingArrangement, calibrate, fair_price_one_period, kernel_kl)
from .errors import (CompletenessError, ConvergenceError, DegenerateReplicationError,
                     InputError, MagnitudeError, PreconditionError, RankError,
                     SolverError)
from .portfolio import (ReturnMoments, check_no_arbitrage, frontier_slope, hedge_weights,
                        incremental_sharpe, moments_from_measure, optimal_portfolio,
                        two_sector_hedge)
from .scenario import _read_json, load_scenario_json, load_slice_json
from .stochvol import Grid, PideProblem, model_from_json, solve_pide, stretched_axis, uniform_axis
from .tree import load_tree_json, price_on_tree

log = logging.getLogger("entropic_pricer")

ROLES = ("scenario", "slice", "tree", "model", "moments", "problem")
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO,
              "debug": logging.DEBUG}
DEFAULTS = {"seed": 0, "tol": 1e-10, "threads": 1, "format": "json", "out": None,
            "max_iter": 50, "n_paths": 10_000}


class UsageError(InputError):
    pass


def _parse_inputs(items) -> dict:
    out = {}
    for item in items or ():
        role, sep, path = item.partition("=")
        if not sep or role not in ROLES:
            raise UsageError(f"--input expects role=PATH with role in {ROLES}, got {item!r}")
        out[role] = path
    return out


def resolve_config(args) -> dict:
    """Merge defaults, the ``--config`` file and flags; flags win."""
    cfg = dict(DEFAULTS)
    cfg["inputs"] = {}
    if args.config:
        data = _read_json(args.config)
        unknown = set(data) - set(DEFAULTS) - {"inputs", "options"}
        if unknown:
            raise UsageError(f"config: unknown keys {sorted(unknown)}")
        cfg.update({k: v for k, v in data.items() if k != "inputs"})
        cfg["inputs"].update(data.get("inputs", {}))
    cfg["inputs"].update(_parse_inputs(args.input))
    for key in ("seed", "tol", "threads", "format", "out", "max_iter", "n_paths"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    cfg["command"] = args.command
    seed = cfg["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2 ** 64:
        raise UsageError("seed must be an unsigned 64-bit integer")
    if not float(cfg["tol"]) > 0.0:
        raise UsageError("tol must be positive")
    if int(cfg["threads"]) < 1:
        raise UsageError("threads must be at least 1")
    if cfg["format"] not in ("json", "csv"):
        raise UsageError("format must be json or csv")
    for role, path in cfg["inputs"].items():
        if role not in ROLES:
            raise UsageError(f"config: unknown input role {role!r}")
        if not Path(path).is_file():
            raise UsageError(f"input {role}: no such file {path!r}")
    return cfg


def _need(cfg, *roles):
    missing = [r for r in roles if r not in cfg["inputs"]]
    if missing:
        raise UsageError(f"{cfg['command']}: missing --input for {missing}")
    return [cfg["inputs"][r] for r in roles]


def _tolist(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, dict):
        return {k: _tolist(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_tolist(v) for v in x]
    return x


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _load_market(cfg):
    scen_path, = _need(cfg, "scenario")
    scen_data = _read_json(scen_path)
    measure = load_scenario_json(scen_data)
    if "slice" in cfg["inputs"]:
        slice_data = _read_json(cfg["inputs"]["slice"])
    elif "slice" in scen_data:
        slice_data = scen_data["slice"]
    else:
        raise UsageError(f"{cfg['command']}: a slice is required (--input slice=PATH)")
    market = load_slice_json(slice_data)
    market.validate_domain(measure.scenario_ids)
    return measure, market, slice_data


def _derivative_end(measure, slice_data):
    d = slice_data.get("a1", slice_data.get("derivative"))
    if d is None:
        return None
    return measure.observable(d) if isinstance(d, str) else np.asarray(d, dtype=float)


def cmd_calibrate(cfg):
    measure, market, _ = _load_market(cfg)
    kernel = calibrate(measure, market, max_iter=int(cfg["max_iter"]), tol=float(cfg["tol"]))
    result = {"alpha": kernel.alpha, "kernel_weights": kernel.values,
              "kl": kernel_kl(measure, kernel), "iterations": kernel.iterations,
              "residual_norm": kernel.residual_norm}
    rows = [["scenario", "weight", "kernel", "tilted_weight"]]
    tilted = kernel.tilted_weights(measure)
    for sid, w, k, t in zip(measure.scenario_ids, measure.weights, kernel.values, tilted):
        rows.append([str(sid), _fmt(w), _fmt(k), _fmt(t)])
    return result, {"kernel": rows}


def _arrangement(cfg, tree_data):
    data = tree_data.get("arrangement", {"kind": "uncollateralised"})
    return FundingArrangement.from_json(data)


def cmd_price(cfg):
    if "tree" in cfg["inputs"]:
        path, = _need(cfg, "tree")
        data = _read_json(path)
        tree = load_tree_json(data)
        arrangement = _arrangement(cfg, data)
        pricing = price_on_tree(tree, arrangement, max_iter=int(cfg["max_iter"]),
                                tol=float(cfg["tol"]), threads=int(cfg["threads"]))
        table = pricing.table(tree)
        rows = [["id", "time", "price", "b", "alpha"]]
        for r in table:
            rows.append([r["id"], _fmt(r["time"]), _fmt(r["price"]), _fmt(r["b"]),
                         ";".join(_fmt(a) for a in r.get("alpha", []))])
        return ({"root_price": pricing.root_price, "arrangement": arrangement.to_json(),
                 "nodes": table}, {"nodes": rows})
    measure, market, slice_data = _load_market(cfg)
    a1 = _derivative_end(measure, slice_data)
    if a1 is None:
        raise UsageError("price: the slice needs 'a1' (values or observable name)")
    kernel = calibrate(measure, market, max_iter=int(cfg["max_iter"]), tol=float(cfg["tol"]))
    a0 = fair_price_one_period(measure, market, a1, kernel)
    return {"price": a0, "alpha": kernel.alpha, "iterations": kernel.iterations}, \
        {"price": [["price"], [_fmt(a0)]]}


def _moments(cfg):
    if "moments" in cfg["inputs"]:
        return ReturnMoments.from_json(_read_json(cfg["inputs"]["moments"]))
    measure, market, slice_data = _load_market(cfg)
    a1 = _derivative_end(measure, slice_data)
    a0 = slice_data.get("a0")
    if a1 is not None and a0 is None:
        raise UsageError("slice: 'a0' is required with 'a1'")
    return moments_from_measure(measure, market, a1, a0)


def cmd_hedge(cfg):
    mom = _moments(cfg)
    h = hedge_weights(mom)
    result = {"beta": h.weights, "residual_mean": h.residual_mean,
              "residual_variance": h.residual_variance}
    try:
        base, inc = incremental_sharpe(mom)
        result.update(base_sharpe_squared=base, incremental_sharpe_squared=inc)
    except DegenerateReplicationError as exc:
        result["incremental_sharpe_error"] = str(exc)
    if mom.has_second_sector:
        two = two_sector_hedge(mom)
        result["two_sector"] = {"beta_p": two.beta_p, "beta_o": two.beta_o,
                                "residual_variance": two.residual_variance}
    rows = [["asset", "beta"]] + [[str(i), _fmt(b)] for i, b in enumerate(h.weights)]
    return result, {"hedge": rows}


def cmd_frontier(cfg):
    mom = _moments(cfg)
    check = check_no_arbitrage(mom)
    if not check.passed:
        raise RankError(f"covariance admits an arbitrage portfolio {check.witness.tolist()}")
    w = optimal_portfolio(mom)
    slope = frontier_slope(mom)
    rows = [["asset", "weight"]] + [[str(i), _fmt(x)] for i, x in enumerate(w)]
    return {"slope": slope, "weights": w}, {"frontier": rows}


def _axis(spec, name):
    if isinstance(spec, list):
        return np.asarray(spec, dtype=float)
    if not isinstance(spec, dict):
        raise UsageError(f"grid.{name}: expected a list or an axis object")
    try:
        if "center" in spec:
            return stretched_axis(spec["lo"], spec["hi"], int(spec["n"]), spec["center"],
                                  spec.get("intensity", 0.1 * spec["center"]))
        return uniform_axis(spec["lo"], spec["hi"], int(spec["n"]))
    except KeyError as exc:
        raise UsageError(f"grid.{name}: missing {exc}") from None


def _payoff(spec):
    kind = spec.get("type", "call")
    k = float(spec.get("strike", 0.0))
    table = {"call": lambda s, v: np.maximum(s - k, 0.0),
             "put": lambda s, v: np.maximum(k - s, 0.0),
             "digital": lambda s, v: (s > k).astype(float),
             "forward": lambda s, v: s - k}
    if kind not in table:
        raise UsageError(f"payoff: unknown type {kind!r}")
    return table[kind]


def cmd_pide(cfg):
    model_path, = _need(cfg, "model")
    model_data = _read_json(model_path)
    problem_data = dict(model_data.pop("problem", {}))
    if "problem" in cfg["inputs"]:
        problem_data.update(_read_json(cfg["inputs"]["problem"]))
    model = model_from_json(model_data)
    grid_spec = problem_data.get("grid", {})
    s_axis = _axis(grid_spec.get("s", {"lo": 0.0, "hi": 400.0, "n": 400, "center": 100.0}), "s")
    default_v = [model.initial_sigma] if not model.has_sigma else \
        {"lo": 0.0, "hi": 5.0 * (model.initial_sigma or 0.2), "n": 81}
    v_axis = _axis(grid_spec.get("sigma", default_v), "sigma") if model.has_sigma \
        else np.array([float(model.params.get("sigma", 0.0))])
    grid = Grid(s_axis, v_axis)
    query = (float(problem_data.get("s0", 100.0)),)
    if model.has_sigma:
        query += (float(problem_data.get("sigma0", model.initial_sigma)),)
    problem = PideProblem(model, grid, float(problem_data.get("maturity", 1.0)),
                          _payoff(problem_data.get("payoff", {"type": "call", "strike": 100.0})),
                          n_steps=int(problem_data.get("n_steps", 400)),
                          theta=float(problem_data.get("theta", 0.5)), query=query)
    sol = solve_pide(problem)
    rows = [["s"] + [_fmt(v) for v in grid.sigma]]
    for i, s in enumerate(grid.s):
        rows.append([_fmt(s)] + [_fmt(x) for x in sol.surface[i]])
    result = {"price": sol.price, "query": list(query), "diagnostics": sol.diagnostics,
              "model": model.to_json(), "grid_shape": list(grid.shape)}
    return result, {"surface_t0": rows}


def cmd_backtest(cfg):
    path, = _need(cfg, "tree")
    data = _read_json(path)
    tree = load_tree_json(data)
    ledger = run_backtest(tree, _arrangement(cfg, data), n_paths=int(cfg["n_paths"]),
                          seed=int(cfg["seed"]), tol=float(cfg["tol"]))
    return ledger.summary_json(), {"ledger": ledger.to_csv()}


COMMANDS = {"calibrate": cmd_calibrate, "price": cmd_price, "hedge": cmd_hedge,
            "frontier": cmd_frontier, "pide": cmd_pide, "backtest": cmd_backtest}


def _write_tables(out: Path, tables: dict):
    for name, rows in tables.items():
        target = out / f"{name}.csv"
        if isinstance(rows, str):
            target.write_text(rows)
            continue
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(rows)
        target.write_text(buf.getvalue())


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; the contract reserves 2 for numerics
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: input error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="entropic-pricer",
                     description="Entropy-calibrated pricing and hedging")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--input", action="append", metavar="ROLE=PATH",
                       help=f"input file tagged with a role: {', '.join(ROLES)}")
        p.add_argument("--out", metavar="DIR")
        p.add_argument("--seed", type=int)
        p.add_argument("--tol", type=float)
        p.add_argument("--threads", type=int)
        p.add_argument("--format", choices=("json", "csv"))
        p.add_argument("--config", metavar="PATH")
        p.add_argument("--max-iter", dest="max_iter", type=int)
        if name == "backtest":
            p.add_argument("--n-paths", dest="n_paths", type=int)
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, (ConvergenceError, SolverError, MagnitudeError)):
        return 2
    if isinstance(exc, (InputError, RankError, PreconditionError, CompletenessError,
                        DegenerateReplicationError, FileNotFoundError, KeyError)):
        return 1
    return 3


def main(argv=None) -> int:
    level = os.environ.get("ENTROPIC_PRICER_LOG", "warn").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        result, tables = COMMANDS[args.command](cfg)
        report = {"command": args.command, "version": __version__, "config": cfg,
                  "result": _tolist(result)}
        text = json.dumps(_tolist(report), indent=2, sort_keys=True, allow_nan=True) + "\n"
        if cfg["out"]:
            out = Path(cfg["out"])
            out.mkdir(parents=True, exist_ok=True)
            (out / f"{args.command}.json").write_text(text)
            if cfg["format"] == "csv" or args.command in ("backtest", "pide"):
                _write_tables(out, tables)
        else:
            sys.stdout.write(text)
        return 0
    except Exception as exc:
        code = _exit_code(exc)
        kind = {1: "input error", 2: "non-convergence", 3: "internal failure"}[code]
        print(f"entropic-pricer: {kind}: {exc}", file=sys.stderr)
        if code == 3:
            log.debug("traceback", exc_info=True)
        return code


if __name__ == "__main__":
    sys.exit(main())

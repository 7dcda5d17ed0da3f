import json
import math
import subprocess
import sys
from pathlib import Path

import pytest

from entropic_pricer import cli

DATA = Path(__file__).parent / "data"


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, (json.loads(out.out) if code == 0 and out.out else None), out.err


def test_calibrate_fixture(capsys):
    code, report, _ = run(capsys, "calibrate", "--input", f"scenario={DATA / 'two_scenario.json'}")
    assert code == 0
    res = report["result"]
    assert res["alpha"][0] == pytest.approx(0.202733, abs=1e-6)
    assert res["kl"] == pytest.approx(0.020411, abs=1e-6)
    assert report["version"] and report["config"]["seed"] == 0
    assert report["config"]["inputs"]["scenario"].endswith("two_scenario.json")


def test_calibrate_already_calibrated(capsys):
    code, report, _ = run(capsys, "calibrate", "--input", f"scenario={DATA / 'calibrated.json'}")
    assert code == 0
    assert report["result"]["alpha"] == [0.0] and report["result"]["iterations"] <= 1


def test_input_errors_exit_1(capsys, tmp_path):
    code, _, err = run(capsys, "calibrate", "--input", f"scenario={DATA / 'bad_weights.json'}")
    assert code == 1 and "weights" in err
    broken = tmp_path / "broken.json"
    broken.write_text('{"scenarios": ["a"],\n "weights": [1.0,,]}')
    code, _, err = run(capsys, "calibrate", "--input", f"scenario={broken}")
    assert code == 1 and "line 2" in err
    code, _, err = run(capsys, "calibrate", "--input", f"scenario={tmp_path / 'none.json'}")
    assert code == 1 and "no such file" in err
    code, _, err = run(capsys, "calibrate", "--input", "weird=x")
    assert code == 1
    code, _, _ = run(capsys, "calibrate", "--seed", str(2 ** 64),
                     "--input", f"scenario={DATA / 'two_scenario.json'}")
    assert code == 1
    with pytest.raises(SystemExit) as info:
        cli.main(["calibrate", "--bogus"])
    assert info.value.code == 1


def test_non_convergence_exit_2(capsys):
    code, _, err = run(capsys, "calibrate", "--input", f"scenario={DATA / 'arbitrage.json'}")
    assert code == 2 and "arbitrage" in err


def test_internal_failure_exit_3(capsys, monkeypatch):
    def boom(cfg):
        raise RuntimeError("unexpected")
    monkeypatch.setitem(cli.COMMANDS, "frontier", boom)
    code, _, err = run(capsys, "frontier", "--input", f"moments={DATA / 'diag_moments.json'}")
    assert code == 3 and "internal failure" in err


def test_price_and_hedge(capsys):
    code, report, _ = run(capsys, "price", "--input", f"scenario={DATA / 'two_scenario.json'}")
    assert code == 0 and report["result"]["price"] == pytest.approx(0.5, abs=1e-12)
    code, report, _ = run(capsys, "hedge", "--input", f"moments={DATA / 'diag_moments.json'}")
    assert code == 0
    assert report["result"]["beta"] == pytest.approx([0.5, 3.0])


def test_frontier_fixture(capsys):
    code, report, _ = run(capsys, "frontier", "--input", f"moments={DATA / 'diag_moments.json'}")
    assert code == 0
    assert report["result"]["slope"] == pytest.approx(0.360555, abs=1e-6)
    assert report["result"]["weights"] == pytest.approx([1.5, 2.0])


def test_pide_fixture(tmp_path, capsys):
    code, _, _ = run(capsys, "pide", "--input", f"model={DATA / 'bsm_model.json'}",
                     "--out", str(tmp_path))
    assert code == 0
    report = json.loads((tmp_path / "pide.json").read_text())
    assert report["result"]["price"] == pytest.approx(7.9656, rel=1e-3)
    assert (tmp_path / "surface_t0.csv").read_text().startswith("s,")


def test_tree_price(capsys):
    code, report, _ = run(capsys, "price", "--input", f"tree={DATA / 'tree.json'}",
                          "--threads", "2")
    assert code == 0 and math.isfinite(report["result"]["root_price"])


def test_backtest_byte_identical(tmp_path):
    argv = ["backtest", "--input", f"tree={DATA / 'tree.json'}", "--seed", "11",
            "--n-paths", "2000", "--out", str(tmp_path)]
    snapshots = []
    for _ in range(2):
        assert cli.main(argv) == 0
        snapshots.append({n: (tmp_path / n).read_bytes() for n in ("ledger.csv", "backtest.json")})
    assert snapshots[0] == snapshots[1]
    assert snapshots[0]["ledger.csv"].startswith(b"path,period,node,beta,")


def test_config_file_and_flag_precedence(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 5, "tol": 1e-9,
                               "inputs": {"scenario": str(DATA / "two_scenario.json")}}))
    code, report, _ = run(capsys, "calibrate", "--config", str(cfg), "--seed", "9")
    assert code == 0
    assert report["config"]["seed"] == 9 and report["config"]["tol"] == 1e-9


def test_floats_round_trip(capsys):
    code, report, _ = run(capsys, "calibrate", "--input", f"scenario={DATA / 'two_scenario.json'}")
    from entropic_pricer import ScenarioMeasure, calibrate, MarketSlice
    k = calibrate(ScenarioMeasure(("up", "down"), [0.6, 0.4]),
                  MarketSlice(p0=[100.0], p1=[[101.0], [99.0]]))
    assert report["result"]["alpha"][0] == float(k.alpha[0])


def test_console_script_runs():
    proc = subprocess.run([sys.executable, "-m", "entropic_pricer.cli", "frontier", "--input",
                           f"moments={DATA / 'diag_moments.json'}"], capture_output=True,
                          text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["command"] == "frontier"

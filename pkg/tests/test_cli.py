import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import tiny_problem
from gridmpc import cli, oracle
from gridmpc.scenario import SHIPPED
from gridmpc.trace import COLUMNS, read_csv


def tiny_doc(d2=10.0):
    return {
        "name": "tiny",
        "network": {"nodes": [1, 2], "edges": [[1, 2], [2, 1]], "horizon": 1},
        "generators": [{"node": 1, "alpha": 2.0, "omega": 0.0, "p_max": 100.0, "ramp_lo": -100.0, "ramp_hi": 100.0}],
        "lines": [
            {"from": 1, "to": 2, "f_max": 20.0, "varpi": 1.0, "nu": 1.0},
            {"from": 2, "to": 1, "f_max": 20.0, "varpi": 1.0, "nu": 1.0},
        ],
        "forecast": {"epsilon": 0.25, "demand_mean": {"1": [0.0], "2": [d2]}},
    }


@pytest.fixture
def tiny_path(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(tiny_doc()))
    return path


def test_validate_shipped_ok(capsys):
    assert cli.main(["validate", str(SHIPPED)]) == 0
    assert "valid" in capsys.readouterr().out


def test_validate_infeasible(tmp_path, capsys):
    path = tmp_path / "over.json"
    path.write_text(json.dumps(tiny_doc(d2=500.0)))
    assert cli.main(["validate", str(path)]) != 0
    assert "Assumption 4 violated" in capsys.readouterr().out


def test_validate_malformed_and_missing(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    assert cli.main(["validate", str(path)]) == 2
    assert "line 1 column" in capsys.readouterr().err
    assert cli.main(["validate", str(tmp_path / "nope.json")]) == 2


def test_validate_structural_violation(tmp_path, capsys):
    doc = tiny_doc()
    doc["network"]["edges"] = [[1, 2]]
    doc["lines"] = doc["lines"][:1]
    path = tmp_path / "asym.json"
    path.write_text(json.dumps(doc))
    assert cli.main(["validate", str(path)]) == 2
    assert "missing reverse edge (2,1)" in capsys.readouterr().err


def test_solve_writes_solution_and_trace(tiny_path, tmp_path):
    out, trace = tmp_path / "sol.json", tmp_path / "trace.csv"
    code = cli.main(["solve", str(tiny_path), "--method", "dual", "--trace", str(trace), "--out", str(out), "--seed", "5"])
    assert code == 0
    doc = json.loads(out.read_text())
    assert doc["converged"] and doc["seed"] == 5
    assert doc["nodes"]["1"]["P"] == pytest.approx([10.0], abs=1e-4)
    assert doc["nodes"]["1"]["F"]["2"] == pytest.approx([10.0], abs=1e-4)
    with open(trace, newline="") as fh:
        header = next(csv.reader(fh))
    assert tuple(header) == COLUMNS[:-1]
    assert b"\r\n" not in trace.read_bytes()


def test_solve_trace_with_reference(tiny_path, tmp_path):
    trace = tmp_path / "trace.csv"
    assert cli.main(["solve", str(tiny_path), "--method", "admm", "--rho", "1", "--reference", "--trace", str(trace)]) == 0
    with open(trace, newline="") as fh:
        header = next(csv.reader(fh))
    assert tuple(header) == COLUMNS
    tr = read_csv(trace)
    assert tr.dist_to_ref[-1] <= 1e-4
    assert np.isnan(tr.dual_value).all()


def test_solve_budget_exhausted(tmp_path):
    assert cli.main(["solve", str(SHIPPED), "--max-iters", "1"]) == 3
    assert cli.main(["solve", str(SHIPPED), "--method", "admm", "--max-iters", "1"]) == 3


def test_solve_ieee30_admm_paper_setting(tmp_path):
    out = tmp_path / "sol.json"
    assert cli.main(["solve", str(SHIPPED), "--method", "admm", "--k", "3", "--rho", "0.01", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["rho"] == 0.01


def test_solve_ieee30_dual_fixed_lipschitz(tmp_path):
    out = tmp_path / "sol.json"
    assert cli.main(["solve", str(SHIPPED), "--method", "dual", "--lipschitz", "100", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["lipschitz"] == 100.0


def test_solve_harness_round_log(tiny_path, tmp_path):
    rounds = tmp_path / "rounds.csv"
    assert cli.main(["solve", str(tiny_path), "--harness", "--rounds", str(rounds)]) == 0
    rows = list(csv.DictReader(open(rounds)))
    assert list(rows[0]) == ["round", "messages", "bytes"]
    assert all(r["messages"] == "2" for r in rows)


def test_solve_bad_k(tiny_path):
    assert cli.main(["solve", str(tiny_path), "--k", "0"]) == 2


def test_compare_tiny_agrees_with_enumeration(tiny_path, tmp_path, capsys):
    out = tmp_path / "report.json"
    assert cli.main(["compare", str(tiny_path), "--trace-dir", str(tmp_path / "tr"), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "enumerate" in text
    rep = json.loads(out.read_text())
    assert rep["enumerate"]["distance"] <= 1e-3
    assert rep["dual"]["distance"] <= 1e-3
    assert rep["admm"]["distance"] <= 1e-3
    assert (tmp_path / "tr" / "dual.csv").exists() and (tmp_path / "tr" / "admm.csv").exists()


def test_compare_function_tiny():
    p = tiny_problem()
    rows = cli.compare(p, admm_iters=20_000)
    enum = oracle.enumerate_tiny(p)
    ref = oracle.solve_reference(p)
    assert np.abs(ref.x - enum).max() <= 1e-3
    assert rows["dual"]["messages_per_iteration"] == 4
    assert rows["admm"]["messages_per_iteration"] == 2


def test_mpc_commands(tmp_path):
    out = tmp_path / "mpc.csv"
    assert cli.main(["mpc", str(SHIPPED), "--steps", "0", "--out", str(out)]) == 0
    assert out.read_text().strip() == "step,node,P,Ec,Ed,F_out,F_in,demand,slack,soc,iterations"
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for path in (a, b):
        assert cli.main(["mpc", str(SHIPPED), "--steps", "2", "--demand", "sampled", "--seed", "9", "--out", str(path)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert len(list(csv.DictReader(open(a)))) == 2 * 30


def test_mpc_midrun_failure_keeps_log(tmp_path):
    out = tmp_path / "mpc.csv"
    assert cli.main(["mpc", str(SHIPPED), "--steps", "3", "--max-iters", "5", "--out", str(out)]) == 4
    assert out.exists()
    assert cli.main(["mpc", str(SHIPPED), "--steps", "-1"]) == 2


def test_module_entry_point(tiny_path):
    proc = subprocess.run([sys.executable, "-m", "gridmpc", "validate", str(tiny_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr

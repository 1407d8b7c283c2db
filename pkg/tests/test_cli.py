import json
import time

import numpy as np
import pytest

from vvcdesign.cli import run


def _json(capsys):
    return json.loads(capsys.readouterr().out)


def test_pf_flat(capsys):
    assert run(["pf", "--feeder", "two_bus", "--scenario", "zero"]) == 0
    assert _json(capsys)["v_pu"] == {"1": 1.0}


def test_usage_errors(capsys):
    assert run(["pf"]) == 2
    assert run(["pf", "--feeder", "no_such_feeder"]) == 2
    assert run(["design", "--model", "missing.json", "--out", "x.json"]) == 2
    assert run(["stability", "--criterion", "rho"]) == 2


def test_domain_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "f.json"
    bad.write_text(json.dumps({"nodes": [{"id": "a"}, {"id": "b"}],
                               "branches": [{"from": "a", "to": "b", "r_pu": 0.01, "x_pu": 0.0}]}))
    assert run(["pf", "--feeder", str(bad)]) == 1
    assert "error" in capsys.readouterr().err


def test_design_without_generators(tmp_path, capsys):
    model = tmp_path / "m.json"
    assert run(["linearize", "--feeder", "two_bus", "--ldf", "--out", str(model)]) == 0
    out = tmp_path / "d.json"
    assert run(["design", "--model", str(model), "--scenario", "zero", "--out", str(out)]) == 0
    assert "warning" in capsys.readouterr().err
    assert json.loads(out.read_text())["k"] == {}


def test_region_csv(tmp_path):
    out = tmp_path / "r.csv"
    assert run(["stability", "--jq", "1.5504 1.5504; 1.5505 1.6144", "--region", "--grid", "20",
                "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "k1,k2,rho_feasible,norm2_feasible,holder_feasible" and len(lines) == 401
    rows = np.array([[float(x) for x in ln.split(",")] for ln in lines[1:]])
    assert np.all(rows[:, 4] <= rows[:, 3]) and np.all(rows[:, 3] <= rows[:, 2])


def _pipeline(tmp_path, capsys, beta):
    d = tmp_path
    steps = [
        ["scenario", "synth", "--feeder", "ieee33", "--seed", "0", "--out", str(d / "year.csv")],
        ["scenario", "split", "--feeder", "ieee33", "--scenarios", str(d / "year.csv"), "--seed", "0",
         "--out", str(d / "split")],
        ["scenario", "opoint", "--feeder", "ieee33", "--scenarios", str(d / "split/train.csv"),
         "--out", str(d / "op.json")],
        ["linearize", "--feeder", "ieee33", "--opoint", str(d / "op.json"), "--threads", "4",
         "--out", str(d / "lpf.json")],
        ["design", "--model", str(d / "lpf.json"), "--feeder", "ieee33", "--scenarios",
         str(d / "split/train.csv"), "--scenario", "worst", "--criterion", "rho", "--beta", str(beta),
         "--seed", "42", "--out", str(d / "design.json")],
    ]
    for argv in steps:
        assert run(argv) == 0, argv
    capsys.readouterr()


def test_end_to_end_pipeline(tmp_path, capsys):
    t0 = time.perf_counter()
    _pipeline(tmp_path, capsys, 0.06)
    d = tmp_path
    base = ["simulate", "--feeder", "ieee33", "--scenarios", str(d / "split/train.csv"), "--scenario", "worst"]
    assert run(base + ["--design", str(d / "design.json"), "--out", str(d / "trace.csv")]) == 0
    closed = _json(capsys)
    empty = d / "zero.json"
    rec = json.loads((d / "design.json").read_text())
    rec["k"] = {}
    empty.write_text(json.dumps(rec))
    assert run(base + ["--design", str(empty)]) == 0
    open_loop = _json(capsys)
    assert time.perf_counter() - t0 < 60
    assert closed["outcome"] == "converged"
    assert closed["dev2"] <= open_loop["dev2"]
    manifest = json.loads((d / "design.json.manifest.json").read_text())
    assert manifest["seeds"] == [42] and manifest["inputs"]
    assert (d / "trace.csv").read_text().startswith("step,node_id,v_pu,qg_pu")


def test_scaled_design_reports_divergence(tmp_path, capsys):
    _pipeline(tmp_path, capsys, 0.0)
    d = tmp_path
    assert run(["simulate", "--feeder", "ieee33", "--design", str(d / "design.json"), "--scenarios",
                str(d / "split/train.csv"), "--scenario", "worst", "--scale", "1.1",
                "--summary", str(d / "s.json")]) == 0
    assert _json(capsys)["outcome"] == "diverged"
    assert json.loads((d / "s.json").read_text())["outcome"] == "diverged"
    assert run(["stability", "--model", str(d / "lpf.json"), "--k", str(d / "design.json")]) == 0
    v = _json(capsys)
    assert v["feasible"] and v["value"] == pytest.approx(0.999, abs=1e-6)


def test_validate_and_hours(tmp_path, capsys):
    d = tmp_path
    assert run(["scenario", "synth", "--feeder", "chain5", "--out", str(d / "y.csv")]) == 0
    assert run(["linearize", "--feeder", "chain5", "--scenarios", str(d / "y.csv"), "--out", str(d / "m.json")]) == 0
    capsys.readouterr()
    assert run(["validate-model", "--feeder", "chain5", "--model", str(d / "m.json"), "--scenarios",
                str(d / "y.csv"), "--out", str(d / "e.csv"), "--hist", str(d / "h.csv")]) == 0
    summ = _json(capsys)
    assert summ["scenarios"] == 8760 and summ["lpf"]["max_abs_error"] < summ["ldf"]["max_abs_error"]
    assert run(["scenario", "hours", "--feeder", "chain5", "--scenarios", str(d / "y.csv")]) == 0
    assert set(_json(capsys)) == {"A", "B", "C", "D"}


def test_report_outputs(tmp_path, capsys):
    d = tmp_path
    assert run(["scenario", "synth", "--feeder", "chain5", "--out", str(d / "y.csv")]) == 0
    assert run(["report", "--feeder", "chain5", "--scenarios", str(d / "y.csv"), "--out-dir", str(d / "rep"),
                "--starts", "2", "--cloud-scenarios", "3"]) == 0
    rep = d / "rep"
    for name in ("model_error_hist.csv", "model_error_summary.json", "hour_metrics.csv", "voltage_cloud.csv",
                 "trace_hourA_x1.csv", "trace_hourA_x1.1.csv", "designs/lpf_rho.json", "designs/ldf_rho.json",
                 "manifest.json"):
        assert (rep / name).exists(), name
    cloud = (rep / "voltage_cloud.csv").read_text().splitlines()
    assert cloud[0] == "depth,node_id,scenario_id,scheme,v_pu" and len(cloud) == 1 + 3 * 3 * 5
    hours = (rep / "hour_metrics.csv").read_text().splitlines()
    assert len(hours) == 1 + 4 * 7

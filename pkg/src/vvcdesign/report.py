"""End-to-end study: split, linearize, design under every criterion, simulate, and write plot-ready CSVs."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .design import DesignProblem, optimize_slopes, save_design
from .linmodels import LdfModel, LpfModel, build_jacobians, build_ldf, model_error_report
from .network import NetworkModel
from .powerflow import PfConfig
from .scenario import (Scenario, ScenarioSet, SplitResult, average_operating_point, select_exemplary_hours,
                       select_worst_case, split_train_test)
from .simloop import LoopConfig, simulate_closed_loop
from .stability import CRITERIA, uniform_slopes

log = logging.getLogger(__name__)

INCREMENTAL_GAIN = 25.0
INCREMENTAL_DT_OVER_TAU = 0.05
DESTABILIZE_SCALE = 1.1


@dataclass
class Study:
    net: NetworkModel
    split: SplitResult
    lpf: LpfModel
    ldf: LdfModel
    worst: Scenario
    hours: dict[str, Scenario]


def prepare_study(net: NetworkModel, scens: ScenarioSet, fraction: float = 0.9, seed: int = 0,
                  pf: PfConfig = PfConfig(), workers: int = 1) -> Study:
    split = split_train_test(scens, fraction, seed)
    p0, q0 = average_operating_point(split.train)
    lpf = build_jacobians(net, p0, q0, cfg=pf, workers=workers)
    return Study(
        net=net, split=split, lpf=lpf, ldf=build_ldf(net),
        worst=select_worst_case(split.train, net, pf, workers),
        hours=select_exemplary_hours(split.test, net, pf, workers),
    )


def design_all(study: Study, beta: float, epsilon: float, starts: int, seed: int,
               workers: int = 1) -> dict:
    """Designs keyed by scheme name, each a (problem, result) pair."""
    out = {}
    for crit in CRITERIA:
        prob = DesignProblem(study.lpf, study.lpf.offset(study.worst), 1.0, beta, epsilon, crit,
                             starts, seed, workers)
        out[f"lpf_{crit}"] = (prob, optimize_slopes(prob))
    prob = DesignProblem(study.ldf, study.ldf.offset(study.worst), 1.0, beta, epsilon, "rho",
                         starts, seed, workers)
    out["ldf_rho"] = (prob, optimize_slopes(prob))
    return out


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def emit_report(study: Study, out_dir, beta: float = 0.06, epsilon: float = 1e-3, starts: int = 8,
                seed: int = 0, cloud_scenarios: int = 40, max_steps: int = 5000,
                pf: PfConfig = PfConfig(), workers: int = 1) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    net = study.net
    files: list[Path] = []

    rep = model_error_report(net, {"lpf": study.lpf, "ldf": study.ldf}, study.split.test, pf, workers)
    rep.histogram_csv(out_dir / "model_error_hist.csv")
    (out_dir / "model_error_summary.json").write_text(json.dumps(rep.summary, indent=1))
    files += [out_dir / "model_error_hist.csv", out_dir / "model_error_summary.json"]

    designs = design_all(study, beta, epsilon, starts, seed, workers)
    ddir = out_dir / "designs"
    ddir.mkdir(exist_ok=True)
    for name, (prob, res) in designs.items():
        save_design(ddir / f"{name}.json", res, prob, scenario=study.worst.id)
        files.append(ddir / f"{name}.json")

    k_rho = designs["lpf_rho"][1].k
    schemes = {
        "baseline": (np.zeros(net.n), LoopConfig(max_steps=max_steps, pf=pf)),
        "uniform": (uniform_slopes(study.lpf, "holder", epsilon), LoopConfig(max_steps=max_steps, pf=pf)),
        **{name: (res.k, LoopConfig(max_steps=max_steps, pf=pf)) for name, (_, res) in designs.items()},
        "incremental_x25": (INCREMENTAL_GAIN * k_rho,
                            LoopConfig("incremental", INCREMENTAL_DT_OVER_TAU, max_steps=max_steps, pf=pf)),
    }
    rows = []
    for hour, scen in study.hours.items():
        for name, (k, cfg) in schemes.items():
            tr = simulate_closed_loop(net, k, scen, 1.0, cfg)
            rows.append([hour, scen.id, name, tr.metrics["dev2"], tr.metrics["devinf"], tr.outcome, tr.steps])
    _write_rows(out_dir / "hour_metrics.csv",
                ["hour", "scenario_id", "scheme", "dev2", "devinf", "outcome", "steps"], rows)
    files.append(out_dir / "hour_metrics.csv")

    gens = list(study.lpf.gen_idx)
    gen_ids = [net.node_ids[g] for g in gens]
    for scale in (1.0, DESTABILIZE_SCALE):
        tr = simulate_closed_loop(net, scale * k_rho, study.hours["A"], 1.0, LoopConfig(max_steps=max_steps, pf=pf))
        path = out_dir / f"trace_hourA_x{scale:g}.csv"
        _write_rows(path, ["step", "node_id", "v_pu", "qg_pu"],
                    [[int(s), nid, float(v[g]), float(q[g])]
                     for s, v, q in zip(tr.steps_kept, tr.v_history, tr.q_history)
                     for g, nid in zip(gens, gen_ids)])
        files.append(path)

    cloud = []
    test = study.split.test
    depth = net.depth
    for i in range(min(cloud_scenarios, len(test))):
        scen = test[i]
        for name, key in (("none", "baseline"), ("vvc", "lpf_rho"), ("incremental", "incremental_x25")):
            k, cfg = schemes[key]
            tr = simulate_closed_loop(net, k, scen, 1.0, cfg)
            cloud += [[int(depth[j]), net.node_ids[j], scen.id, name, float(tr.v_final[j])] for j in range(net.n)]
    _write_rows(out_dir / "voltage_cloud.csv", ["depth", "node_id", "scenario_id", "scheme", "v_pu"], cloud)
    files.append(out_dir / "voltage_cloud.csv")
    return files

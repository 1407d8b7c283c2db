"""``vvc`` command line: every workflow step reads and writes JSON or CSV.

Exit codes: 0 success, 1 domain error (message on stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .design import DesignProblem, load_design, optimize_slopes, save_design
from .errors import DesignError, ScenarioError, VVCError
from .linmodels import LpfModel, build_jacobians, build_ldf, load_model, model_error_report
from .network import bundled_feeder, bundled_path, load_feeder
from .powerflow import Injection, PfConfig, solve_pf
from .report import emit_report, prepare_study
from .scenario import (ProfileConfig, Scenario, average_operating_point, load_timeseries, mean_scenario,
                       save_timeseries, select_exemplary_hours, select_worst_case, split_train_test,
                       synthesize_year)
from .simloop import LoopConfig, simulate_closed_loop
from .stability import CRITERIA, check_stability, region_grid

log = logging.getLogger("vvc")


class UsageError(Exception):
    pass


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _feeder(arg):
    p = Path(arg)
    if p.exists():
        return load_feeder(p)
    try:
        return bundled_feeder(arg)
    except FileNotFoundError:
        raise UsageError(f"feeder {arg!r} is neither a file nor a bundled feeder") from None


def _input_files(args) -> list[str]:
    keys = ("feeder", "scenarios", "model", "design", "k", "profile", "opoint")
    return [getattr(args, key) for key in keys
            if isinstance(getattr(args, key, None), str) and Path(getattr(args, key)).is_file()]


def write_manifest(out_path, args, argv, started: float, seeds=()) -> Path:
    """Record how an output was produced, next to the output itself."""
    out_path = Path(out_path)
    target = out_path / "manifest.json" if out_path.is_dir() else out_path.with_name(out_path.name + ".manifest.json")
    config = {k: v for k, v in vars(args).items() if k != "func" and not callable(v)}
    manifest = {
        "command_line": ["vvc", *argv],
        "config": config,
        "inputs": {f: _sha256(f) for f in _input_files(args)},
        "tool_version": __version__,
        "seeds": list(seeds),
        "wall_clock_s": round(time.perf_counter() - started, 3),
    }
    target.write_text(json.dumps(manifest, indent=1, default=str))
    return target


def _pf_cfg(args) -> PfConfig:
    return PfConfig(tol=args.pf_tol, max_iter=args.pf_max_iter)


def _emit(obj, out=None):
    text = json.dumps(obj, indent=1)
    if out:
        Path(out).write_text(text)
    print(text)


def _pick_scenario(args, net, model=None) -> Scenario:
    """``zero``, ``opoint`` (the model's operating point), ``worst``, an id, or a one-scenario CSV."""
    name = args.scenario
    if name == "zero":
        return Scenario.zero(net.n)
    if name == "opoint":
        if model is None or not isinstance(model, LpfModel):
            raise UsageError("'opoint' needs an LPF model")
        return Scenario.from_net("operating-point", model.p0, model.q0)
    if Path(name).is_file():
        scens = load_timeseries(name, net)
        if len(scens) == 0:
            raise ScenarioError(f"{name} holds no scenario")
        return scens[0]
    if not args.scenarios:
        raise UsageError(f"scenario {name!r} needs --scenarios")
    scens = load_timeseries(args.scenarios, net)
    if name == "worst":
        return select_worst_case(scens, net, _pf_cfg(args), args.threads)
    return scens.get(name)


def cmd_pf(args, argv):
    net = _feeder(args.feeder)
    scen = _pick_scenario(args, net)
    sol = solve_pf(net, Injection(scen.p, -scen.q_d), _pf_cfg(args))
    _emit({"scenario": scen.id, "converged": sol.converged, "iterations": sol.iterations,
           "max_mismatch": sol.max_mismatch,
           "v_pu": {nid: float(v) for nid, v in zip(net.node_ids, sol.v)}}, args.out)
    return 0 if sol.converged else 1


def cmd_linearize(args, argv):
    net = _feeder(args.feeder)
    if args.ldf:
        model = build_ldf(net)
    else:
        if args.opoint:
            op = json.loads(Path(args.opoint).read_text())
            p0, q0 = np.array(op["p0"]), np.array(op["q0"])
        elif args.scenarios:
            p0, q0 = average_operating_point(load_timeseries(args.scenarios, net))
        else:
            raise UsageError("linearize needs --opoint or --scenarios (or --ldf)")
        model = build_jacobians(net, p0, q0, args.fd_eps, _pf_cfg(args), args.threads)
    model.save(args.out)
    return 0


def cmd_validate_model(args, argv):
    net = _feeder(args.feeder)
    lpf = load_model(args.model, net)
    scens = load_timeseries(args.scenarios, net)
    rep = model_error_report(net, {"lpf": lpf, "ldf": build_ldf(net)}, scens, _pf_cfg(args), args.threads)
    rep.to_csv(args.out)
    if args.hist:
        rep.histogram_csv(args.hist, args.bins)
    _emit(rep.summary)
    return 0


def _parse_matrix(text) -> np.ndarray:
    return np.array([[float(x) for x in row.replace(",", " ").split()] for row in text.split(";")])


def cmd_stability(args, argv):
    model = load_model(args.model) if args.model else None
    if args.jq:
        model = _parse_matrix(args.jq)
    if model is None:
        raise UsageError("stability needs --model or --jq")
    if args.region:
        Jq = model if isinstance(model, np.ndarray) else model.sensitivity[np.ix_(model.gen_idx, model.gen_idx)]
        grid = region_grid(Jq, args.k_min, args.k_max, args.grid, args.epsilon)
        rows = ["k1,k2,rho_feasible,norm2_feasible,holder_feasible"]
        for i, k1 in enumerate(grid["k1"]):
            for j, k2 in enumerate(grid["k2"]):
                rows.append(f"{float(k1)!r},{float(k2)!r},{int(grid['rho'][i, j])},{int(grid['norm2'][i, j])},"
                            f"{int(grid['holder'][i, j])}")
        text = "\n".join(rows) + "\n"
        if args.out:
            Path(args.out).write_text(text)
        else:
            sys.stdout.write(text)
        return 0
    if not args.k:
        raise UsageError("stability needs --k (a design file) unless --region is given")
    if isinstance(model, np.ndarray):
        d = json.loads(Path(args.k).read_text())
        k = np.array([float(v) for v in d["k"].values()])
    else:
        k, _ = load_design(args.k, model.node_ids)
    verdict = check_stability(model, k, args.criterion, args.epsilon)
    _emit(verdict.to_dict(), args.out)
    return 0


def cmd_design(args, argv):
    model = load_model(args.model)
    net = _feeder(args.feeder) if args.feeder else None
    if net is not None and model.fingerprint and model.fingerprint != net.fingerprint:
        raise VVCError("model and feeder fingerprints differ")
    if args.scenario in ("opoint", "zero") or net is None:
        if args.scenario not in ("opoint", "zero"):
            raise UsageError(f"scenario {args.scenario!r} needs --feeder and --scenarios")
        if args.scenario == "opoint" and not isinstance(model, LpfModel):
            raise UsageError("an LDF model has no operating point; pass --scenario zero or a scenario")
        scen = (Scenario.zero(model.n) if args.scenario == "zero"
                else Scenario.from_net("operating-point", model.p0, model.q0))
    else:
        scen = _pick_scenario(args, net, model)
    if len(model.gen_idx) == 0:
        print("warning: model has no generators; writing the empty design", file=sys.stderr)
    prob = DesignProblem(model, model.offset(scen), 1.0, args.beta, args.epsilon, args.criterion,
                         args.starts, args.seed, args.threads)
    res = optimize_slopes(prob)
    save_design(args.out, res, prob, scenario=scen.id)
    _emit({"objective": res.objective, "feasible": res.verdict.feasible, "value": res.verdict.value,
           "k": {model.node_ids[i]: float(res.k[i]) for i in model.gen_idx}})
    return 0


def cmd_simulate(args, argv):
    net = _feeder(args.feeder)
    k, _ = load_design(args.design, net.node_ids, net.fingerprint)
    scen = _pick_scenario(args, net)
    dt = args.dt_over_tau if args.mode == "incremental" else 1.0
    cfg = LoopConfig(args.mode, dt, args.conv_tol, args.max_steps, args.divergence_limit,
                     args.keep_every, _pf_cfg(args))
    trace = simulate_closed_loop(net, args.scale * k, scen, 1.0, cfg)
    if args.out:
        trace.to_csv(args.out, net.node_ids)
    if args.summary:
        trace.save_summary(args.summary)
    _emit({"scenario": scen.id, **trace.summary()})
    return 0


def cmd_scenario(args, argv):
    net = _feeder(args.feeder)
    action = args.action
    if action == "synth":
        prof = args.profile
        if prof is None:
            name = Path(args.feeder).stem
            prof = bundled_path(f"{name}_profile.json")
            if not prof.exists():
                raise UsageError("synth needs --profile")
        year = synthesize_year(net, ProfileConfig.load(prof), args.seed)
        save_timeseries(year, net, args.out)
        print(json.dumps({"scenarios": len(year), "out": args.out}))
        return 0
    scens = load_timeseries(args.scenarios, net)
    if action == "split":
        res = split_train_test(scens, args.fraction, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        save_timeseries(res.train, net, out / "train.csv")
        save_timeseries(res.test, net, out / "test.csv")
        print(json.dumps({"train": len(res.train), "test": len(res.test), "seed": args.seed,
                          "fraction": args.fraction}))
    elif action == "opoint":
        p0, q0 = average_operating_point(scens)
        mean = mean_scenario(scens)
        _emit({"node_ids": net.node_ids, "p0": p0.tolist(), "q0": q0.tolist(),
               "mean_p_g": mean.p_g.tolist(), "mean_p_d": mean.p_d.tolist(),
               "mean_q_d": mean.q_d.tolist()}, args.out)
    elif action == "worst":
        w = select_worst_case(scens, net, _pf_cfg(args), args.threads)
        v = solve_pf(net, Injection(w.p, -w.q_d), _pf_cfg(args)).v
        _emit({"id": w.id, "dev2": float(np.linalg.norm(v - 1.0))}, args.out)
    elif action == "hours":
        hours = select_exemplary_hours(scens, net, _pf_cfg(args), args.threads)
        _emit({h: s.id for h, s in hours.items()}, args.out)
    return 0


def cmd_report(args, argv):
    net = _feeder(args.feeder)
    scens = load_timeseries(args.scenarios, net)
    study = prepare_study(net, scens, args.fraction, args.seed, _pf_cfg(args), args.threads)
    files = emit_report(study, args.out_dir, args.beta, args.epsilon, args.starts, args.seed,
                        args.cloud_scenarios, args.max_steps, _pf_cfg(args), args.threads)
    _emit({"files": [str(f) for f in files], "worst": study.worst.id,
           "hours": {h: s.id for h, s in study.hours.items()}})
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--quiet", action="store_true")
    common.add_argument("--pf-tol", type=float, default=1e-10)
    common.add_argument("--pf-max-iter", type=int, default=100)

    parser = argparse.ArgumentParser(prog="vvc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pf", parents=[common], help="solve one AC power flow")
    p.add_argument("--feeder", required=True)
    p.add_argument("--scenario", default="zero")
    p.add_argument("--scenarios")
    p.add_argument("--out")
    p.set_defaults(func=cmd_pf)

    p = sub.add_parser("linearize", parents=[common], help="build the LPF (or LDF) model file")
    p.add_argument("--feeder", required=True)
    p.add_argument("--scenarios", help="training scenarios; their mean is the operating point")
    p.add_argument("--opoint", help="operating point JSON from 'scenario opoint'")
    p.add_argument("--fd-eps", type=float, default=1e-6)
    p.add_argument("--ldf", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_linearize)

    p = sub.add_parser("validate-model", parents=[common], help="LPF/LDF error against AC power flow")
    p.add_argument("--feeder", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--scenarios", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--hist")
    p.add_argument("--bins", type=int, default=50)
    p.set_defaults(func=cmd_validate_model)

    p = sub.add_parser("stability", parents=[common], help="check a design or sample the 2-D region")
    p.add_argument("--model")
    p.add_argument("--jq", help="literal matrix, rows split by ';' (e.g. '1.55 1.55; 1.55 1.61')")
    p.add_argument("--k", help="design file")
    p.add_argument("--criterion", choices=CRITERIA, default="rho")
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.add_argument("--region", action="store_true")
    p.add_argument("--grid", type=int, default=200)
    p.add_argument("--k-min", type=float, default=-1.5)
    p.add_argument("--k-max", type=float, default=0.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("design", parents=[common], help="optimise VVC slopes")
    p.add_argument("--model", required=True)
    p.add_argument("--feeder")
    p.add_argument("--scenarios")
    p.add_argument("--scenario", default="opoint", help="worst | opoint | zero | <id> | <csv file>")
    p.add_argument("--criterion", choices=CRITERIA, default="rho")
    p.add_argument("--beta", type=float, default=0.06)
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.add_argument("--starts", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("simulate", parents=[common], help="closed loop against the AC power flow")
    p.add_argument("--feeder", required=True)
    p.add_argument("--design", required=True)
    p.add_argument("--scenarios")
    p.add_argument("--scenario", default="worst")
    p.add_argument("--mode", choices=("nonincremental", "incremental"), default="nonincremental")
    p.add_argument("--dt-over-tau", type=float, default=0.05)
    p.add_argument("--scale", type=float, default=1.0, help="multiply every slope (e.g. 1.1)")
    p.add_argument("--conv-tol", type=float, default=1e-4)
    p.add_argument("--max-steps", type=int, default=2000)
    p.add_argument("--divergence-limit", type=float, default=0.5)
    p.add_argument("--keep-every", type=int, default=1)
    p.add_argument("--out")
    p.add_argument("--summary")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("scenario", help="scenario tools")
    ssub = p.add_subparsers(dest="action", required=True)
    for action, helptext in (("split", "random train/test split"), ("opoint", "average operating point"),
                             ("worst", "worst-case training scenario"), ("hours", "exemplary hours A-D"),
                             ("synth", "synthetic hourly year")):
        a = ssub.add_parser(action, parents=[common], help=helptext)
        a.add_argument("--feeder", required=True)
        if action == "synth":
            a.add_argument("--profile")
            a.add_argument("--out", required=True)
        else:
            a.add_argument("--scenarios", required=True)
            a.add_argument("--out", required=action == "split")
        if action == "split":
            a.add_argument("--fraction", type=float, default=0.9)
        a.set_defaults(func=cmd_scenario)

    p = sub.add_parser("report", parents=[common], help="full study with plot-ready CSV outputs")
    p.add_argument("--feeder", required=True)
    p.add_argument("--scenarios", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--fraction", type=float, default=0.9)
    p.add_argument("--beta", type=float, default=0.06)
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.add_argument("--starts", type=int, default=8)
    p.add_argument("--cloud-scenarios", type=int, default=40)
    p.add_argument("--max-steps", type=int, default=5000)
    p.set_defaults(func=cmd_report)
    return parser


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.perf_counter()
    try:
        code = args.func(args, argv)
    except UsageError as exc:
        print(f"vvc: usage error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"vvc: {exc}", file=sys.stderr)
        return 2
    except (VVCError, DesignError, ValueError) as exc:
        print(f"vvc: error: {exc}", file=sys.stderr)
        return 1
    out = getattr(args, "out", None) or getattr(args, "out_dir", None)
    if out and Path(out).exists():
        write_manifest(out, args, argv, started, seeds=[args.seed])
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

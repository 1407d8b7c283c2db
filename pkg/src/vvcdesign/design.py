"""Optimal Volt-VAr slope design.

Minimises the steady-state deviation ``||v* - v_ref||^2`` plus a
regularisation ``beta / n_g * ||k||^2`` over non-positive generator slopes,
subject to one stability criterion held at a margin ``epsilon``. The
equilibrium is substituted into the objective. Every evaluation works on
the generator block only, via the Woodbury identity:

    (I - Jq K)^-1 d = d + Jq[:, g] K_g (I - Jq[g, g] K_g)^-1 d[g]
"""

from __future__ import annotations

import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import Bounds, LinearConstraint, NonlinearConstraint, minimize

from .errors import DesignError, ModelMismatchError
from .linmodels import ScenarioOffset
from .stability import CRITERIA, DEFAULT_EPSILON, StabilityVerdict, all_values, check_stability, criterion_value

log = logging.getLogger(__name__)

DEFAULT_BETA = 0.06
_TIE_TOL = 1e-12
_FD_STEP = 1e-7


def equilibrium_voltage(Jq, k, v_tilde, v_ref) -> np.ndarray:
    """Fixed point ``v* = (I - Jq K)^-1 (v_tilde - Jq K v_ref)``, by a linear solve."""
    Jq = np.asarray(Jq, dtype=float)
    k = np.asarray(k, dtype=float)
    v_ref = np.broadcast_to(np.asarray(v_ref, dtype=float), k.shape)
    A = np.eye(len(k)) - Jq * k[None, :]
    try:
        w = np.linalg.solve(A, np.asarray(v_tilde, dtype=float) - v_ref)
    except np.linalg.LinAlgError as exc:
        raise DesignError("I - Jq K is singular: no equilibrium for these slopes") from exc
    return v_ref + w


@dataclass
class DesignProblem:
    model: object  # LpfModel or LdfModel
    offset: ScenarioOffset
    v_ref: np.ndarray | float = 1.0
    beta: float = DEFAULT_BETA
    epsilon: float = DEFAULT_EPSILON
    criterion: str = "rho"
    multistart: int = 8
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        n = self.model.n
        self.v_ref = np.broadcast_to(np.asarray(self.v_ref, dtype=float), (n,)).copy()
        if self.beta < 0:
            raise DesignError("beta must be >= 0")
        if not 0.0 < self.epsilon < 1.0:
            raise DesignError("epsilon must lie in (0, 1)")
        if np.any(self.v_ref < 0.9) or np.any(self.v_ref > 1.1):
            raise DesignError("reference voltages must lie in [0.9, 1.1] p.u.")
        if self.criterion not in CRITERIA:
            raise DesignError(f"criterion must be one of {CRITERIA}")
        if self.multistart < 1:
            raise DesignError("need at least one start")

    @property
    def gens(self) -> np.ndarray:
        return np.asarray(self.model.gen_idx, dtype=int)

    @property
    def Jq(self) -> np.ndarray:
        return self.model.sensitivity


@dataclass
class DesignResult:
    k: np.ndarray
    objective: float
    deviation_term: float
    regularization_term: float
    verdict: StabilityVerdict
    starts_tried: int
    best_start_index: int
    v_star: np.ndarray
    values: dict = field(default_factory=dict)
    starts: list = field(default_factory=list)


class _Evaluator:
    """Objective, gradient and constraint on the reduced vector k_g."""

    def __init__(self, problem: DesignProblem):
        self.p = problem
        g = problem.gens
        self.g = g
        self.B = problem.Jq[:, g]
        self.Jgg = problem.Jq[np.ix_(g, g)]
        self.d = problem.offset.v_tilde - problem.v_ref
        self.scale = problem.beta / len(g)
        self.bound = 1.0 - problem.epsilon

    def full(self, kg) -> np.ndarray:
        k = np.zeros(self.p.model.n)
        k[self.g] = kg
        return k

    def deviation(self, kg) -> np.ndarray:
        y = np.linalg.solve(np.eye(len(kg)) - self.Jgg * kg[None, :], self.d[self.g])
        return self.d + self.B @ (kg * y)

    def terms(self, kg) -> tuple[float, float]:
        w = self.deviation(kg)
        return float(w @ w), float(self.scale * (kg @ kg))

    def objective(self, kg) -> float:
        try:
            dev, reg = self.terms(kg)
        except np.linalg.LinAlgError:
            return 1e6
        return dev + reg

    def gradient(self, kg) -> np.ndarray:
        try:
            w = self.deviation(kg)
            Btw = self.B.T @ w
            z = np.linalg.solve(np.eye(len(kg)) - self.Jgg.T * kg[None, :], Btw)
            Btl = Btw + self.Jgg.T @ (kg * z)
        except np.linalg.LinAlgError:
            return np.zeros_like(kg)
        return 2.0 * w[self.g] * Btl + 2.0 * self.scale * kg

    def stability(self, kg) -> float:
        return criterion_value(self.p.Jq, self.g, self.full(kg), self.p.criterion)

    def stability_grad(self, kg) -> np.ndarray:
        """Forward differences; a probe costs one n_g x n_g eigensolve (or SVD)."""
        f0 = self.stability(kg)
        out = np.empty_like(kg)
        for j in range(len(kg)):
            # step towards the interior of k <= 0 so probes stay on the feasible sign
            h = -_FD_STEP * max(1.0, abs(kg[j]))
            kp = kg.copy()
            kp[j] += h
            out[j] = (self.stability(kp) - f0) / h
        return out


def design_objective(k, problem: DesignProblem) -> float:
    """Deviation at equilibrium plus the normalised slope penalty, for a full-length k."""
    k = np.asarray(k, dtype=float)
    n_g = len(problem.gens)
    v_star = equilibrium_voltage(problem.Jq, k, problem.offset.v_tilde, problem.v_ref)
    dev = float(np.sum((v_star - problem.v_ref) ** 2))
    reg = problem.beta / n_g * float(np.sum(k[problem.gens] ** 2)) if n_g else 0.0
    return dev + reg


def box_lower(problem: DesignProblem) -> np.ndarray:
    """Per-generator lower bound on k: twice the single-inverter stability limit."""
    diag = np.diag(problem.Jq)[problem.gens]
    return -2.0 * (1.0 - problem.epsilon) / np.maximum(diag, 1e-9)


def start_points(problem: DesignProblem) -> np.ndarray:
    """Start 0 at k = 0; the rest uniform in a box scaled by the largest generator self-sensitivity."""
    n_g = len(problem.gens)
    rng = np.random.default_rng(problem.seed)
    k_lb = -0.9 * (1.0 - problem.epsilon) / np.max(np.diag(problem.Jq)[problem.gens])
    starts = np.zeros((problem.multistart, n_g))
    if problem.multistart > 1:
        starts[1:] = rng.uniform(k_lb, 0.0, size=(problem.multistart - 1, n_g))
    return starts


def _constraints(ev: _Evaluator):
    p = ev.p
    if p.criterion == "holder":
        # with k <= 0 both induced norms are linear in k:
        #   inf-norm rows  -sum_j |Jq[i, g_j]| k_j <= 1 - eps
        #   1-norm columns -k_j sum_i |Jq[i, g_j]| <= 1 - eps  (a bound on k_j)
        A = np.abs(ev.B)
        return [LinearConstraint(-A, -np.inf, ev.bound)], -ev.bound / A.sum(axis=0)
    con = NonlinearConstraint(ev.stability, -np.inf, ev.bound, jac=ev.stability_grad)
    return [con], box_lower(p)


def _repair(ev: _Evaluator, kg: np.ndarray) -> np.ndarray:
    """Pull a slightly infeasible point back onto the criterion boundary (criteria are homogeneous)."""
    kg = np.minimum(kg, 0.0)
    val = ev.stability(kg)
    if val > ev.bound:
        kg = kg * (ev.bound / val) * (1.0 - 1e-12)
    return kg


def _polish(ev: _Evaluator, kg: np.ndarray, bounds: Bounds, cons) -> np.ndarray:
    """SLSQP from the interior-point answer; the barrier stops short of active bounds."""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = minimize(ev.objective, kg, jac=ev.gradient, method="SLSQP", bounds=bounds,
                           constraints=cons, options={"maxiter": 200, "ftol": 1e-16})
        cand = _repair(ev, np.asarray(res.x, dtype=float))
    except (np.linalg.LinAlgError, ValueError):
        return kg
    if np.all(np.isfinite(cand)) and ev.stability(cand) <= ev.bound and ev.objective(cand) <= ev.objective(kg):
        return cand
    return kg


def _run_start(ev: _Evaluator, x0: np.ndarray) -> dict:
    cons, lower = _constraints(ev)
    lower = np.minimum(lower, x0 - 1e-9)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = minimize(ev.objective, x0, jac=ev.gradient, method="trust-constr",
                           bounds=Bounds(lower, np.zeros_like(x0)), constraints=cons,
                           options={"maxiter": 500, "gtol": 1e-10, "xtol": 1e-12,
                                    "initial_barrier_parameter": 1e-2})
        kg = _repair(ev, np.asarray(res.x, dtype=float))
        status = str(res.message)
        kg = _polish(ev, kg, Bounds(lower, np.zeros_like(x0)), cons)
    except (np.linalg.LinAlgError, ValueError) as exc:
        kg, status = np.zeros_like(x0), f"failed: {exc}"
    try:
        dev, reg = ev.terms(kg)
        ok = ev.stability(kg) <= ev.bound
    except np.linalg.LinAlgError:
        dev, reg, ok = float("inf"), 0.0, False
    return {"k": kg, "deviation": dev, "regularization": reg, "objective": dev + reg,
            "feasible": bool(ok), "status": status}


def optimize_slopes(problem: DesignProblem) -> DesignResult:
    """Best feasible local optimum over all starts (no global optimality claim)."""
    gens = problem.gens
    model = problem.model
    n = model.n
    if gens.size == 0:
        log.warning("no generators: returning the empty design")
        k = np.zeros(n)
        v_star = problem.offset.v_tilde.copy()
        dev = float(np.sum((v_star - problem.v_ref) ** 2))
        verdict = check_stability(model, k, problem.criterion, problem.epsilon)
        return DesignResult(k, dev, dev, 0.0, verdict, 0, -1, v_star, all_values(model, k))

    ev = _Evaluator(problem)
    x0s = start_points(problem)
    if problem.workers > 1:
        with ThreadPoolExecutor(max_workers=problem.workers) as pool:
            runs = list(pool.map(lambda x: _run_start(ev, x), x0s))
    else:
        runs = [_run_start(ev, x) for x in x0s]

    best = None
    for i, r in enumerate(runs):
        if not r["feasible"]:
            continue
        if best is None:
            best = i
            continue
        b = runs[best]
        if r["objective"] < b["objective"] - _TIE_TOL:
            best = i
        elif abs(r["objective"] - b["objective"]) <= _TIE_TOL and r["k"] @ r["k"] < b["k"] @ b["k"]:
            best = i
    if best is None:
        raise DesignError("no feasible design found (k = 0 is always feasible: internal error)")

    r = runs[best]
    k = ev.full(r["k"])
    verdict = check_stability(model, k, problem.criterion, problem.epsilon)
    v_star = problem.v_ref + ev.deviation(r["k"])
    starts = [{"index": i, "objective": run["objective"], "feasible": run["feasible"],
               "status": run["status"]} for i, run in enumerate(runs)]
    return DesignResult(
        k=k, objective=r["deviation"] + r["regularization"], deviation_term=r["deviation"],
        regularization_term=r["regularization"], verdict=verdict, starts_tried=len(runs),
        best_start_index=best, v_star=v_star, values=all_values(model, k), starts=starts,
    )


def design_to_dict(result: DesignResult, problem: DesignProblem, **extra) -> dict:
    model = problem.model
    ids = model.node_ids or tuple(str(i + 1) for i in range(model.n))
    return {
        "k": {ids[i]: float(result.k[i]) for i in problem.gens},
        "criterion": problem.criterion,
        "epsilon": problem.epsilon,
        "beta": problem.beta,
        "model_kind": model.kind,
        "objective": {"total": result.objective, "deviation": result.deviation_term,
                      "regularization": result.regularization_term},
        "achieved": result.values,
        "verdict": result.verdict.to_dict(),
        "multistart": problem.multistart,
        "seed": problem.seed,
        "starts_tried": result.starts_tried,
        "best_start_index": result.best_start_index,
        "starts": result.starts,
        "v_star": result.v_star.tolist(),
        "fingerprint": model.fingerprint,
        **extra,
    }


def save_design(path, result: DesignResult, problem: DesignProblem, **extra) -> None:
    Path(path).write_text(json.dumps(design_to_dict(result, problem, **extra), indent=1))


def load_design(path, node_ids, fingerprint: str | None = None) -> tuple[np.ndarray, dict]:
    """Full-length slope vector plus the raw design record."""
    d = json.loads(Path(path).read_text())
    if fingerprint and d.get("fingerprint") and d["fingerprint"] != fingerprint:
        raise ModelMismatchError(f"{path} was designed for a different feeder")
    pos = {nid: i for i, nid in enumerate(node_ids)}
    k = np.zeros(len(node_ids))
    for nid, val in d.get("k", {}).items():
        if nid not in pos:
            raise DesignError(f"design names unknown node {nid!r}")
        k[pos[nid]] = float(val)
    return k, d

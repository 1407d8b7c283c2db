"""Closed-loop simulation of Volt-VAr control against the AC power flow.

One step is one controller update followed by one full power flow solve.
The loop stops when the step-to-step voltage change drops below
``conv_tol``, when any voltage leaves ``v_ref +/- divergence_v_limit`` or the
power flow fails (diverged), or after ``max_steps``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InjectionError, VVCError
from .network import NetworkModel
from .powerflow import Injection, PfConfig, solve_pf
from .scenario import Scenario

MODES = ("nonincremental", "incremental")


class SimulationError(VVCError):
    pass


@dataclass(frozen=True)
class LoopConfig:
    mode: str = "nonincremental"
    dt_over_tau: float = 1.0
    conv_tol: float = 1e-4
    max_steps: int = 2000
    divergence_v_limit: float = 0.5
    keep_every: int = 1
    pf: PfConfig = field(default_factory=PfConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not 0.0 < self.dt_over_tau <= 1.0:
            raise ValueError("dt_over_tau must lie in (0, 1]")
        if self.mode == "nonincremental" and self.dt_over_tau != 1.0:
            raise ValueError("non-incremental control implies dt_over_tau = 1")
        if self.keep_every < 1:
            raise ValueError("keep_every must be >= 1")


@dataclass
class ClosedLoopTrace:
    v_history: np.ndarray  # (kept steps, n); row 0 is the open-loop state
    q_history: np.ndarray
    steps_kept: np.ndarray
    outcome: str  # converged | diverged | max_steps
    steps: int
    v_final: np.ndarray
    metrics: dict
    reason: str = ""

    def summary(self) -> dict:
        return {"outcome": self.outcome, "steps": self.steps, **self.metrics,
                **({"reason": self.reason} if self.reason else {})}

    def to_csv(self, path, node_ids) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "node_id", "v_pu", "qg_pu"])
            for s, v, q in zip(self.steps_kept, self.v_history, self.q_history):
                for nid, vi, qi in zip(node_ids, v, q):
                    w.writerow([int(s), nid, repr(float(vi)), repr(float(qi))])

    def save_summary(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=1))


def vvc_response(k, v, v_ref) -> np.ndarray:
    """Reactive output ``K (v - v_ref)``; zero wherever k is zero."""
    return np.asarray(k) * (np.asarray(v) - np.asarray(v_ref))


def incremental_response(k, v, v_ref, q_prev, dt_over_tau: float) -> np.ndarray:
    """First-order filtered response; ``dt_over_tau = 1`` gives :func:`vvc_response`."""
    if not 0.0 < dt_over_tau <= 1.0:
        raise ValueError("dt_over_tau must lie in (0, 1]")
    target = vvc_response(k, v, v_ref)
    if dt_over_tau == 1.0:
        return target
    return (1.0 - dt_over_tau) * np.asarray(q_prev) + dt_over_tau * target


def deviation_metrics(v, v_ref) -> dict:
    d = np.asarray(v) - np.asarray(v_ref)
    return {"dev2": float(np.linalg.norm(d)), "devinf": float(np.max(np.abs(d), initial=0.0))}


def _run(plant, v0, k, v_ref, cfg: LoopConfig) -> ClosedLoopTrace:
    n = len(v0)
    v_ref = np.broadcast_to(np.asarray(v_ref, dtype=float), (n,))
    k = np.asarray(k, dtype=float)
    vs, qs, kept = [v0], [np.zeros(n)], [0]
    v_prev, q_prev = v0, np.zeros(n)
    outcome, reason, step = "max_steps", "", 0
    for step in range(1, cfg.max_steps + 1):
        q = incremental_response(k, v_prev, v_ref, q_prev, cfg.dt_over_tau)
        v = plant(q)
        if v is None:
            # nothing to record: the last kept state is the last solvable one
            outcome, reason = "diverged", "power flow failed"
            if kept[-1] != step - 1:
                vs.append(v_prev)
                qs.append(q_prev)
                kept.append(step - 1)
            break
        if np.max(np.abs(v - v_ref)) > cfg.divergence_v_limit:
            outcome, reason = "diverged", "voltage excursion beyond limit"
        elif np.max(np.abs(v - v_prev)) <= cfg.conv_tol:
            outcome = "converged"
        if step % cfg.keep_every == 0 or outcome != "max_steps" or step == cfg.max_steps:
            vs.append(v)
            qs.append(q)
            kept.append(step)
        if outcome != "max_steps":
            break
        v_prev, q_prev = v, q
    v_final = vs[-1]
    return ClosedLoopTrace(np.array(vs), np.array(qs), np.array(kept), outcome, step, v_final,
                           deviation_metrics(v_final, v_ref), reason)


def simulate_closed_loop(net: NetworkModel, k, scen: Scenario, v_ref=1.0,
                         cfg: LoopConfig = LoopConfig()) -> ClosedLoopTrace:
    """Iterate controller and nonlinear power flow from the open-loop state (q_g = 0)."""
    p = scen.p
    q_d = scen.q_d
    start = solve_pf(net, Injection(p, -q_d), cfg.pf)
    if not start.converged:
        raise SimulationError(f"open-loop power flow fails for scenario {scen.id}")

    def plant(q_g):
        try:
            sol = solve_pf(net, Injection(p, q_g - q_d), cfg.pf)
        except InjectionError:
            return None
        return sol.v if sol.converged else None

    return _run(plant, start.v, k, v_ref, cfg)


def simulate_linear_loop(model, offset, k, v_ref=1.0, cfg: LoopConfig = LoopConfig()) -> ClosedLoopTrace:
    """Same loop with the linear plant ``v = S q_g + v_tilde`` in place of the power flow."""
    return _run(lambda q: model.predict(offset, q), offset.v_tilde.copy(), k, v_ref, cfg)


def alternating_increments(trace: ClosedLoopTrace, node: int, last: int = 6) -> bool:
    """True when the final ``last`` voltage increments at ``node`` alternate in sign."""
    dv = np.diff(trace.v_history[:, node])[-last:]
    return len(dv) == last and bool(np.all(np.sign(dv[1:]) == -np.sign(dv[:-1])) and np.all(dv != 0))

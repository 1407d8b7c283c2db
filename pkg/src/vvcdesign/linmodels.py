"""Linear plant models: the data-driven linearized power flow (LPF) and LinDistFlow (LDF).

Both expose the same small surface used by the design and simulation code:
``sensitivity`` (the matrix mapping controlled reactive injections to
voltage), ``offset(scenario)`` and ``predict(offset, q_g)``.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, JacobianError, ModelMismatchError
from .network import NetworkModel
from .powerflow import Injection, PfConfig, solve_pf, solve_pf_many
from .scenario import Scenario, ScenarioSet

log = logging.getLogger(__name__)

DEFAULT_FD_EPS = 1e-6


@dataclass(frozen=True)
class ScenarioOffset:
    v_tilde: np.ndarray


@dataclass(frozen=True, eq=False)
class LpfModel:
    v_base: np.ndarray
    p0: np.ndarray
    q0: np.ndarray
    Jp: np.ndarray
    Jq: np.ndarray
    finite_diff_eps: float = DEFAULT_FD_EPS
    node_ids: tuple[str, ...] = ()
    gen_idx: tuple[int, ...] = ()
    fingerprint: str = ""

    kind = "lpf"

    @property
    def n(self) -> int:
        return len(self.v_base)

    @property
    def sensitivity(self) -> np.ndarray:
        return self.Jq

    def evaluate(self, p, q) -> np.ndarray:
        """Full first-order model at net injections (p, q)."""
        return self.v_base + self.Jp @ (np.asarray(p) - self.p0) + self.Jq @ (np.asarray(q) - self.q0)

    def offset(self, scen: Scenario) -> ScenarioOffset:
        return lpf_offset(self, scen)

    def predict(self, offset: ScenarioOffset, q_g) -> np.ndarray:
        return lpf_predict(self, offset, q_g)

    def to_dict(self) -> dict:
        return {
            "kind": "lpf",
            "fingerprint": self.fingerprint,
            "node_ids": list(self.node_ids),
            "generators": [self.node_ids[i] for i in self.gen_idx] if self.node_ids else list(self.gen_idx),
            "finite_diff_eps": self.finite_diff_eps,
            "v_base": self.v_base.tolist(),
            "p0": self.p0.tolist(),
            "q0": self.q0.tolist(),
            "Jp": self.Jp.tolist(),
            "Jq": self.Jq.tolist(),
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))


@dataclass(frozen=True, eq=False)
class LdfModel:
    X: np.ndarray
    R: np.ndarray
    v_flat: np.ndarray
    node_ids: tuple[str, ...] = ()
    gen_idx: tuple[int, ...] = ()
    fingerprint: str = ""

    kind = "ldf"

    @property
    def n(self) -> int:
        return len(self.v_flat)

    @property
    def sensitivity(self) -> np.ndarray:
        return self.X

    def evaluate(self, p, q) -> np.ndarray:
        return self.v_flat + self.R @ np.asarray(p) + self.X @ np.asarray(q)

    def offset(self, scen: Scenario) -> ScenarioOffset:
        _check_len(self.n, scen.p_g, scen.p_d, scen.q_d)
        return ScenarioOffset(self.v_flat + self.R @ scen.p - self.X @ scen.q_d)

    def predict(self, offset: ScenarioOffset, q_g) -> np.ndarray:
        _check_len(self.n, offset.v_tilde, q_g)
        return self.X @ np.asarray(q_g) + offset.v_tilde

    def to_dict(self) -> dict:
        return {
            "kind": "ldf",
            "fingerprint": self.fingerprint,
            "node_ids": list(self.node_ids),
            "generators": [self.node_ids[i] for i in self.gen_idx] if self.node_ids else list(self.gen_idx),
            "v_flat": self.v_flat.tolist(),
            "X": self.X.tolist(),
            "R": self.R.tolist(),
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))


def _check_len(n, *vecs):
    for v in vecs:
        if np.shape(v) != (n,):
            raise DimensionError(f"expected a length-{n} vector, got shape {np.shape(v)}")


def load_model(path, net: NetworkModel | None = None):
    """Read an LPF or LDF model file; with ``net`` given, refuse a mismatched feeder."""
    d = json.loads(Path(path).read_text())
    ids = tuple(d.get("node_ids", ()))
    pos = {nid: i for i, nid in enumerate(ids)}
    gens = tuple(pos[g] if g in pos else int(g) for g in d.get("generators", ()))
    if net is not None and d.get("fingerprint") and d["fingerprint"] != net.fingerprint:
        raise ModelMismatchError(f"{path} was built for a different feeder")
    if d.get("kind", "lpf") == "ldf":
        return LdfModel(np.array(d["X"]), np.array(d["R"]), np.array(d["v_flat"]), ids, gens,
                        d.get("fingerprint", ""))
    return LpfModel(
        v_base=np.array(d["v_base"]),
        p0=np.array(d["p0"]),
        q0=np.array(d["q0"]),
        Jp=np.array(d["Jp"]),
        Jq=np.array(d["Jq"]),
        finite_diff_eps=float(d.get("finite_diff_eps", DEFAULT_FD_EPS)),
        node_ids=ids,
        gen_idx=gens,
        fingerprint=d.get("fingerprint", ""),
    )


def build_jacobians(net: NetworkModel, p0, q0, eps: float = DEFAULT_FD_EPS,
                    cfg: PfConfig = PfConfig(), workers: int = 1) -> LpfModel:
    """Centered finite-difference sensitivities around (p0, q0).

    All 4n perturbed power flows are independent; they are solved as batches
    spread over ``workers`` threads.
    """
    p0 = np.asarray(p0, dtype=float)
    q0 = np.asarray(q0, dtype=float)
    n = net.n
    _check_len(n, p0, q0)
    base = solve_pf(net, Injection(p0, q0), cfg)
    if not base.converged:
        raise JacobianError("power flow does not converge at the operating point")

    E = eps * np.eye(n)
    P = np.vstack([p0 + E, p0 - E, np.tile(p0, (2 * n, 1))])
    Q = np.vstack([np.tile(q0, (2 * n, 1)), q0 + E, q0 - E])
    sol = solve_pf_many(net, P, Q, cfg, workers=workers, chunk=max(1, -(-4 * n // max(workers, 1))))
    if not sol.converged.all():
        bad = int(np.flatnonzero(~sol.converged)[0])
        col = bad % n
        which = "Jp" if bad < 2 * n else "Jq"
        raise JacobianError(f"perturbed power flow failed for {which} column {col}", column=col)
    v = sol.v
    Jp = ((v[:n] - v[n:2 * n]) / (2 * eps)).T
    Jq = ((v[2 * n:3 * n] - v[3 * n:]) / (2 * eps)).T
    return LpfModel(
        v_base=base.v, p0=p0, q0=q0, Jp=Jp, Jq=Jq, finite_diff_eps=eps,
        node_ids=tuple(net.node_ids), gen_idx=tuple(int(g) for g in net.gen_idx),
        fingerprint=net.fingerprint,
    )


def lpf_offset(model: LpfModel, scen: Scenario) -> ScenarioOffset:
    """Constant part of the LPF once the controlled q_g is split out."""
    _check_len(model.n, scen.p_g, scen.p_d, scen.q_d)
    v = model.v_base + model.Jp @ (scen.p - model.p0) - model.Jq @ (model.q0 + scen.q_d)
    return ScenarioOffset(v)


def lpf_predict(model: LpfModel, offset: ScenarioOffset, q_g) -> np.ndarray:
    _check_len(model.n, offset.v_tilde, q_g)
    return model.Jq @ np.asarray(q_g, dtype=float) + offset.v_tilde


def build_ldf(net: NetworkModel) -> LdfModel:
    T = net.path_matrix
    X = T.T @ (net.z.imag[:, None] * T)
    R = T.T @ (net.z.real[:, None] * T)
    return LdfModel(X=X, R=R, v_flat=np.full(net.n, net.head_voltage),
                    node_ids=tuple(net.node_ids), gen_idx=tuple(int(g) for g in net.gen_idx),
                    fingerprint=net.fingerprint)


@dataclass
class ErrorReport:
    scenario_ids: list[str]
    node_ids: list[str]
    v_ac: np.ndarray  # (m, n)
    v_model: dict[str, np.ndarray] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)

    def errors(self, model: str) -> np.ndarray:
        return self.v_model[model] - self.v_ac

    def max_abs(self, model: str) -> float:
        e = self.errors(model)
        return float(np.max(np.abs(e))) if e.size else 0.0

    @property
    def summary(self) -> dict:
        return {m: {"max_abs_error": self.max_abs(m),
                    "mean_abs_error": float(np.mean(np.abs(self.errors(m)))) if self.v_ac.size else 0.0}
                for m in self.v_model} | {"scenarios": len(self.scenario_ids), "skipped": len(self.skipped)}

    def histogram(self, bins: int = 50) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        """Shared bin edges and per-model counts of signed errors."""
        lim = max((self.max_abs(m) for m in self.v_model), default=0.0) or 1e-12
        edges = np.linspace(-lim, lim, bins + 1)
        return edges, {m: np.histogram(self.errors(m).ravel(), bins=edges)[0] for m in self.v_model}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scenario_id", "node_id", "model", "v_model", "v_ac", "error"])
            for m, vm in self.v_model.items():
                for s, sid in enumerate(self.scenario_ids):
                    for i, nid in enumerate(self.node_ids):
                        w.writerow([sid, nid, m, repr(vm[s, i]), repr(self.v_ac[s, i]),
                                    repr(vm[s, i] - self.v_ac[s, i])])

    def histogram_csv(self, path, bins: int = 50) -> None:
        edges, counts = self.histogram(bins)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "bin_lo", "bin_hi", "count"])
            for m, c in counts.items():
                for lo, hi, k in zip(edges[:-1], edges[1:], c):
                    w.writerow([m, repr(lo), repr(hi), int(k)])


def model_error_report(net: NetworkModel, models: dict, scenarios: ScenarioSet,
                       cfg: PfConfig = PfConfig(), workers: int = 1) -> ErrorReport:
    """Signed per-node errors of each linear model against the AC solution (no VVC action)."""
    P = scenarios.p
    Q = -scenarios.q_d
    sol = solve_pf_many(net, P, Q, cfg, workers=workers)
    ok = sol.converged
    skipped = [sid for sid, good in zip(scenarios.ids, ok) if not good]
    for sid in skipped:
        log.warning("scenario %s skipped: power flow did not converge", sid)
    rep = ErrorReport(
        scenario_ids=[sid for sid, good in zip(scenarios.ids, ok) if good],
        node_ids=list(net.node_ids),
        v_ac=sol.v[ok],
        skipped=skipped,
    )
    for name, model in models.items():
        rep.v_model[name] = np.array([model.evaluate(p, q) for p, q in zip(P[ok], Q[ok])]).reshape(-1, net.n)
    return rep

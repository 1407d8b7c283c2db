"""Nonlinear AC power flow for radial feeders with constant-power (P-Q) nodes.

The solver is a backward/forward sweep in matrix form: injection currents
are summed onto branches through the path matrix and voltage drops are
pushed back down the same paths, so one sweep is ``V = V0 + Zpath @ I``.
Several injection patterns can be solved at once (columns of a batch);
every column iterates independently and freezes once converged.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import InjectionError
from .network import NetworkModel

MAX_PLAUSIBLE_PU = 10.0
# sweeps continue past the mismatch tolerance until the voltage update hits
# round-off, so finite-difference Jacobians see no solver noise
_VSTEP_FLOOR = 1e-13


@dataclass(frozen=True)
class PfConfig:
    tol: float = 1e-10
    max_iter: int = 100


@dataclass(frozen=True)
class Injection:
    """Net (generation minus demand) injections in p.u., one entry per non-head node."""

    p: np.ndarray
    q: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "Injection":
        return cls(np.zeros(n), np.zeros(n))


@dataclass(frozen=True)
class VoltageProfile:
    v: np.ndarray
    converged: bool
    iterations: int
    max_mismatch: float
    V: np.ndarray | None = None  # complex phasors, head angle 0


@dataclass(frozen=True)
class BatchProfile:
    v: np.ndarray  # (m, n)
    converged: np.ndarray  # (m,)
    iterations: np.ndarray
    max_mismatch: np.ndarray
    V: np.ndarray  # (m, n) complex


def _check(net: NetworkModel, P: np.ndarray, Q: np.ndarray) -> None:
    if P.shape != Q.shape or P.shape[-1] != net.n:
        raise InjectionError(f"injections must have length n={net.n}, got {P.shape} and {Q.shape}")
    if not (np.all(np.isfinite(P)) and np.all(np.isfinite(Q))):
        raise InjectionError("injections must be finite")
    worst = max(np.max(np.abs(P), initial=0.0), np.max(np.abs(Q), initial=0.0))
    if worst > MAX_PLAUSIBLE_PU:
        raise InjectionError(f"implausible injection magnitude {worst:.3g} p.u. (limit {MAX_PLAUSIBLE_PU})")


def power_mismatch(net: NetworkModel, V: np.ndarray, S: np.ndarray) -> np.ndarray:
    """|S_calc - S| per node for complex voltages V (nodes along the first axis)."""
    V0 = net.head_voltage
    parent = net.parent
    Vpar = np.where((parent == 0)[:, None], V0, V[np.maximum(parent - 1, 0)])
    Ib = (Vpar - V) / net.z[:, None]
    Iinj = net.children_matrix @ Ib - Ib
    return np.abs(V * np.conj(Iinj) - S)


def solve_pf_batch(net: NetworkModel, P, Q, cfg: PfConfig = PfConfig()) -> BatchProfile:
    """Solve ``m`` power flows at once; ``P`` and ``Q`` have shape (m, n)."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    _check(net, P, Q)
    m = P.shape[0]
    S = (P + 1j * Q).T  # (n, m)
    V0 = complex(net.head_voltage)
    Z = net.zpath
    V = np.full((net.n, m), V0, dtype=complex)
    active = np.ones(m, dtype=bool)
    iters = np.zeros(m, dtype=int)
    mism = np.full(m, np.inf)
    converged = np.zeros(m, dtype=bool)
    with np.errstate(all="ignore"):
        for it in range(1, cfg.max_iter + 1):
            cols = np.flatnonzero(active)
            if cols.size == 0:
                break
            Va = V[:, cols]
            Vn = V0 + Z @ np.conj(S[:, cols] / Va)
            step = np.max(np.abs(Vn - Va), axis=0, initial=0.0)
            V[:, cols] = Vn
            iters[cols] = it
            mm = np.max(power_mismatch(net, Vn, S[:, cols]), axis=0, initial=0.0)
            mism[cols] = mm
            bad = ~np.all(np.isfinite(Vn), axis=0) | (np.min(np.abs(Vn), axis=0, initial=np.inf) < 1e-3)
            done = (mm <= cfg.tol) & (step <= _VSTEP_FLOOR)
            converged[cols[done & ~bad]] = True
            active[cols[done | bad]] = False
    # a column that met the power tolerance but never stalled is still a solution
    converged |= (mism <= cfg.tol) & np.all(np.isfinite(V), axis=0)
    return BatchProfile(v=np.abs(V).T, converged=converged, iterations=iters, max_mismatch=mism, V=V.T)


def solve_pf(net: NetworkModel, inj: Injection, cfg: PfConfig = PfConfig()) -> VoltageProfile:
    """Voltage magnitudes for one set of net injections (flat start every call)."""
    P = np.asarray(inj.p, dtype=float)
    Q = np.asarray(inj.q, dtype=float)
    if P.ndim != 1:
        raise InjectionError("solve_pf takes one injection vector; use solve_pf_batch for many")
    out = solve_pf_batch(net, P[None, :], Q[None, :], cfg)
    return VoltageProfile(
        v=out.v[0],
        converged=bool(out.converged[0]),
        iterations=int(out.iterations[0]),
        max_mismatch=float(out.max_mismatch[0]),
        V=out.V[0],
    )


def solve_pf_many(net: NetworkModel, P, Q, cfg: PfConfig = PfConfig(), workers: int = 1,
                  chunk: int = 256) -> BatchProfile:
    """Batch solve split into chunks that run on a thread pool."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    m = P.shape[0]
    if m == 0:
        z = np.zeros((0, net.n))
        return BatchProfile(z, np.zeros(0, bool), np.zeros(0, int), np.zeros(0), z.astype(complex))
    bounds = [(i, min(i + chunk, m)) for i in range(0, m, chunk)]

    def run(b):
        return solve_pf_batch(net, P[b[0]:b[1]], Q[b[0]:b[1]], cfg)

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, bounds))
    else:
        parts = [run(b) for b in bounds]
    return BatchProfile(
        v=np.vstack([p.v for p in parts]),
        converged=np.concatenate([p.converged for p in parts]),
        iterations=np.concatenate([p.iterations for p in parts]),
        max_mismatch=np.concatenate([p.max_mismatch for p in parts]),
        V=np.vstack([p.V for p in parts]),
    )

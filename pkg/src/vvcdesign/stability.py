"""Stability criteria for the linear grid/VVC loop ``v[t+1] = Jq K v[t] + const``.

Three tests of increasing conservatism are offered: the spectral radius of
``Jq K`` (exact), its induced 2-norm, and the pair of induced 1- and
inf-norms. Because ``K`` is diagonal and zero off the generator set, only
the generator columns of ``Jq`` matter, which keeps every evaluation small.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError

CRITERIA = ("rho", "norm2", "holder")
DEFAULT_EPSILON = 1e-3


@dataclass(frozen=True)
class StabilityVerdict:
    criterion: str
    value: float
    margin: float
    feasible: bool
    epsilon: float
    detail: dict | None = None

    def to_dict(self) -> dict:
        out = {"criterion": self.criterion, "value": self.value, "margin": self.margin,
               "feasible": self.feasible, "epsilon": self.epsilon}
        if self.detail:
            out["detail"] = self.detail
        return out


def check_gains(k, gens, n: int | None = None, tol: float = 0.0) -> np.ndarray:
    """Validate a full-length gain vector: non-positive on generators, zero elsewhere."""
    k = np.asarray(k, dtype=float)
    if n is not None and k.shape != (n,):
        raise DimensionError(f"gain vector must have length {n}")
    gens = np.asarray(gens, dtype=int)
    mask = np.ones(k.size, dtype=bool)
    mask[gens] = False
    if np.any(k[gens] > tol):
        raise ValueError("gains must be non-positive at generator nodes")
    if np.any(k[mask] != 0):
        raise ValueError("gains must be zero at non-generator nodes")
    return k


def reduce_generator_block(Jq, gens, k) -> np.ndarray:
    """``Jq[gens, gens] @ diag(k[gens])``: carries every nonzero eigenvalue of ``Jq @ diag(k)``."""
    gens = np.asarray(gens, dtype=int)
    if gens.size == 0:
        raise ValueError("generator set is empty")
    Jq = np.asarray(Jq, dtype=float)
    kg = np.asarray(k, dtype=float)[gens]
    return Jq[np.ix_(gens, gens)] * kg[None, :]


def spectral_radius(M) -> float:
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return 0.0
    if not np.all(np.isfinite(M)):
        raise np.linalg.LinAlgError("matrix has non-finite entries")
    # LAPACK geev: Hessenberg reduction followed by shifted QR
    return float(np.max(np.abs(np.linalg.eigvals(M))))


def norm2(M) -> float:
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return 0.0
    return float(np.linalg.svd(M, compute_uv=False)[0])


def norm1_inf(M) -> tuple[float, float]:
    M = np.abs(np.asarray(M, dtype=float))
    if M.size == 0:
        return 0.0, 0.0
    return float(M.sum(axis=0).max()), float(M.sum(axis=1).max())


def column_block(Jq, gens, k) -> np.ndarray:
    """Nonzero columns of ``Jq @ diag(k)``, shape (n, n_g)."""
    gens = np.asarray(gens, dtype=int)
    return np.asarray(Jq, dtype=float)[:, gens] * np.asarray(k, dtype=float)[gens][None, :]


def criterion_value(Jq, gens, k, criterion: str) -> float:
    """Scalar compared against ``1 - epsilon`` for the chosen criterion."""
    gens = np.asarray(gens, dtype=int)
    if gens.size == 0:
        return 0.0
    if criterion == "rho":
        return spectral_radius(reduce_generator_block(Jq, gens, k))
    if criterion == "norm2":
        return norm2(column_block(Jq, gens, k))
    if criterion == "holder":
        return max(norm1_inf(column_block(Jq, gens, k)))
    raise ValueError(f"unknown criterion {criterion!r}; choose from {CRITERIA}")


def _sensitivity(model):
    if isinstance(model, np.ndarray):
        return model, None
    return model.sensitivity, getattr(model, "gen_idx", None)


def check_stability(model, k, criterion: str = "rho", epsilon: float = DEFAULT_EPSILON,
                    gens=None) -> StabilityVerdict:
    """Evaluate one criterion for gains ``k`` (full length n).

    ``model`` is an LPF model (uses Jq), an LDF model (uses X) or a bare
    sensitivity matrix. ``gens`` defaults to the model's generator set or,
    for a bare matrix, to the nonzero entries of ``k``.
    """
    Jq, model_gens = _sensitivity(model)
    k = np.asarray(k, dtype=float)
    if gens is None:
        gens = model_gens if model_gens is not None else np.flatnonzero(k)
    gens = np.asarray(gens, dtype=int)
    check_gains(k, gens, Jq.shape[0])
    detail = None
    try:
        value = criterion_value(Jq, gens, k, criterion)
        if criterion == "holder" and gens.size:
            n1, ninf = norm1_inf(column_block(Jq, gens, k))
            detail = {"norm1": n1, "norminf": ninf}
    except np.linalg.LinAlgError as exc:
        return StabilityVerdict(criterion, float("inf"), float("-inf"), False, epsilon,
                                {"error": str(exc)})
    margin = (1.0 - epsilon) - value
    return StabilityVerdict(criterion, value, margin, bool(margin >= 0), epsilon, detail)


def all_values(model, k, gens=None) -> dict:
    """Every criterion's value for reporting (rho, norm2, norm1, norminf)."""
    Jq, model_gens = _sensitivity(model)
    if gens is None:
        gens = model_gens if model_gens is not None else np.flatnonzero(k)
    gens = np.asarray(gens, dtype=int)
    if gens.size == 0:
        return {"rho": 0.0, "norm2": 0.0, "norm1": 0.0, "norminf": 0.0}
    B = column_block(Jq, gens, k)
    n1, ninf = norm1_inf(B)
    return {"rho": spectral_radius(reduce_generator_block(Jq, gens, k)), "norm2": norm2(B),
            "norm1": n1, "norminf": ninf}


def region_grid(Jq, k_min: float = -1.5, k_max: float = 0.0, points: int = 200,
                epsilon: float = DEFAULT_EPSILON) -> dict[str, np.ndarray]:
    """Feasibility of all three criteria over a square grid of two-generator gains.

    Returns the grid axes and boolean masks indexed ``[i1, i2]``.
    """
    Jq = np.asarray(Jq, dtype=float)
    if Jq.shape != (2, 2):
        raise DimensionError("region sampling needs a 2x2 sensitivity block")
    ks = np.linspace(k_min, k_max, points)
    k1, k2 = np.meshgrid(ks, ks, indexing="ij")
    M = np.empty(k1.shape + (2, 2))
    M[..., 0, 0] = Jq[0, 0] * k1
    M[..., 1, 0] = Jq[1, 0] * k1
    M[..., 0, 1] = Jq[0, 1] * k2
    M[..., 1, 1] = Jq[1, 1] * k2
    bound = 1.0 - epsilon
    rho = np.max(np.abs(np.linalg.eigvals(M)), axis=-1)
    n2 = np.linalg.norm(M, ord=2, axis=(-2, -1))
    n1 = np.abs(M).sum(axis=-2).max(axis=-1)
    ninf = np.abs(M).sum(axis=-1).max(axis=-1)
    return {
        "k1": ks,
        "k2": ks,
        "rho": rho <= bound,
        "norm2": n2 <= bound,
        "holder": (n1 <= bound) & (ninf <= bound),
    }


def uniform_slopes(model, criterion: str = "holder", epsilon: float = DEFAULT_EPSILON,
                   fraction: float = 1.0) -> np.ndarray:
    """Largest common slope at every generator that meets ``criterion`` (scaled by ``fraction``).

    All criteria are positively homogeneous in k, so the boundary slope is
    ``-(1 - epsilon) / value(-1 at every generator)``.
    """
    Jq, gens = _sensitivity(model)
    gens = np.asarray(gens, dtype=int)
    k = np.zeros(Jq.shape[0])
    if gens.size == 0:
        return k
    k[gens] = -1.0
    unit = criterion_value(Jq, gens, k, criterion)
    k[gens] = -fraction * (1.0 - epsilon) / unit
    return k

"""Loading conditions: time-series ingest, train/test split, operating point and scenario picks."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ScenarioError
from .network import NetworkModel
from .powerflow import PfConfig, solve_pf_many

log = logging.getLogger(__name__)

CSV_COLUMNS = ["timestamp", "node_id", "p_d_kw", "q_d_kvar", "p_g_kw"]
HOURS_PER_YEAR = 8760


@dataclass(frozen=True, eq=False)
class Scenario:
    id: str
    p_g: np.ndarray
    p_d: np.ndarray
    q_d: np.ndarray

    @property
    def p(self) -> np.ndarray:
        return self.p_g - self.p_d

    @property
    def q(self) -> np.ndarray:
        """Net reactive injection with no controlled VArs."""
        return -self.q_d

    @classmethod
    def zero(cls, n: int, id: str = "zero") -> "Scenario":
        return cls(id, np.zeros(n), np.zeros(n), np.zeros(n))

    @classmethod
    def from_net(cls, id: str, p, q) -> "Scenario":
        """Split net injections into generation/demand parts (q is taken as -q_d)."""
        p = np.asarray(p, dtype=float)
        return cls(id, np.maximum(p, 0.0), np.maximum(-p, 0.0), -np.asarray(q, dtype=float))


@dataclass(eq=False)
class ScenarioSet:
    ids: list[str]
    p_g: np.ndarray  # (m, n)
    p_d: np.ndarray
    q_d: np.ndarray
    fingerprint: str = ""

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> Scenario:
        return Scenario(self.ids[i], self.p_g[i], self.p_d[i], self.q_d[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def p(self) -> np.ndarray:
        return self.p_g - self.p_d

    def index(self, sid: str) -> int:
        try:
            return self.ids.index(sid)
        except ValueError:
            raise ScenarioError(f"unknown scenario id {sid!r}") from None

    def get(self, sid: str) -> Scenario:
        return self[self.index(sid)]

    def subset(self, rows) -> "ScenarioSet":
        rows = np.asarray(rows, dtype=int)
        return ScenarioSet([self.ids[r] for r in rows], self.p_g[rows], self.p_d[rows],
                           self.q_d[rows], self.fingerprint)

    @classmethod
    def empty(cls, n: int, fingerprint: str = "") -> "ScenarioSet":
        z = np.zeros((0, n))
        return cls([], z, z.copy(), z.copy(), fingerprint)

    @classmethod
    def from_scenarios(cls, scens, fingerprint: str = "") -> "ScenarioSet":
        scens = list(scens)
        return cls([s.id for s in scens], np.array([s.p_g for s in scens]),
                   np.array([s.p_d for s in scens]), np.array([s.q_d for s in scens]), fingerprint)


@dataclass(frozen=True)
class SplitResult:
    train: ScenarioSet
    test: ScenarioSet
    seed: int
    fraction: float


def load_timeseries(path, net: NetworkModel) -> ScenarioSet:
    """Read the long-format scenario CSV (kW/kVAr) into per-unit vectors."""
    try:
        df = pd.read_csv(path, dtype={"timestamp": str, "node_id": str})
    except pd.errors.EmptyDataError:
        raise ScenarioError(f"{path}: no header") from None
    missing = [c for c in CSV_COLUMNS if c not in df.columns]
    if missing:
        raise ScenarioError(f"{path}: missing columns {missing}")
    if df.empty:
        return ScenarioSet.empty(net.n, net.fingerprint)
    for c in ("p_d_kw", "q_d_kvar", "p_g_kw"):
        df[c] = pd.to_numeric(df[c], errors="coerce").fillna(0.0)
    unknown = sorted(set(df["node_id"]) - set(net.node_ids))
    if unknown:
        raise ScenarioError(f"unknown node ids {unknown[:5]}")
    if (df["p_d_kw"] < 0).any():
        raise ScenarioError("negative active demand")
    if (df["p_g_kw"] < 0).any():
        raise ScenarioError("negative generation")
    gen_ids = {net.nodes[g].id for g in net.gen_idx}
    bad = df.loc[(df["p_g_kw"] != 0) & ~df["node_id"].isin(gen_ids), "node_id"]
    if len(bad):
        raise ScenarioError(f"generation at non-generator node {bad.iloc[0]!r}")
    if df.duplicated(["timestamp", "node_id"]).any():
        raise ScenarioError("duplicate (timestamp, node_id) rows")

    ids = sorted(df["timestamp"].unique())
    row = {t: i for i, t in enumerate(ids)}
    r = df["timestamp"].map(row).to_numpy()
    c = df["node_id"].map(lambda s: net.index_of[s] - 1).to_numpy()
    scale = 1.0 / (1000.0 * net.base_mva)
    out = []
    for col in ("p_g_kw", "p_d_kw", "q_d_kvar"):
        a = np.zeros((len(ids), net.n))
        a[r, c] = df[col].to_numpy() * scale
        out.append(a)
    return ScenarioSet(ids, out[0], out[1], out[2], net.fingerprint)


def save_timeseries(scens: ScenarioSet, net: NetworkModel, path) -> None:
    scale = 1000.0 * net.base_mva
    ids = net.node_ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for s, sid in enumerate(scens.ids):
            pd_, qd, pg = scens.p_d[s] * scale, scens.q_d[s] * scale, scens.p_g[s] * scale
            for i in np.flatnonzero((pd_ != 0) | (qd != 0) | (pg != 0)):
                w.writerow([sid, ids[i], f"{pd_[i]:.6f}", f"{qd[i]:.6f}", f"{pg[i]:.6f}"])


def split_train_test(scens: ScenarioSet, fraction: float = 0.9, seed: int = 0) -> SplitResult:
    """Seeded random split; both parts keep the input order."""
    if not 0.0 < fraction < 1.0:
        raise ScenarioError("fraction must lie in (0, 1)")
    m = len(scens)
    perm = np.random.default_rng(seed).permutation(m)
    n_train = int(np.floor(fraction * m))
    train = np.sort(perm[:n_train])
    test = np.sort(perm[n_train:])
    return SplitResult(scens.subset(train), scens.subset(test), seed, fraction)


def average_operating_point(train: ScenarioSet) -> tuple[np.ndarray, np.ndarray]:
    if len(train) == 0:
        raise ScenarioError("operating point needs at least one scenario")
    return train.p.mean(axis=0), (-train.q_d).mean(axis=0)


def mean_scenario(train: ScenarioSet, id: str = "operating-point") -> Scenario:
    """Scenario of mean generation and demand; its net injections are the operating point."""
    if len(train) == 0:
        raise ScenarioError("operating point needs at least one scenario")
    return Scenario(id, train.p_g.mean(axis=0), train.p_d.mean(axis=0), train.q_d.mean(axis=0))


def perturbed_scenarios(base: Scenario, count: int, spread: float = 0.2, seed: int = 0,
                        prefix: str = "rand") -> ScenarioSet:
    """Independent uniform per-node scaling of every component by ``1 +/- spread``."""
    rng = np.random.default_rng(seed)
    n = len(base.p_g)
    f = rng.uniform(1.0 - spread, 1.0 + spread, size=(3, count, n))
    ids = [f"{prefix}{i:04d}" for i in range(count)]
    return ScenarioSet(ids, f[0] * base.p_g, f[1] * base.p_d, f[2] * base.q_d)


def open_loop_voltages(scens: ScenarioSet, net: NetworkModel, cfg: PfConfig = PfConfig(),
                       workers: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Voltages with q_g = 0 and a mask of scenarios whose power flow converged."""
    sol = solve_pf_many(net, scens.p, -scens.q_d, cfg, workers=workers)
    for sid in np.asarray(scens.ids, dtype=object)[~sol.converged]:
        log.warning("scenario %s skipped: power flow did not converge", sid)
    return sol.v, sol.converged


def _pick(values: np.ndarray, ok: np.ndarray, largest: bool) -> int:
    vals = np.where(ok, values, -np.inf if largest else np.inf)
    # argmax/argmin return the first hit, i.e. the earliest id
    return int(np.argmax(vals) if largest else np.argmin(vals))


def select_worst_case(train: ScenarioSet, net: NetworkModel, cfg: PfConfig = PfConfig(),
                      workers: int = 1) -> Scenario:
    """Scenario with the largest open-loop 2-norm deviation from 1 p.u."""
    if len(train) == 0:
        raise ScenarioError("empty scenario set")
    v, ok = open_loop_voltages(train, net, cfg, workers)
    if not ok.any():
        raise ScenarioError("no scenario has a converged power flow")
    dev2 = np.linalg.norm(v - 1.0, axis=1)
    return train[_pick(dev2, ok, largest=True)]


def select_exemplary_hours(test: ScenarioSet, net: NetworkModel, cfg: PfConfig = PfConfig(),
                           workers: int = 1) -> dict[str, Scenario]:
    """A: peak demand, B: peak generation, C: lowest node voltage, D: highest node voltage."""
    if len(test) == 0:
        raise ScenarioError("empty scenario set")
    v, ok = open_loop_voltages(test, net, cfg, workers)
    if not ok.any():
        raise ScenarioError("no scenario has a converged power flow")
    return {
        "A": test[_pick(test.p_d.sum(axis=1), ok, True)],
        "B": test[_pick(test.p_g.sum(axis=1), ok, True)],
        "C": test[_pick(v.min(axis=1), ok, False)],
        "D": test[_pick(v.max(axis=1), ok, True)],
    }


@dataclass
class ProfileConfig:
    """Synthetic-year settings. Load entries are (kW, kVAr) at peak; PV entries are kW capacity."""

    loads_kw_kvar: dict[str, tuple[float, float]]
    pv_kw: dict[str, float] = field(default_factory=dict)
    load_factor: float = 0.6
    noise: float = 0.05
    start: str = "2023-01-01T00:00"

    @classmethod
    def from_dict(cls, d: dict) -> "ProfileConfig":
        return cls(
            loads_kw_kvar={str(k): tuple(v) for k, v in d.get("loads_kw_kvar", {}).items()},
            pv_kw={str(k): float(v) for k, v in d.get("pv_kw", {}).items()},
            load_factor=float(d.get("load_factor", 0.6)),
            noise=float(d.get("noise", 0.05)),
            start=d.get("start", "2023-01-01T00:00"),
        )

    @classmethod
    def load(cls, path) -> "ProfileConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def validate(self, net: NetworkModel) -> None:
        known = set(net.node_ids)
        gens = {net.nodes[g].id for g in net.gen_idx}
        for nid, (p, q) in self.loads_kw_kvar.items():
            if nid not in known:
                raise ScenarioError(f"profile: unknown load node {nid!r}")
            if p < 0 or q < 0:
                raise ScenarioError(f"profile: negative peak load at {nid!r}")
        for nid, cap in self.pv_kw.items():
            if nid not in gens:
                raise ScenarioError(f"profile: PV at non-generator node {nid!r}")
            if cap < 0:
                raise ScenarioError(f"profile: negative PV capacity at {nid!r}")
        if not 0.0 < self.load_factor <= 1.0:
            raise ScenarioError("profile: load_factor must lie in (0, 1]")
        if self.noise < 0:
            raise ScenarioError("profile: noise must be >= 0")


def load_shape(hours: np.ndarray) -> np.ndarray:
    """Residential daily shape times a winter/summer double-peaked season, mean 1 over a year."""
    hd = hours % 24
    day = hours // 24
    daily = 0.55 + 0.25 * np.exp(-(((hd - 8) / 2.0) ** 2)) + 0.55 * np.exp(-(((hd - 19) / 2.5) ** 2))
    season = 1.0 + 0.18 * np.cos(2 * np.pi * (day - 15) / 365) + 0.08 * np.cos(4 * np.pi * (day - 15) / 365)
    g = daily * season
    return g / g.mean()


def solar_shape(hours: np.ndarray) -> np.ndarray:
    """Clear-sky output per unit capacity: a noon-centred half sine, larger in summer."""
    hd = hours % 24
    day = hours // 24
    bell = np.clip(np.sin(np.pi * (hd - 6) / 12.0), 0.0, None) * ((hd > 6) & (hd < 18))
    season = 0.75 + 0.25 * np.cos(2 * np.pi * (day - 172) / 365)
    return bell * season


def synthesize_year(net: NetworkModel, config: ProfileConfig, seed: int = 0) -> ScenarioSet:
    config.validate(net)
    rng = np.random.default_rng(seed)
    hours = np.arange(HOURS_PER_YEAR)
    t0 = datetime.fromisoformat(config.start)
    ids = [(t0 + timedelta(hours=int(h))).strftime("%Y-%m-%dT%H:%M") for h in hours]
    scale = 1.0 / (1000.0 * net.base_mva)

    n = net.n
    peak_p = np.zeros(n)
    peak_q = np.zeros(n)
    for nid, (p, q) in config.loads_kw_kvar.items():
        peak_p[net.index_of[nid] - 1] = p * scale
        peak_q[net.index_of[nid] - 1] = q * scale
    shape = load_shape(hours)[:, None]
    mult = np.clip(1.0 + config.noise * rng.standard_normal((HOURS_PER_YEAR, n)), 0.0, None)
    p_d = config.load_factor * shape * mult * peak_p
    q_d = config.load_factor * shape * mult * peak_q

    cap = np.zeros(n)
    for nid, kw in config.pv_kw.items():
        cap[net.index_of[nid] - 1] = kw * scale
    days = HOURS_PER_YEAR // 24
    cloud_day = np.clip(1.0 - 4.0 * config.noise * np.abs(rng.standard_normal(days)), 0.1, 1.0)
    cloud = np.repeat(cloud_day, 24)[:, None]
    local = np.clip(1.0 - config.noise * np.abs(rng.standard_normal((HOURS_PER_YEAR, n))), 0.0, 1.0)
    p_g = solar_shape(hours)[:, None] * cloud * local * cap
    return ScenarioSet(ids, p_g, p_d, q_d, net.fingerprint)

"""Radial feeder descriptions and the per-unit network model.

The head node (fixed voltage) is index 0 and is excluded from every
n-vector. Non-head nodes get indices 1..n in file order; position ``i - 1``
of any n-vector belongs to node index ``i``.
"""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import FeederParseError, TopologyError, UnitError

ROLES = ("load", "generator", "junction")


@dataclass(frozen=True)
class NodeRecord:
    id: str
    index: int
    role: str
    base_kv: float | None = None


@dataclass(frozen=True)
class BranchRecord:
    from_index: int
    to_index: int
    r: float
    x: float


@dataclass(frozen=True)
class TopologyReport:
    depths: list[int]
    parents: dict[int, int]
    checks: dict[str, bool]
    messages: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    @property
    def max_depth(self) -> int:
        return max(self.depths, default=0)


@dataclass(frozen=True, eq=False)
class NetworkModel:
    head: NodeRecord
    nodes: tuple[NodeRecord, ...]
    branches: tuple[BranchRecord, ...]
    head_voltage: float = 1.0
    base_mva: float = 1.0
    base_kv_by_level: tuple[float, ...] = ()
    generator_set: tuple[int, ...] = ()

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def n_g(self) -> int:
        return len(self.generator_set)

    @property
    def node_ids(self) -> list[str]:
        return [nd.id for nd in self.nodes]

    @cached_property
    def gen_idx(self) -> np.ndarray:
        """0-based vector positions of the generator nodes."""
        return np.asarray(self.generator_set, dtype=int) - 1

    @cached_property
    def index_of(self) -> dict[str, int]:
        out = {nd.id: nd.index for nd in self.nodes}
        out[self.head.id] = 0
        return out

    @cached_property
    def parent(self) -> np.ndarray:
        """parent[i - 1] is the node index (0 = head) feeding node i."""
        par = np.zeros(self.n, dtype=int)
        for br in self.branches:
            par[br.to_index - 1] = br.from_index
        return par

    @cached_property
    def z(self) -> np.ndarray:
        """Series impedance of the branch feeding each node, ordered by node."""
        z = np.zeros(self.n, dtype=complex)
        for br in self.branches:
            z[br.to_index - 1] = complex(br.r, br.x)
        return z

    @cached_property
    def path_matrix(self) -> np.ndarray:
        """T[b, j] = 1 when the branch feeding node b+1 lies on the head-to-(j+1) path."""
        T = np.zeros((self.n, self.n))
        for j in range(self.n):
            a = j + 1
            while a != 0:
                T[a - 1, j] = 1.0
                a = self.parent[a - 1]
        return T

    @cached_property
    def zpath(self) -> np.ndarray:
        """Complex impedance shared by the head-to-i and head-to-j paths."""
        T = self.path_matrix
        return T.T @ (self.z[:, None] * T)

    @cached_property
    def depth(self) -> np.ndarray:
        return self.path_matrix.sum(axis=0).astype(int)

    @cached_property
    def children_matrix(self) -> np.ndarray:
        """C[i, c] = 1 when node c+1 is a child of node i+1 (head row omitted)."""
        C = np.zeros((self.n, self.n))
        for c in range(self.n):
            p = self.parent[c]
            if p:
                C[p - 1, c] = 1.0
        return C

    @cached_property
    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def to_dict(self) -> dict:
        """Per-unit feeder description in the JSON file layout."""
        ids = {0: self.head.id, **{nd.index: nd.id for nd in self.nodes}}
        nodes = [{"id": self.head.id, "role": self.head.role}]
        nodes += [{"id": nd.id, "role": nd.role} for nd in self.nodes]
        for rec, nd in zip(nodes, (self.head, *self.nodes)):
            if nd.base_kv is not None:
                rec["base_kv"] = nd.base_kv
        return {
            "base_mva": self.base_mva,
            "head_voltage_pu": self.head_voltage,
            "nodes": nodes,
            "branches": [
                {"from": ids[b.from_index], "to": ids[b.to_index], "r_pu": b.r, "x_pu": b.x}
                for b in self.branches
            ],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


def validate_radial(net: NetworkModel) -> TopologyReport:
    """Check the spanning-tree and sign invariants; failures are reported, not raised."""
    n = net.n
    msgs: list[str] = []
    parents: dict[int, int] = {}
    multi = False
    for br in net.branches:
        if br.to_index in parents:
            multi = True
            msgs.append(f"node index {br.to_index} has multiple parents")
        parents[br.to_index] = br.from_index

    adj: dict[int, list[int]] = {i: [] for i in range(n + 1)}
    for br in net.branches:
        adj[br.from_index].append(br.to_index)
    depth = {0: 0}
    queue = deque([0])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in depth:
                depth[v] = depth[u] + 1
                queue.append(v)
    reachable = len(depth) == n + 1
    if not reachable:
        missing = sorted(set(range(1, n + 1)) - set(depth))
        msgs.append(f"unreachable node indices {missing}")

    checks = {
        "branch_count": len(net.branches) == n,
        "single_parent": not multi and 0 not in parents,
        "reachable": reachable,
        "r_nonnegative": all(b.r >= 0 for b in net.branches),
        "x_positive": all(b.x > 0 for b in net.branches),
        "generators_valid": list(net.generator_set) == sorted(set(net.generator_set))
        and all(1 <= g <= n for g in net.generator_set),
        "head_voltage_positive": net.head_voltage > 0,
    }
    if not checks["branch_count"]:
        msgs.append(f"{len(net.branches)} branches for {n} non-head nodes")
    depths = [depth.get(i, -1) for i in range(1, n + 1)]
    return TopologyReport(depths=depths, parents=parents, checks=checks, messages=msgs)


def _num(rec, key, where):
    try:
        val = float(rec[key])
    except (TypeError, ValueError) as exc:
        raise FeederParseError(f"{where}: '{key}' is not a number") from exc
    if not np.isfinite(val):
        raise FeederParseError(f"{where}: '{key}' is not finite")
    return val


def feeder_from_dict(data: dict) -> NetworkModel:
    """Build a validated NetworkModel from the parsed feeder JSON."""
    if not isinstance(data, dict) or "nodes" not in data or "branches" not in data:
        raise FeederParseError("feeder must be an object with 'nodes' and 'branches'")
    raw_nodes = data["nodes"]
    raw_branches = data["branches"]
    if not isinstance(raw_nodes, list) or not isinstance(raw_branches, list):
        raise FeederParseError("'nodes' and 'branches' must be lists")

    roles: dict[str, str] = {}
    kv: dict[str, float | None] = {}
    order: list[str] = []
    for i, rec in enumerate(raw_nodes):
        if not isinstance(rec, dict) or "id" not in rec:
            raise FeederParseError(f"node entry {i} lacks an id")
        nid = str(rec["id"])
        if nid in roles:
            raise FeederParseError(f"duplicate node id {nid!r}")
        role = rec.get("role", "load")
        if role not in ROLES:
            raise FeederParseError(f"node {nid!r}: unknown role {role!r}")
        roles[nid] = role
        kv[nid] = _num(rec, "base_kv", f"node {nid!r}") if "base_kv" in rec else None
        order.append(nid)

    base_mva = _num(data, "base_mva", "feeder") if "base_mva" in data else None
    head_v = _num(data, "head_voltage_pu", "feeder") if "head_voltage_pu" in data else 1.0

    edges = []
    for i, rec in enumerate(raw_branches):
        where = f"branch {i}"
        if not isinstance(rec, dict) or "from" not in rec or "to" not in rec:
            raise FeederParseError(f"{where}: needs 'from' and 'to'")
        f, t = str(rec["from"]), str(rec["to"])
        for nid in (f, t):
            if nid not in roles:
                raise FeederParseError(f"{where}: unknown node id {nid!r}")
        if "r_pu" in rec or "x_pu" in rec:
            r, x = _num(rec, "r_pu", where), _num(rec, "x_pu", where)
        elif "r_ohm" in rec or "x_ohm" in rec:
            r_ohm, x_ohm = _num(rec, "r_ohm", where), _num(rec, "x_ohm", where)
            level = kv.get(t) if kv.get(t) is not None else kv.get(f)
            if base_mva is None or level is None:
                raise UnitError(f"{where}: ohmic impedance needs base_mva and base_kv")
            z_base = level**2 / base_mva
            r, x = r_ohm / z_base, x_ohm / z_base
        else:
            raise FeederParseError(f"{where}: no impedance given")
        edges.append((f, t, r, x))

    froms = {e[0] for e in edges}
    tos = [e[1] for e in edges]
    heads = [nid for nid in order if nid in froms and nid not in tos]
    if len(heads) != 1:
        raise TopologyError(
            "cannot identify a unique head node (cycle or disconnected feeder)"
            if not heads
            else f"several candidate head nodes: {heads}"
        )
    head_id = heads[0]

    index = {head_id: 0}
    nodes = []
    for nid in order:
        if nid == head_id:
            continue
        index[nid] = len(nodes) + 1
        nodes.append(NodeRecord(nid, index[nid], roles[nid], kv[nid]))
    branches = tuple(BranchRecord(index[f], index[t], r, x) for f, t, r, x in edges)
    gens = tuple(nd.index for nd in nodes if nd.role == "generator")
    levels = tuple(sorted({v for v in kv.values() if v is not None}))

    net = NetworkModel(
        head=NodeRecord(head_id, 0, roles[head_id], kv[head_id]),
        nodes=tuple(nodes),
        branches=branches,
        head_voltage=head_v,
        base_mva=1.0 if base_mva is None else base_mva,
        base_kv_by_level=levels,
        generator_set=gens,
    )
    report = validate_radial(net)
    topo = ("branch_count", "single_parent", "reachable")
    if not all(report.checks[c] for c in topo):
        raise TopologyError("; ".join(report.messages) or "feeder is not a radial tree")
    if not report.passed:
        bad = [c for c, ok in report.checks.items() if not ok]
        raise FeederParseError(f"feeder violates {bad}")
    return net


def load_feeder(path) -> NetworkModel:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FeederParseError(f"{path}: {exc}") from exc
    return feeder_from_dict(data)


def bundled_path(name: str) -> Path:
    """Path of a data file shipped with the package (e.g. ``"ieee33.json"``)."""
    return Path(str(resources.files("vvcdesign") / "data" / name))


def bundled_feeder(name: str) -> NetworkModel:
    if not name.endswith(".json"):
        name += ".json"
    return load_feeder(bundled_path(name))


BUNDLED_FEEDERS = ("two_bus", "chain5", "ieee33")

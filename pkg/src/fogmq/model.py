"""Domain types shared by the simulator and the broker.

Clouds and clones are addressed by string ids. Demands live on unordered
clone pairs so that d(i, j) == d(j, i) holds by construction.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np


@dataclass(frozen=True)
class CloudNode:
    id: str
    capacity: float
    endpoint: str | None = None
    # traffic at this cloud from clones that are not part of the instance
    # (used by the broker when it evaluates a partial snapshot)
    base_load: float = 0.0

    def __post_init__(self):
        if not (self.capacity > 0 and math.isfinite(self.capacity)):
            raise ValueError(f"cloud {self.id}: capacity must be positive, got {self.capacity}")
        if self.base_load < 0:
            raise ValueError(f"cloud {self.id}: base_load must be >= 0")


@dataclass(frozen=True)
class CloneNode:
    id: str
    device_id: str | None = None


def _pair(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


class DemandGraph:
    """Symmetric traffic demands between clone pairs."""

    def __init__(self, edges: Iterable[tuple[str, str, float]] | Mapping[tuple[str, str], float] = ()):
        if isinstance(edges, Mapping):
            edges = [(a, b, d) for (a, b), d in edges.items()]
        self._d: dict[tuple[str, str], float] = {}
        for a, b, d in edges:
            if a == b:
                raise ValueError(f"self-edge on clone {a}")
            d = float(d)
            if not (d > 0 and math.isfinite(d)):
                raise ValueError(f"demand ({a}, {b}) must be positive, got {d}")
            key = _pair(a, b)
            if key in self._d and self._d[key] != d:
                raise ValueError(f"conflicting demands for pair {key}")
            self._d[key] = d

    def lookup(self, a: str, b: str) -> float:
        return self._d.get(_pair(a, b), 0.0)

    def peers(self, clone: str) -> dict[str, float]:
        out = {}
        for (a, b), d in self._d.items():
            if a == clone:
                out[b] = d
            elif b == clone:
                out[a] = d
        return out

    def clones(self) -> set[str]:
        return {c for pair in self._d for c in pair}

    def __iter__(self) -> Iterator[tuple[str, str, float]]:
        for (a, b), d in sorted(self._d.items()):
            yield a, b, d

    def __len__(self):
        return len(self._d)

    def __eq__(self, other):
        return isinstance(other, DemandGraph) and self._d == other._d

    def __repr__(self):
        return f"DemandGraph({len(self)} edges)"


class LatencyMatrix:
    """Symmetric inter-cloud latency in milliseconds with a zero diagonal."""

    def __init__(self, ids: Iterable[str], values):
        self.ids = tuple(ids)
        arr = np.array(values, dtype=float)
        k = len(self.ids)
        if arr.shape != (k, k):
            raise ValueError(f"tau must be {k}x{k}, got shape {arr.shape}")
        if len(set(self.ids)) != k:
            raise ValueError("duplicate cloud ids in tau")
        if not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise ValueError("tau entries must be finite and >= 0")
        if np.any(np.diag(arr) != 0):
            raise ValueError("tau diagonal must be zero")
        if not np.array_equal(arr, arr.T):
            raise ValueError("tau must be symmetric")
        arr.setflags(write=False)
        self.values = arr
        self._index = {c: i for i, c in enumerate(self.ids)}

    @classmethod
    def from_pairs(cls, ids: Iterable[str], pairs: Iterable[tuple[str, str, float]]) -> "LatencyMatrix":
        """Build from unordered pairs listed once; missing pairs are an error."""
        ids = tuple(ids)
        index = {c: i for i, c in enumerate(ids)}
        arr = np.full((len(ids), len(ids)), np.nan)
        np.fill_diagonal(arr, 0.0)
        for a, b, ms in pairs:
            i, j = index[a], index[b]
            if i == j:
                if ms != 0:
                    raise ValueError(f"tau({a}, {a}) must be zero")
                continue
            for p, q in ((i, j), (j, i)):
                if not np.isnan(arr[p, q]) and arr[p, q] != ms:
                    raise ValueError(f"conflicting tau for ({a}, {b})")
                arr[p, q] = ms
        if np.isnan(arr).any():
            raise ValueError("tau is missing cloud pairs")
        return cls(ids, arr)

    def index(self, cloud: str) -> int:
        return self._index[cloud]

    def __getitem__(self, key: tuple[str, str]) -> float:
        a, b = key
        return float(self.values[self._index[a], self._index[b]])

    def pairs(self) -> Iterator[tuple[str, str, float]]:
        for i, a in enumerate(self.ids):
            for j in range(i + 1, len(self.ids)):
                yield a, self.ids[j], float(self.values[i, j])

    def __eq__(self, other):
        return (isinstance(other, LatencyMatrix) and self.ids == other.ids
                and np.array_equal(self.values, other.values))

    def __repr__(self):
        return f"LatencyMatrix({len(self.ids)} clouds)"


@dataclass(frozen=True, eq=False)
class Instance:
    clouds: tuple[CloudNode, ...]
    tau: LatencyMatrix
    clones: tuple[CloneNode, ...]
    demands: DemandGraph
    delta: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "clouds", tuple(self.clouds))
        object.__setattr__(self, "clones", tuple(self.clones))
        cloud_ids = [c.id for c in self.clouds]
        clone_ids = [c.id for c in self.clones]
        if len(set(cloud_ids)) != len(cloud_ids):
            raise ValueError("duplicate cloud ids")
        if len(set(clone_ids)) != len(clone_ids):
            raise ValueError("duplicate clone ids")
        if len(self.tau.ids) != len(cloud_ids) or set(self.tau.ids) != set(cloud_ids):
            raise ValueError("tau dimension does not match clouds")
        missing = self.demands.clones() - set(clone_ids)
        if missing:
            raise ValueError(f"demand edges reference unknown clones: {sorted(missing)}")
        if not (self.delta > 0 and math.isfinite(self.delta)):
            raise ValueError("delta must be positive")

    @property
    def cloud_ids(self) -> list[str]:
        return [c.id for c in self.clouds]

    @property
    def clone_ids(self) -> list[str]:
        return [c.id for c in self.clones]

    def cloud(self, cloud_id: str) -> CloudNode:
        return self.clouds[self.compiled.cloud_index[cloud_id]]

    @cached_property
    def compiled(self) -> "Compiled":
        return Compiled(self)

    def __eq__(self, other):
        return (isinstance(other, Instance) and self.clouds == other.clouds
                and self.tau == other.tau and self.clones == other.clones
                and self.demands == other.demands and self.delta == other.delta)

    def __hash__(self):
        return id(self)

    # -- file format -----------------------------------------------------

    def to_dict(self) -> dict:
        clouds = []
        for c in self.clouds:
            d = {"id": c.id, "capacity": c.capacity}
            if c.endpoint is not None:
                d["endpoint"] = c.endpoint
            if c.base_load:
                d["base_load"] = c.base_load
            clouds.append(d)
        clones = []
        for c in self.clones:
            d = {"id": c.id}
            if c.device_id is not None:
                d["device_id"] = c.device_id
            clones.append(d)
        return {
            "clouds": clouds,
            "tau": [{"a": a, "b": b, "ms": ms} for a, b, ms in self.tau.pairs()],
            "clones": clones,
            "demands": [{"a": a, "b": b, "d": d} for a, b, d in self.demands],
            "delta": self.delta,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "Instance":
        clouds = [CloudNode(c["id"], float(c["capacity"]), c.get("endpoint"),
                            float(c.get("base_load", 0.0))) for c in doc["clouds"]]
        ids = [c.id for c in clouds]
        tau = LatencyMatrix.from_pairs(ids, [(t["a"], t["b"], float(t["ms"])) for t in doc.get("tau", [])])
        clones = [CloneNode(c["id"], c.get("device_id")) for c in doc.get("clones", [])]
        demands = DemandGraph([(e["a"], e["b"], e["d"]) for e in doc.get("demands", [])])
        return cls(clouds, tau, clones, demands, float(doc.get("delta", 1.0)))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def loads(cls, text: str) -> "Instance":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "Instance":
        return cls.loads(Path(path).read_text())


class Compiled:
    """Index-based view of an Instance for the numeric engines."""

    def __init__(self, inst: Instance):
        self.cloud_ids = inst.cloud_ids
        self.clone_ids = inst.clone_ids
        self.cloud_index = {c: i for i, c in enumerate(self.cloud_ids)}
        self.clone_index = {c: i for i, c in enumerate(self.clone_ids)}
        self.m = len(self.cloud_ids)
        self.n = len(self.clone_ids)
        order = [inst.tau.index(c) for c in self.cloud_ids]
        self.tau_np = inst.tau.values[np.ix_(order, order)]
        self.tau = self.tau_np.tolist()
        self.gamma = [c.capacity for c in inst.clouds]
        self.base = [c.base_load for c in inst.clouds]
        self.delta = inst.delta
        self.adj: list[list[tuple[int, float]]] = [[] for _ in range(self.n)]
        self.edges: list[tuple[int, int, float]] = []
        for a, b, d in inst.demands:
            i, j = self.clone_index[a], self.clone_index[b]
            self.adj[i].append((j, d))
            self.adj[j].append((i, d))
            self.edges.append((i, j, d))
        self.load = [math.fsum(d for _, d in peers) for peers in self.adj]


@dataclass(frozen=True)
class Assignment:
    """Total map clone id -> hosting cloud id."""

    host: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "host", dict(self.host))

    def __getitem__(self, clone: str) -> str:
        return self.host[clone]

    def __hash__(self):
        return hash(tuple(sorted(self.host.items())))

    def clones_at(self, cloud: str) -> list[str]:
        return [c for c, x in self.host.items() if x == cloud]

    def moved(self, clone: str, cloud: str) -> "Assignment":
        host = dict(self.host)
        host[clone] = cloud
        return Assignment(host)

    def to_indices(self, inst: Instance) -> list[int]:
        cc = inst.compiled
        return [cc.cloud_index[self.host[c]] for c in cc.clone_ids]

    @classmethod
    def from_indices(cls, inst: Instance, pos: Iterable[int]) -> "Assignment":
        cc = inst.compiled
        return cls({c: cc.cloud_ids[int(x)] for c, x in zip(cc.clone_ids, pos)})

    def to_dict(self) -> dict[str, str]:
        return dict(sorted(self.host.items()))


def validate(instance: Instance, assignment: Assignment) -> list[str]:
    """Return human-readable invariant violations; empty when consistent."""
    problems = []
    clouds = set(instance.cloud_ids)
    clones = instance.clone_ids
    for c in clones:
        if c not in assignment.host:
            problems.append(f"clone {c} unassigned")
        elif assignment.host[c] not in clouds:
            problems.append(f"clone {c} assigned to unknown cloud {assignment.host[c]}")
    known = set(clones)
    for c in assignment.host:
        if c not in known:
            problems.append(f"clone {c} not in instance")
    return problems

"""Exhaustive ground truth at desk scale.

Costs here are computed by a vectorized batch evaluator that shares no code
with :mod:`fogmq.latency`, so the two act as cross-checks of each other.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .flock import FlockConfig, run_to_equilibrium
from .latency import RegularizationParams, social_cost, total_latency
from .model import Assignment, Instance

DEFAULT_CAP = 10_000_000
CHUNK = 1 << 16


class CapExceeded(RuntimeError):
    pass


def _check_cap(instance: Instance, cap: int) -> int:
    total = len(instance.clouds) ** len(instance.clones)
    if total > cap:
        raise CapExceeded(f"{len(instance.clouds)}^{len(instance.clones)} = {total} exceeds cap {cap}")
    return total


def _positions(start: int, stop: int, n: int, m: int) -> np.ndarray:
    """Mixed-radix digits of assignment indices; clone 0 is the most
    significant digit so index order is lexicographic."""
    idx = np.arange(start, stop, dtype=np.int64)
    out = np.empty((stop - start, n), dtype=np.int64)
    for i in range(n - 1, -1, -1):
        out[:, i] = idx % m
        idx //= m
    return out


def batch_costs(instance: Instance, pos: np.ndarray):
    """Per-clone costs u (B, n) and cloud weights w (B, m) for a batch of
    assignments given as cloud-index rows."""
    cc = instance.compiled
    B, n, m = pos.shape[0], cc.n, cc.m
    gamma = np.asarray(cc.gamma)
    tau = cc.tau_np
    clone_load = np.zeros(n)
    ea = np.array([e[0] for e in cc.edges], dtype=np.int64)
    eb = np.array([e[1] for e in cc.edges], dtype=np.int64)
    ed = np.array([e[2] for e in cc.edges], dtype=float)
    np.add.at(clone_load, ea, ed)
    np.add.at(clone_load, eb, ed)
    rows = np.repeat(np.arange(B), n)
    loads = np.tile(np.asarray(cc.base, dtype=float), (B, 1))
    np.add.at(loads, (rows, pos.ravel()), np.tile(clone_load, B))
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = np.where(loads >= gamma, np.inf, cc.delta * loads / (gamma - loads))
    u = np.zeros((B, n))
    if len(ed):
        pa, pb = pos[:, ea], pos[:, eb]
        r = np.arange(B)[:, None]
        lat = tau[pa, pb] + (rho[r, pa] + rho[r, pb])
        contrib = ed[None, :] * lat
        for k in range(len(ed)):
            u[:, ea[k]] += contrib[:, k]
            u[:, eb[k]] += contrib[:, k]
    w = np.zeros((B, m))
    np.add.at(w, (rows, pos.ravel()), u.ravel())
    return u, w


def _social(w: np.ndarray, a: float) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        terms = np.where(w > 0, w * np.exp(-1.0 / (w + a)), 0.0)
    return terms.sum(axis=1)


def brute_force_optimum(instance: Instance, params: RegularizationParams, cap: int = DEFAULT_CAP,
                        objective: str = "social") -> tuple[Assignment, float]:
    """Minimum social cost (or, with ``objective="latency"``, minimum
    sum of clone costs) over all m^n assignments; first minimum in
    lexicographic order wins ties."""
    total = _check_cap(instance, cap)
    n, m = len(instance.clones), len(instance.clouds)
    best_cost, best_idx = math.inf, 0
    for start in range(0, total, CHUNK):
        stop = min(total, start + CHUNK)
        pos = _positions(start, stop, n, m)
        u, w = batch_costs(instance, pos)
        cost = _social(w, params.a) if objective == "social" else u.sum(axis=1)
        k = int(np.argmin(cost))
        if cost[k] < best_cost:
            best_cost, best_idx = float(cost[k]), start + k
    best = _positions(best_idx, best_idx + 1, n, m)[0]
    return Assignment.from_indices(instance, best), best_cost


def enumerate_equilibria(instance: Instance, params: RegularizationParams, eta: float = 1.0,
                         cap: int = 1_000_000) -> list[Assignment]:
    """Every assignment where no clone has an acceptable unilateral move at
    threshold ``eta`` (``eta=1``: exact equilibria)."""
    total = _check_cap(instance, cap)
    n, m = len(instance.clones), len(instance.clouds)
    pos = _positions(0, total, n, m)
    u, w = batch_costs(instance, pos)
    a = params.a
    f = lambda v: np.exp(-1.0 / (np.maximum(v, 0.0) + a))  # noqa: E731
    stable = np.ones(total, dtype=bool)
    idx = np.arange(total)
    for i in range(n):
        stride = m ** (n - 1 - i)
        x = pos[:, i]
        u_cur = u[:, i]
        w_cur = w[idx, x]
        for y in range(m):
            other = idx + (y - x) * stride
            u_new = u[other, i]
            w_new = w[idx, y]
            with np.errstate(invalid="ignore"):
                lhs = u_new * f(w_new + u_new)
                rhs = u_cur * f(w_cur - u_cur)
            finite_new = np.isfinite(u_new)
            improving = np.where(
                np.isinf(u_cur), finite_new,
                finite_new & (lhs <= eta * rhs) & (lhs < rhs))
            stable &= ~(improving & (x != y))
    return [Assignment.from_indices(instance, p) for p in pos[stable]]


@dataclass
class PoaReport:
    optimal_cost: float
    flock_cost: float
    poa: float
    optimal_assignment: Assignment
    raw_poa: float | None = None
    rounds: int = 0
    converged: bool = True
    final_assignment: Assignment | None = None

    def to_dict(self) -> dict:
        return {"optimal_cost": self.optimal_cost, "flock_cost": self.flock_cost, "poa": self.poa,
                "raw_poa": self.raw_poa, "rounds": self.rounds, "converged": self.converged,
                "optimal_assignment": self.optimal_assignment.to_dict()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def csv_row(self, instance_id, seed, eta, a, n, m) -> str:
        buf = io.StringIO()
        csv.writer(buf).writerow([instance_id, seed, eta, a, n, m, self.optimal_cost,
                                  self.flock_cost, self.poa, self.rounds])
        return buf.getvalue().strip()


CSV_HEADER = "instance_id,seed,eta,a,n,m,opt_cost,flock_cost,poa,rounds"


def _ratio(cost: float, opt: float) -> float:
    if opt == 0:
        return 1.0 if cost == 0 else math.inf
    return cost / opt


def poa_from_runs(instance: Instance, params: RegularizationParams, config: FlockConfig,
                  initials: Sequence[Assignment], opt_assign: Assignment, opt_cost: float,
                  raw_opt: float | None = None) -> PoaReport:
    worst = None
    for k, init in enumerate(initials):
        cfg = config if len(initials) == 1 else replace(config, seed=config.seed + k)
        res = run_to_equilibrium(instance, init, cfg)
        cost = social_cost(instance, res.final_assignment, params)
        poa = _ratio(cost, opt_cost)
        if worst is None or poa > worst.poa:
            raw = None
            if raw_opt is not None:
                raw = _ratio(total_latency(instance, res.final_assignment), raw_opt)
            worst = PoaReport(opt_cost, cost, poa, opt_assign, raw, res.rounds, res.converged,
                              res.final_assignment)
    return worst


def price_of_anarchy(instance: Instance, params: RegularizationParams, flock_config: FlockConfig,
                     trials: int, cap: int = DEFAULT_CAP) -> PoaReport:
    """Worst PoA over ``trials`` Flock runs from seeded random initial
    placements."""
    from .simgen import random_assignment

    opt_assign, opt_cost = brute_force_optimum(instance, params, cap)
    _, raw_opt = brute_force_optimum(instance, params, cap, objective="latency")
    rng = np.random.default_rng([flock_config.seed, 7])
    inits = [random_assignment(instance, rng) for _ in range(trials)]
    return poa_from_runs(instance, params, flock_config, inits, opt_assign, opt_cost, raw_opt)


def all_assignments(instance: Instance):
    """Plain itertools enumeration, used by tests as a second route."""
    ids, clouds = instance.clone_ids, instance.cloud_ids
    for combo in itertools.product(clouds, repeat=len(ids)):
        yield Assignment(dict(zip(ids, combo)))

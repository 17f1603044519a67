"""Cost formulas: processing delay, end-to-end latency, clone cost, cloud
weight, the regularization f(w) = exp(-1/(w + a)) and the social cost.

A saturated cloud (load >= capacity) has infinite processing delay; every
quantity depending on it is ``SATURATED`` (``math.inf``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .model import Assignment, Compiled, Instance

SATURATED = math.inf


@dataclass(frozen=True)
class RegularizationParams:
    a: float = 9.0
    alpha: float | None = None

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError("a must be positive")
        if self.alpha is None:
            object.__setattr__(self, "alpha", math.exp(-1.0 / self.a))
        if not 0 < self.alpha <= math.exp(-1.0 / self.a):
            raise ValueError(f"alpha must lie in (0, exp(-1/a)], got {self.alpha}")


def regularize(params: RegularizationParams, w: float) -> float:
    if w < 0:
        raise ValueError("weight must be non-negative")
    return math.exp(-1.0 / (w + params.a))


def _f(a: float, w: float) -> float:
    # w may carry -1e-13 style rounding from w_x - u_i(x)
    return math.exp(-1.0 / (max(w, 0.0) + a))


def delay(delta: float, load: float, capacity: float) -> float:
    if load >= capacity:
        return SATURATED
    if load <= 0:
        return 0.0
    return delta * load / (capacity - load)


class LoadState:
    """Mutable placement of clones with cached loads, delays and costs.

    ``pos[i]`` is the cloud index hosting clone i. All evaluation helpers are
    pure with respect to the state except :meth:`move`.
    """

    def __init__(self, cc: Compiled, pos: Sequence[int]):
        self.cc = cc
        self.pos = [int(x) for x in pos]
        self.members: list[set[int]] = [set() for _ in range(cc.m)]
        for i, x in enumerate(self.pos):
            self.members[x].add(i)
        self.loads = [0.0] * cc.m
        self.rho = [0.0] * cc.m
        for x in range(cc.m):
            self._refresh_cloud(x)
        self.refresh_costs()

    @classmethod
    def of(cls, instance: Instance, assignment: Assignment) -> "LoadState":
        return cls(instance.compiled, assignment.to_indices(instance))

    def copy(self) -> "LoadState":
        new = object.__new__(LoadState)
        new.cc = self.cc
        new.pos = list(self.pos)
        new.members = [set(s) for s in self.members]
        new.loads = list(self.loads)
        new.rho = list(self.rho)
        new.cost = list(self.cost)
        new.weights = list(self.weights)
        return new

    def _refresh_cloud(self, x: int) -> None:
        cc = self.cc
        # fsum keeps loads independent of membership iteration order
        self.loads[x] = math.fsum([cc.base[x]] + [cc.load[i] for i in self.members[x]])
        self.rho[x] = delay(cc.delta, self.loads[x], cc.gamma[x])

    def refresh_costs(self) -> None:
        cc = self.cc
        self.cost = [self.cost_at(i, self.pos[i]) for i in range(cc.n)]
        w = [[] for _ in range(cc.m)]
        for i, x in enumerate(self.pos):
            w[x].append(self.cost[i])
        self.weights = [math.fsum(v) if v else 0.0 for v in w]

    def move(self, i: int, y: int) -> None:
        x = self.pos[i]
        if x == y:
            return
        self.members[x].discard(i)
        self.members[y].add(i)
        self.pos[i] = y
        self._refresh_cloud(x)
        self._refresh_cloud(y)
        self.refresh_costs()

    def apply(self, moves: Sequence[tuple[int, int]]) -> None:
        touched = set()
        for i, y in moves:
            x = self.pos[i]
            if x == y:
                continue
            self.members[x].discard(i)
            self.members[y].add(i)
            self.pos[i] = y
            touched.update((x, y))
        for x in touched:
            self._refresh_cloud(x)
        self.refresh_costs()

    def cost_at(self, i: int, y: int) -> float:
        """u_i(y): clone i's demand-weighted latency if it were hosted at y.

        The move of i's own load from its current host onto y is applied
        before the delays are evaluated.
        """
        cc = self.cc
        peers = cc.adj[i]
        if not peers:
            return 0.0
        pos, rho, tau_y = self.pos, self.rho, cc.tau[y]
        x = pos[i]
        if y == x:
            ry = rho[x]
            rx_new = ry
        else:
            li = cc.load[i]
            ry = delay(cc.delta, self.loads[y] + li, cc.gamma[y])
            rx_new = delay(cc.delta, max(self.loads[x] - li, 0.0), cc.gamma[x])
        if ry == SATURATED:
            return SATURATED
        total = 0.0
        for j, d in peers:
            xj = pos[j]
            if xj == y:
                rj = ry
            elif xj == x:
                rj = rx_new
            else:
                rj = rho[xj]
            total += d * (tau_y[xj] + (ry + rj))
        return total

    def latency(self, i: int, j: int) -> float:
        xi, xj = self.pos[i], self.pos[j]
        return self.cc.tau[xi][xj] + (self.rho[xi] + self.rho[xj])

    def social_cost(self, params: RegularizationParams) -> float:
        return social_cost_of_weights(self.weights, params)


def social_cost_of_weights(weights: Sequence[float], params: RegularizationParams) -> float:
    total = 0.0
    for w in weights:
        if w == SATURATED:
            return SATURATED
        if w > 0:
            total += w * _f(params.a, w)
    return total


def accept_move(u_cur: float, u_new: float, w_cur: float, w_new: float,
                params: RegularizationParams, eta: float) -> bool:
    """The migration test: u(y) f(w_y + u(y)) <= eta * u(x) f(w_x - u(x)).

    A move must also strictly lower the regularized cost, so zero-cost clones
    and equal-cost alternatives never churn.
    """
    if u_new == SATURATED:
        return False
    if u_cur == SATURATED:
        return True
    lhs = u_new * _f(params.a, w_new + u_new)
    rhs = u_cur * _f(params.a, w_cur - u_cur)
    return lhs <= eta * rhs and lhs < rhs


# -- public per-quantity API -------------------------------------------------

def cloud_load(instance: Instance, assignment: Assignment, cloud: str) -> float:
    st = LoadState.of(instance, assignment)
    return st.loads[instance.compiled.cloud_index[cloud]]


def processing_delay(instance: Instance, assignment: Assignment, cloud: str) -> float:
    st = LoadState.of(instance, assignment)
    return st.rho[instance.compiled.cloud_index[cloud]]


def end_to_end_latency(instance: Instance, assignment: Assignment, clone_i: str, clone_j: str) -> float:
    cc = instance.compiled
    st = LoadState.of(instance, assignment)
    return st.latency(cc.clone_index[clone_i], cc.clone_index[clone_j])


def clone_cost(instance: Instance, assignment: Assignment, clone: str, candidate: str) -> float:
    cc = instance.compiled
    st = LoadState.of(instance, assignment)
    return st.cost_at(cc.clone_index[clone], cc.cloud_index[candidate])


def cloud_weight(instance: Instance, assignment: Assignment, cloud: str) -> float:
    st = LoadState.of(instance, assignment)
    return st.weights[instance.compiled.cloud_index[cloud]]


def cloud_weights(instance: Instance, assignment: Assignment) -> dict[str, float]:
    st = LoadState.of(instance, assignment)
    return dict(zip(instance.cloud_ids, st.weights))


def social_cost(instance: Instance, assignment: Assignment, params: RegularizationParams) -> float:
    return LoadState.of(instance, assignment).social_cost(params)


def total_latency(instance: Instance, assignment: Assignment) -> float:
    """Unregularized objective sum_i u_i(x_i)."""
    st = LoadState.of(instance, assignment)
    return math.fsum(st.cost)


# -- smoothness (PoA bound) ----------------------------------------------------

@dataclass
class SmoothnessResult:
    passed: bool
    lam: float
    eps: float
    bound: float
    worst: tuple[float, float]
    worst_margin: float


def _smoothness_terms(params: RegularizationParams, grid_w: np.ndarray, grid_ws: np.ndarray):
    w = grid_w[:, None]
    ws = grid_ws[None, :]
    f = lambda v: np.exp(-1.0 / (v + params.a))  # noqa: E731
    lhs = ws * f(w + ws)
    opt = ws * f(ws)
    own = w * f(w)
    return lhs, opt, np.broadcast_to(own, lhs.shape)


def check_smoothness(params: RegularizationParams, lam: float, eps: float,
                     grid_w, grid_ws=None) -> SmoothnessResult:
    """Check w* f(w + w*) <= lam w* f(w*) + eps w f(w) on a grid of (w, w*).

    ``grid_ws`` defaults to ``grid_w``; w* values must be positive. Reports the
    implied PoA bound lam / (1 - eps) and the pair with the smallest slack.
    """
    if not eps < 1:
        raise ValueError("eps must be < 1")
    if lam < 1 - eps:
        raise ValueError("lambda must be at least 1 - eps")
    grid_w = np.asarray(grid_w, dtype=float)
    grid_ws = grid_w if grid_ws is None else np.asarray(grid_ws, dtype=float)
    if grid_w.size == 0 or grid_ws.size == 0:
        raise ValueError("empty grid")
    if np.any(grid_w < 0) or np.any(grid_ws <= 0):
        raise ValueError("grid needs w >= 0 and w* > 0")
    lhs, opt, own = _smoothness_terms(params, grid_w, grid_ws)
    margin = lam * opt + eps * own - lhs
    k = np.unravel_index(np.argmin(margin), margin.shape)
    worst_margin = float(margin[k])
    return SmoothnessResult(
        passed=worst_margin >= 0,
        lam=lam, eps=eps, bound=lam / (1 - eps),
        worst=(float(grid_w[k[0]]), float(grid_ws[k[1]])),
        worst_margin=worst_margin,
    )


def find_smoothness_pair(params: RegularizationParams, grid_w, grid_ws=None,
                         eps_values=None) -> SmoothnessResult:
    """Search eps, taking the smallest feasible lambda for each, to minimize
    lam / (1 - eps) over the grid."""
    grid_w = np.asarray(grid_w, dtype=float)
    grid_ws = grid_w if grid_ws is None else np.asarray(grid_ws, dtype=float)
    if eps_values is None:
        eps_values = np.linspace(0.0, 0.5, 51)
    lhs, opt, own = _smoothness_terms(params, grid_w, grid_ws)
    # lam >= (lhs - eps * own) / opt; opt > 0 since w* > 0
    base = lhs / opt
    ratio = own / opt
    best = None
    for eps in eps_values:
        lam = float(np.max(base - eps * ratio))
        lam = max(lam, (1 - eps) * (1 + 1e-12))
        # nudge up so the rounding in the re-check cannot flip the sign
        lam = math.nextafter(lam, math.inf) * (1 + 1e-12)
        bound = lam / (1 - eps)
        if best is None or bound < best[0]:
            best = (bound, lam, float(eps))
    return check_smoothness(params, best[1], best[2], grid_w, grid_ws)


def weights_map(instance: Instance, weights: Mapping[str, float] | None, st: LoadState) -> list[float]:
    if weights is None:
        return st.weights
    cc = instance.compiled
    out = list(st.weights)
    for cid, w in weights.items():
        if cid in cc.cloud_index:
            out[cc.cloud_index[cid]] = float(w)
    return out

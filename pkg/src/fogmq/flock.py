"""Flock: each clone samples one target cloud per round and migrates when
its regularized cost there beats eta times its regularized current cost.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .latency import LoadState, RegularizationParams, accept_move, weights_map
from .model import Assignment, Instance, validate


class Mode(str, enum.Enum):
    SEQUENTIAL = "sequential"
    PARALLEL = "parallel"


class StrategyProvider(str, enum.Enum):
    FULL = "full"
    GOSSIP = "gossip"


@dataclass(frozen=True)
class FlockConfig:
    params: RegularizationParams = field(default_factory=RegularizationParams)
    eta: float = 0.9
    mode: Mode = Mode.SEQUENTIAL
    max_rounds: int = 10_000
    seed: int = 0
    strategy_provider: StrategyProvider = StrategyProvider.FULL
    # cloud id -> clouds that cloud knows about; only used with GOSSIP
    views: Mapping[str, frozenset] | None = None

    def __post_init__(self):
        if not 0 < self.eta <= 1:
            raise ValueError("eta must lie in (0, 1]")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be positive")
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "strategy_provider", StrategyProvider(self.strategy_provider))
        if self.strategy_provider is StrategyProvider.GOSSIP and self.views is None:
            raise ValueError("GOSSIP strategy provider needs per-cloud views")


@dataclass
class RoundLog:
    round: int
    migrations: list[tuple[str, str, str]]
    social_cost_after: float

    def to_dict(self) -> dict:
        return {"round": self.round, "migrations": [list(m) for m in self.migrations],
                "social_cost_after": _json_float(self.social_cost_after)}


@dataclass
class FlockResult:
    final_assignment: Assignment
    rounds: int
    converged: bool
    log: list[RoundLog]

    def to_dict(self) -> dict:
        return {"converged": self.converged, "rounds": self.rounds,
                "final": self.final_assignment.to_dict(),
                "log": [r.to_dict() for r in self.log]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _json_float(v: float):
    return v if math.isfinite(v) else "inf"


def strategy_set(instance: Instance, host: str, provider=StrategyProvider.FULL,
                 view: frozenset | None = None) -> list[str]:
    """Clouds a clone hosted at ``host`` may consider, in instance order.

    FULL offers every cloud; GOSSIP offers the host's current view. The host
    itself is always included.
    """
    provider = StrategyProvider(provider)
    if provider is StrategyProvider.FULL:
        return instance.cloud_ids
    known = set(view or ()) | {host}
    return [c for c in instance.cloud_ids if c in known]


def migration_accepted(instance: Instance, assignment: Assignment, params: RegularizationParams,
                       eta: float, clone: str, target: str,
                       weights: Mapping[str, float] | None = None) -> bool:
    """Evaluate the migration condition for moving ``clone`` to ``target``.

    ``weights`` optionally overrides cloud weights with externally reported
    (broadcast) values; by default they are computed from the assignment.
    """
    cc = instance.compiled
    st = LoadState.of(instance, assignment)
    i, y = cc.clone_index[clone], cc.cloud_index[target]
    return _accepted(st, i, y, params, eta, weights_map(instance, weights, st))


def _accepted(st: LoadState, i: int, y: int, params, eta, weights) -> bool:
    x = st.pos[i]
    if x == y:
        return False
    return accept_move(st.cost[i], st.cost_at(i, y), weights[x], weights[y], params, eta)


def _find_deviation(st: LoadState, params, eta, targets) -> tuple[int, int] | None:
    for i in range(st.cc.n):
        x = st.pos[i]
        for y in targets(x):
            if y != x and _accepted(st, i, y, params, eta, st.weights):
                return i, y
    return None


def is_nash_equilibrium(instance: Instance, assignment: Assignment, params: RegularizationParams,
                        eta: float = 1.0) -> tuple[bool, tuple[str, str] | None]:
    """True when no clone has an improving unilateral move.

    With ``eta=1`` this is the exact equilibrium of the regularized game; a
    smaller ``eta`` checks the eta-approximate equilibrium that Flock with the
    same threshold settles in. On failure returns an improving (clone, cloud).
    """
    cc = instance.compiled
    st = LoadState.of(instance, assignment)
    everything = range(cc.m)
    dev = _find_deviation(st, params, eta, lambda x: everything)
    if dev is None:
        return True, None
    return False, (cc.clone_ids[dev[0]], cc.cloud_ids[dev[1]])


class _Engine:
    def __init__(self, instance: Instance, assignment: Assignment, config: FlockConfig):
        problems = validate(instance, assignment)
        if problems:
            raise ValueError("; ".join(problems))
        self.instance = instance
        self.cc = instance.compiled
        self.config = config
        self.st = LoadState.of(instance, assignment)
        cc = self.cc
        if config.strategy_provider is StrategyProvider.FULL:
            everything = list(range(cc.m))
            self._targets = [everything] * cc.m
        else:
            self._targets = [
                [cc.cloud_index[c] for c in strategy_set(instance, host, config.strategy_provider,
                                                         config.views.get(host))]
                for host in cc.cloud_ids
            ]

    def targets(self, x: int) -> list[int]:
        return self._targets[x]

    def round(self, t: int, rng: np.random.Generator) -> RoundLog:
        cc, st, cfg = self.cc, self.st, self.config
        params, eta = cfg.params, cfg.eta
        moves: list[tuple[int, int, int]] = []
        if cc.n:
            draws = rng.random(cc.n)
            if cfg.mode is Mode.SEQUENTIAL:
                for i in rng.permutation(cc.n).tolist():
                    x = st.pos[i]
                    options = self._targets[x]
                    y = options[int(draws[i] * len(options))]
                    if _accepted(st, i, y, params, eta, st.weights):
                        st.move(i, y)
                        moves.append((i, x, y))
            else:
                for i in range(cc.n):
                    x = st.pos[i]
                    options = self._targets[x]
                    y = options[int(draws[i] * len(options))]
                    if _accepted(st, i, y, params, eta, st.weights):
                        moves.append((i, x, y))
                st.apply([(i, y) for i, _, y in moves])
        migrations = [(cc.clone_ids[i], cc.cloud_ids[x], cc.cloud_ids[y]) for i, x, y in moves]
        return RoundLog(t, migrations, st.social_cost(params))

    def at_equilibrium(self) -> bool:
        return _find_deviation(self.st, self.config.params, self.config.eta, self.targets) is None

    def assignment(self) -> Assignment:
        return Assignment.from_indices(self.instance, self.st.pos)


def run_round(instance: Instance, assignment: Assignment, config: FlockConfig,
              rng: np.random.Generator, round_index: int = 1) -> tuple[Assignment, RoundLog]:
    eng = _Engine(instance, assignment, config)
    log = eng.round(round_index, rng)
    return eng.assignment(), log


def run_to_equilibrium(instance: Instance, initial: Assignment, config: FlockConfig) -> FlockResult:
    """Run rounds until no clone has an acceptable move or max_rounds is hit.

    The stopping check uses the configured eta, so the endpoint is the
    eta-approximate equilibrium the protocol can actually reach.
    """
    eng = _Engine(instance, initial, config)
    rng = np.random.default_rng(config.seed)
    log: list[RoundLog] = []
    converged = eng.at_equilibrium()
    t = 0
    while not converged and t < config.max_rounds:
        t += 1
        entry = eng.round(t, rng)
        log.append(entry)
        # an unchanged state cannot have become an equilibrium
        if entry.migrations:
            converged = eng.at_equilibrium()
    return FlockResult(eng.assignment(), t, converged, log)


def replay_acceptance(instance: Instance, initial: Assignment, log: Sequence[RoundLog],
                      params: RegularizationParams, eta: float) -> bool:
    """Re-check every logged SEQUENTIAL migration against the rule in order."""
    current = initial
    for entry in log:
        for clone, src, dst in entry.migrations:
            if current[clone] != src or src == dst:
                return False
            if not migration_accepted(instance, current, params, eta, clone, dst):
                return False
            current = current.moved(clone, dst)
    return True

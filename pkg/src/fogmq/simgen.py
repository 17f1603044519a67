"""Random instances drawn from the experiment distributions, plus the
convergence and PoA campaigns built on them."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .flock import FlockConfig, run_to_equilibrium
from .latency import LoadState
from .model import Assignment, CloneNode, CloudNode, DemandGraph, Instance, LatencyMatrix


class InfeasibleSpec(RuntimeError):
    pass


@dataclass(frozen=True)
class GenSpec:
    n_clones: int
    m_clouds: int
    tau_range: tuple[float, float] = (10.0, 100.0)
    gamma_range: tuple[float, float] = (50.0, 100.0)
    demand_range: tuple[float, float] = (1.0, 10.0)
    p: float | None = None  # binomial edge probability; None -> min(1, 4/n)
    seed: int = 0
    delta: float = 1.0
    max_retries: int = 100

    def __post_init__(self):
        if self.n_clones < 0 or self.m_clouds < 1:
            raise ValueError("need n >= 0 clones and m >= 1 clouds")
        for lo, hi in (self.tau_range, self.gamma_range, self.demand_range):
            if not 0 < lo <= hi:
                raise ValueError("ranges must be positive")
        if self.p is not None and not 0 < self.p <= 1:
            raise ValueError("p must lie in (0, 1]")

    @property
    def edge_probability(self) -> float:
        if self.p is not None:
            return self.p
        return min(1.0, 4.0 / self.n_clones) if self.n_clones else 1.0


def _draw(spec: GenSpec, rng: np.random.Generator) -> Instance:
    m, n = spec.m_clouds, spec.n_clones
    cloud_ids = [f"x{k}" for k in range(m)]
    clone_ids = [f"c{k}" for k in range(n)]
    tau = np.zeros((m, m))
    iu = np.triu_indices(m, 1)
    tau[iu] = rng.uniform(*spec.tau_range, size=len(iu[0]))
    tau = tau + tau.T
    gamma = rng.uniform(*spec.gamma_range, size=m)
    p = spec.edge_probability
    edges = []
    if n > 1:
        ia, ib = np.triu_indices(n, 1)
        keep = rng.random(len(ia)) < p
        d = rng.uniform(*spec.demand_range, size=int(keep.sum()))
        edges = [(clone_ids[a], clone_ids[b], float(v)) for a, b, v in zip(ia[keep], ib[keep], d)]
    clouds = [CloudNode(c, float(g)) for c, g in zip(cloud_ids, gamma)]
    return Instance(clouds, LatencyMatrix(cloud_ids, tau), [CloneNode(c) for c in clone_ids],
                    DemandGraph(edges), spec.delta)


def total_demand(instance: Instance) -> float:
    return 2.0 * math.fsum(d for _, _, d in instance.demands)


def generate(spec: GenSpec) -> Instance:
    """Draw an instance; redraw with a fresh sub-seed while total demand
    exceeds total capacity."""
    for attempt in range(spec.max_retries + 1):
        rng = np.random.default_rng([spec.seed, attempt])
        inst = _draw(spec, rng)
        if total_demand(inst) <= math.fsum(c.capacity for c in inst.clouds):
            return inst
    raise InfeasibleSpec(f"no feasible instance for n={spec.n_clones}, m={spec.m_clouds} "
                         f"after {spec.max_retries} retries")


def random_assignment(instance: Instance, rng: np.random.Generator, retries: int = 1000) -> Assignment:
    """Uniform random placement, redrawn until no cloud is saturated (the
    last draw is returned if every attempt saturates)."""
    cc = instance.compiled
    pos = None
    for _ in range(max(retries, 1)):
        pos = rng.integers(0, cc.m, size=cc.n).tolist()
        st = LoadState(cc, pos)
        if all(L < g for L, g in zip(st.loads, cc.gamma)):
            break
    return Assignment.from_indices(instance, pos)


def half_width(values: Sequence[float], confidence: float = 0.95) -> float:
    """Student-t confidence half-width of the mean."""
    k = len(values)
    if k < 2:
        return math.inf
    sd = float(np.std(values, ddof=1))
    return float(stats.t.ppf(0.5 + confidence / 2, k - 1)) * sd / math.sqrt(k)


@dataclass
class RunRecord:
    n: int
    m: int
    seed: int
    rounds: int
    converged: bool
    poa: float | None = None


@dataclass
class CampaignResult:
    records: list[RunRecord] = field(default_factory=list)
    # n -> (trials, mean rounds, CI half-width)
    summary: dict[int, tuple[int, float, float]] = field(default_factory=dict)

    def rows(self) -> list[dict]:
        return [{"n": n, "trials": t, "mean_k": mk, "ci_halfwidth": hw}
                for n, (t, mk, hw) in sorted(self.summary.items())]


def trial_seed(master: int, *keys: int) -> int:
    return int(np.random.SeedSequence([master, *keys]).generate_state(1, np.uint64)[0])


def convergence_trial(n: int, m: int, config: FlockConfig, seed: int, spec_kwargs=None):
    spec = GenSpec(n, m, seed=seed, **(spec_kwargs or {}))
    inst = generate(spec)
    rng = np.random.default_rng([seed, 1])
    init = random_assignment(inst, rng)
    res = run_to_equilibrium(inst, init, replace(config, seed=trial_seed(seed, 2)))
    return inst, init, res


def convergence_campaign(n_values: Iterable[int], m: int, config: FlockConfig,
                         target_rel_error: float = 0.1, confidence: float = 0.95,
                         master_seed: int = 0, min_trials: int = 10, max_trials: int = 1000,
                         spec_kwargs=None) -> CampaignResult:
    """Mean rounds to convergence per n, sampling trials until the CI
    half-width drops to ``target_rel_error`` of the mean."""
    out = CampaignResult()
    for n in n_values:
        ks: list[float] = []
        t = 0
        while t < max_trials:
            seed = trial_seed(master_seed, n, m, t)
            _, _, res = convergence_trial(n, m, config, seed, spec_kwargs)
            out.records.append(RunRecord(n, m, seed, res.rounds, res.converged))
            ks.append(res.rounds)
            t += 1
            if t >= max(min_trials, 2):
                mean = float(np.mean(ks))
                if half_width(ks, confidence) <= target_rel_error * mean or mean == 0:
                    break
        mean = float(np.mean(ks))
        hw = half_width(ks, confidence) if len(ks) > 1 else 0.0
        if mean == 0:
            hw = 0.0
        out.summary[n] = (len(ks), mean, hw)
    return out


@dataclass
class PoaRow:
    eta: float
    trials: int
    max_poa: float
    mean_poa: float
    min_poa: float
    converged: int


def poa_campaign(eta_values: Iterable[float], trials_per_eta: int, n: int = 8, m: int = 5,
                 a: float = 9.0, master_seed: int = 0, initials_per_instance: int = 1,
                 max_rounds: int = 10_000, records: list | None = None) -> list[PoaRow]:
    """Worst observed PoA per eta over seeded (instance, initial) pairs.

    ``trials_per_eta`` counts instances; each contributes
    ``initials_per_instance`` Flock runs from independent initial placements.
    Instances and optima are shared across eta values.
    """
    from .latency import RegularizationParams
    from .oracle import brute_force_optimum, poa_from_runs

    params = RegularizationParams(a)
    eta_values = list(eta_values)
    per_eta: dict[float, list] = {eta: [] for eta in eta_values}
    conv: dict[float, int] = {eta: 0 for eta in eta_values}
    for t in range(trials_per_eta):
        seed = trial_seed(master_seed, n, m, t)
        inst = generate(GenSpec(n, m, seed=seed))
        opt_assign, opt_cost = brute_force_optimum(inst, params)
        rng = np.random.default_rng([seed, 1])
        inits = [random_assignment(inst, rng) for _ in range(initials_per_instance)]
        for eta in eta_values:
            cfg = FlockConfig(params=params, eta=eta, max_rounds=max_rounds)
            for k, init in enumerate(inits):
                rep = poa_from_runs(inst, params, replace(cfg, seed=trial_seed(seed, 3, k)),
                                    [init], opt_assign, opt_cost)
                per_eta[eta].append(rep.poa)
                conv[eta] += int(rep.converged)
                if records is not None:
                    records.append({"instance_id": t, "seed": seed, "eta": eta, "a": a, "n": n, "m": m,
                                    "opt_cost": rep.optimal_cost, "flock_cost": rep.flock_cost,
                                    "poa": rep.poa, "rounds": rep.rounds})
    return [PoaRow(eta, len(v), max(v), float(np.mean(v)), min(v), conv[eta])
            for eta, v in per_eta.items()]


def write_convergence_csv(result: CampaignResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "trials", "mean_k", "ci_halfwidth"])
        for row in result.rows():
            w.writerow([row["n"], row["trials"], f"{row['mean_k']:.6f}", f"{row['ci_halfwidth']:.6f}"])


def write_poa_csv(rows: Sequence[PoaRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["eta", "trials", "max_poa", "mean_poa"])
        for r in rows:
            w.writerow([f"{r.eta:g}", r.trials, f"{r.max_poa:.6f}", f"{r.mean_poa:.6f}"])


def ensure_parent(path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p

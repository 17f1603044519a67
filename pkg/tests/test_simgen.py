import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fogmq.flock import FlockConfig
from fogmq.latency import LoadState, RegularizationParams, social_cost
from fogmq.model import Assignment
from fogmq.simgen import (GenSpec, InfeasibleSpec, convergence_campaign, generate, half_width,
                          poa_campaign, random_assignment, total_demand, write_convergence_csv,
                          write_poa_csv)


def test_empty_instance():
    inst = generate(GenSpec(0, 3, seed=1))
    assert inst.clones == () and len(inst.demands) == 0
    assert social_cost(inst, Assignment({}), RegularizationParams()) == 0


def test_same_seed_same_instance():
    assert generate(GenSpec(10, 4, seed=5)) == generate(GenSpec(10, 4, seed=5))
    assert generate(GenSpec(10, 4, seed=5)) != generate(GenSpec(10, 4, seed=6))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 16), st.integers(1, 8))
def test_ranges_and_symmetry(seed, n, m):
    try:
        inst = generate(GenSpec(n, m, seed=seed))
    except InfeasibleSpec:
        return
    tau = inst.tau.values
    assert np.array_equal(tau, tau.T) and np.all(np.diag(tau) == 0)
    off = tau[~np.eye(m, dtype=bool)]
    assert np.all((off >= 10) & (off <= 100))
    assert all(50 <= c.capacity <= 100 for c in inst.clouds)
    assert all(1 <= d <= 10 for _, _, d in inst.demands)
    assert total_demand(inst) <= sum(c.capacity for c in inst.clouds)


def test_paper_setup_ranges():
    inst = generate(GenSpec(8, 5, seed=123))
    assert len(inst.clones) == 8 and len(inst.clouds) == 5


def test_default_edge_probability():
    assert GenSpec(8, 5).edge_probability == 0.5
    assert GenSpec(2, 5).edge_probability == 1.0
    assert GenSpec(40, 5, p=0.1).edge_probability == 0.1


def test_infeasible_spec_raises():
    with pytest.raises(InfeasibleSpec):
        generate(GenSpec(40, 1, seed=0, p=1.0, max_retries=3))


def test_uniform_sampler_sanity():
    # mean of 10^4 Uniform(1, 10) demand draws within 3 standard errors
    inst = generate(GenSpec(400, 200, seed=17, p=0.125, gamma_range=(1000, 1000)))
    d = np.array([v for _, _, v in inst.demands])
    assert len(d) >= 9000
    se = (9 / np.sqrt(12)) / np.sqrt(len(d))
    assert abs(d.mean() - 5.5) < 3 * se


def test_random_assignment_avoids_saturation():
    inst = generate(GenSpec(8, 5, seed=3))
    a = random_assignment(inst, np.random.default_rng(0))
    st_ = LoadState.of(inst, a)
    assert all(L < g for L, g in zip(st_.loads, inst.compiled.gamma))


def test_half_width_student_t():
    # t_{0.975, 3} = 3.182446
    vals = [1.0, 2.0, 3.0, 4.0]
    assert half_width(vals) == pytest.approx(3.182446 * np.std(vals, ddof=1) / 2, rel=1e-5)


def test_convergence_campaign_single_clone():
    res = convergence_campaign([1], 3, FlockConfig(), master_seed=1)
    trials, mean_k, hw = res.summary[1]
    assert mean_k == 0 and hw == 0


def test_convergence_campaign_deterministic(tmp_path):
    a = convergence_campaign([4, 6], 3, FlockConfig(), master_seed=7, max_trials=30)
    b = convergence_campaign([4, 6], 3, FlockConfig(), master_seed=7, max_trials=30)
    assert a == b
    write_convergence_csv(a, tmp_path / "a.csv")
    write_convergence_csv(b, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "n,trials,mean_k,ci_halfwidth"


def test_convergence_campaign_meets_precision():
    res = convergence_campaign([6], 4, FlockConfig(), master_seed=2)
    trials, mean_k, hw = res.summary[6]
    assert trials == 1000 or hw <= 0.1 * mean_k
    assert all(r.converged for r in res.records)


def test_poa_campaign_rows(tmp_path):
    rows = poa_campaign([0.5, 0.99], 3, n=5, m=3, master_seed=4)
    assert [r.eta for r in rows] == [0.5, 0.99]
    for r in rows:
        assert r.trials == 3 and r.min_poa >= 1 - 1e-9 and r.converged == 3
    write_poa_csv(rows, tmp_path / "poa.csv")
    assert (tmp_path / "poa.csv").read_text().splitlines()[0] == "eta,trials,max_poa,mean_poa"

import asyncio

import hypothesis.strategies as st
import pytest

from fogmq.model import Assignment, CloneNode, CloudNode, DemandGraph, Instance, LatencyMatrix
from fogmq.simgen import GenSpec, InfeasibleSpec, generate


def make_instance(capacities, tau_pairs, demands, clones=None, delta=1.0):
    """Small hand-built instance; capacities is {cloud: gamma}."""
    ids = list(capacities)
    if clones is None:
        clones = sorted({c for a, b, _ in demands for c in (a, b)})
    return Instance(
        [CloudNode(c, g) for c, g in capacities.items()],
        LatencyMatrix.from_pairs(ids, tau_pairs),
        [CloneNode(c) for c in clones],
        DemandGraph(demands),
        delta,
    )


@pytest.fixture
def two_cloud():
    # x and y 10 ms apart; clones a, b at x talk to c at y
    inst = make_instance({"x": 60.0, "y": 50.0}, [("x", "y", 10.0)],
                         [("a", "b", 3.0), ("a", "c", 2.0)])
    return inst, Assignment({"a": "x", "b": "x", "c": "y"})


@st.composite
def small_instances(draw, max_n=6, max_m=4):
    n = draw(st.integers(0, max_n))
    m = draw(st.integers(1, max_m))
    seed = draw(st.integers(0, 2**32 - 1))
    try:
        inst = generate(GenSpec(n, m, seed=seed, max_retries=5))
    except InfeasibleSpec:
        inst = generate(GenSpec(0, m, seed=seed))
    hosts = draw(st.lists(st.integers(0, m - 1), min_size=len(inst.clones), max_size=len(inst.clones)))
    return inst, Assignment.from_indices(inst, hosts)


def arun(coro, timeout=60.0):
    """Run a coroutine to completion with a hard timeout."""
    return asyncio.run(asyncio.wait_for(coro, timeout))


async def wait_until(pred, timeout=5.0, step=0.01):
    loop = asyncio.get_running_loop()
    end = loop.time() + timeout
    while not pred():
        if loop.time() > end:
            raise AssertionError("condition not reached in time")
        await asyncio.sleep(step)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

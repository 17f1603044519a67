import math

import pytest

from fogmq.broker.gossip import GossipView, ViewEntry
from fogmq.broker.server import FogMQServer, ServerConfig

from conftest import arun


class Clock:
    def __init__(self, t=100.0):
        self.t = t

    def __call__(self):
        return self.t


def test_self_always_present_with_zero_tau():
    v = GossipView(ViewEntry("a", "h:1"))
    assert v.ids() == ["a"] and v.tau("a", "a") == 0.0
    v.merge([ViewEntry("a", "h:2", last_seen=1e12)])
    assert v.me.endpoint == "h:1"
    v.mark_unreachable("a")
    assert "a" not in v.unreachable


def test_merge_keeps_freshest_copy_and_reports_new_ids():
    clk = Clock()
    v = GossipView(ViewEntry("a", "h:1"), clock=clk)
    assert v.merge([ViewEntry("b", "h:2", weight=1.0, last_seen=99.0)]) == ["b"]
    assert v.merge([ViewEntry("b", "h:2", weight=5.0, last_seen=98.0).to_dict()]) == []
    assert v.get("b").weight == 1.0
    v.merge([ViewEntry("b", "h:2", weight=7.0, last_seen=99.5)])
    assert v.get("b").weight == 7.0


def test_silent_servers_expire():
    clk = Clock()
    v = GossipView(ViewEntry("a", "h:1"), expiry=60.0, clock=clk)
    v.merge([ViewEntry("b", "h:2", last_seen=clk.t)])
    clk.t += 60.0
    assert v.evict() == [] and "b" in v
    clk.t += 0.5
    assert v.evict() == ["b"] and v.ids() == ["a"]


def test_tau_is_average_of_both_sides():
    v = GossipView(ViewEntry("a", "h:1"))
    assert v.tau("a", "b") is None
    v.record_tau("b", 10.0)
    assert v.tau("a", "b") == v.tau("b", "a") == 10.0
    v.merge([ViewEntry("b", "h:2", tau={"a": 14.0}, last_seen=v.clock())])
    assert v.tau("a", "b") == v.tau("b", "a") == 12.0


def test_tau_ewma_and_unreachable():
    v = GossipView(ViewEntry("a", "h:1"), ewma=0.5)
    v.merge([ViewEntry("b", "h:2", last_seen=v.clock())])
    v.record_tau("b", 10.0)
    assert v.record_tau("b", 20.0) == 15.0
    v.mark_unreachable("b")
    assert v.others() == [] and v.others(reachable_only=False) == ["b"]
    assert v.tau("a", "b") is None


def test_wire_roundtrip_with_infinite_capacity():
    e = ViewEntry("a", "h:1", tau={"b": 3.0}, last_seen=5.0)
    assert e.capacity == math.inf
    assert ViewEntry.from_dict(e.to_dict()) == e


def servers(n, **kw):
    return [ServerConfig(f"s{i}", gossip_period_s=60, probe_period_s=60, flock_enabled=False, seed=i, **kw)
            for i in range(n)]


def test_three_servers_one_bootstrap_converge_within_ten_rounds():
    async def go():
        cfgs = servers(3)
        srv = [await FogMQServer(c).start() for c in cfgs]
        for s in srv[1:]:
            s.config.bootstrap = [srv[0].endpoint]
        rounds = 0
        while any(len(s.view) < 3 for s in srv) and rounds < 10:
            rounds += 1
            for s in srv:
                await s.gossip_round()
        sizes = [len(s.view) for s in srv]
        for s in srv:
            await s.stop()
        return rounds, sizes

    rounds, sizes = arun(go())
    assert sizes == [3, 3, 3] and rounds <= 10


def test_standalone_view_is_self_only():
    async def go():
        s = await FogMQServer(servers(1)[0]).start()
        v = await s.gossip_round()
        ids = v.ids()
        await s.stop()
        return ids

    assert arun(go()) == ["s0"]


def test_loopback_tau_agrees_after_twenty_probes_and_dead_server_leaves_strategy_set():
    async def go():
        a, b = [await FogMQServer(c).start() for c in servers(2)]
        b.config.bootstrap = [a.endpoint]
        await b.gossip_round()
        await a.gossip_round()
        for _ in range(20):
            await a.measure_tau("s1")
            await b.measure_tau("s0")
        await a.gossip_round()
        ab, ba = a.view.tau("s0", "s1"), b.view.tau("s1", "s0")
        assert a.candidates() == ["s1"]
        await b.stop()
        assert await a.measure_tau("s1") is None
        cands = a.candidates()
        await a.stop()
        return ab, ba, cands

    ab, ba, cands = arun(go())
    assert ab > 0 and abs(ab - ba) / max(ab, ba) < 0.10
    assert cands == []

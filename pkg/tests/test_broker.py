import asyncio
import contextlib
import json

import pytest

from fogmq.broker import (CloneRuntime, CloneState, CloneStatus, DeviceEmulator, FogMQServer, MemoryRegistry,
                          ServerConfig, SubStatus, UniquenessAudit, audit_delivery, cutover_windows)
from fogmq.broker.clone import SeqWindow
from fogmq.broker.device import RegistrationFailed
from fogmq.broker.server import STATE_TRANSFER_FAILED, TARGET_REJECTED, Decision, DeviceRecord

from conftest import arun, wait_until


@contextlib.asynccontextmanager
async def cluster(n=2, **kw):
    reg = MemoryRegistry()
    opts = dict(gossip_period_s=0.05, probe_period_s=0.05, flock_enabled=False, capacity_gamma=1000.0)
    opts.update(kw)
    srv = [await FogMQServer(ServerConfig(f"s{i}", seed=i, **opts), registry=reg).start() for i in range(n)]
    for s in srv[1:]:
        s.config.bootstrap = [srv[0].endpoint]
    devices = []
    try:
        await wait_until(lambda: all(len(s.view) == n for s in srv))
        yield reg, srv, devices
    finally:
        for d in devices:
            await d.stop()
        for s in srv:
            await s.stop()


async def device(devices, name, peers=(), rate=1.0, seed=0):
    d = await DeviceEmulator(name, peers, rate=rate, seed=seed).start()
    devices.append(d)
    return d


def subs_up(servers):
    return all(w.status == SubStatus.ACTIVE for s in servers for c in s.clones.values() for w in c.workers.values())


def test_seq_window_bounded():
    w = SeqWindow(3)
    assert w.add(1) and not w.add(1)
    for s in (2, 3, 4):
        w.add(s)
    assert 1 not in w and w.to_list() == [2, 3, 4]


def test_fresh_device_without_peers_publishes_and_relays_nothing():
    async def go():
        async with cluster(1) as (reg, (s,), devs):
            d = await device(devs, "solo")
            cid = await d.register(s.endpoint)
            clone = s.clones[cid]
            assert clone.status == CloneStatus.ACTIVE and clone.subscription_status() == {}
            for _ in range(7):
                d.publish_one()
            await wait_until(lambda: clone.received == 7)
            await asyncio.sleep(0.05)
            return clone.relayed

    assert arun(go()) == 0


def test_duplicate_and_unreachable_registration():
    async def go():
        async with cluster(1) as (reg, (s,), devs):
            d = await device(devs, "d")
            await d.register(s.endpoint)
            with pytest.raises(RegistrationFailed) as dup:
                await d.register(s.endpoint)
            ghost = DeviceRecord("ghost", "127.0.0.1:1", "127.0.0.1:1", [])
            with pytest.raises(Exception) as unreach:
                await s.register_device(ghost)
            return dup.value.code, type(unreach.value).__name__, len(s.clones), await reg.get("ghost")

    code, exc, n, ghost = arun(go())
    assert code == "DUPLICATE_DEVICE" and exc == "UnreachableEndpoint" and n == 1 and ghost is None


def test_peers_subscribe_mutually_and_receive_everything():
    async def go():
        async with cluster(2) as (reg, srv, devs):
            a = await device(devs, "a", ["b"])
            await a.register(srv[0].endpoint)
            b = await device(devs, "b", ["a"])
            await b.register(srv[1].endpoint)
            await wait_until(lambda: subs_up(srv))
            for _ in range(25):
                a.publish_one()
            await wait_until(lambda: len(b.received["a"]) == 25)
            cb = srv[1].clones["clone-b"]
            return sorted(b.received["a"]), cb.demand.estimate("a") > 0, cb.latency.count

    seqs, demand_seen, samples = arun(go())
    assert seqs == list(range(1, 26)) and demand_seen and samples == 25


def test_peer_deregistration_marks_subscription_disconnected():
    async def go():
        async with cluster(2) as (reg, srv, devs):
            a = await device(devs, "a", ["b"])
            b = await device(devs, "b", ["a"])
            await a.register(srv[0].endpoint)
            await b.register(srv[1].endpoint)
            await wait_until(lambda: subs_up(srv))
            await srv[1].deregister_device("b")
            worker = srv[0].clones["clone-a"].workers["b"]
            await wait_until(lambda: worker.status == SubStatus.DISCONNECTED, timeout=2.0)
            return worker.status

    assert arun(go()) == SubStatus.DISCONNECTED


def test_migration_during_silence_loses_nothing_and_peers_follow():
    async def go():
        async with cluster(2) as (reg, srv, devs):
            a = await device(devs, "a", ["b"])
            b = await device(devs, "b", ["a"])
            await a.register(srv[0].endpoint)
            await b.register(srv[0].endpoint)
            await wait_until(lambda: subs_up(srv))
            for _ in range(5):
                a.publish_one()
            await wait_until(lambda: len(b.received["a"]) == 5)
            rep = await srv[0].migrate_clone("clone-a", "s1")
            assert rep.status == "OK"
            assert (await reg.get("a")).host_server_id == "s1"
            await wait_until(lambda: "clone-a" not in srv[0].clones and subs_up(srv))
            for _ in range(5):
                a.publish_one()
                b.publish_one()
            await wait_until(lambda: len(b.received["a"]) == 10 and len(a.received["b"]) == 5)
            moved = srv[1].clones["clone-a"]
            return sorted(b.received["a"]), moved.demand.to_dict()["outbound"]["bins"] != [], a.duplicates

    seqs, kept_monitor, dups = arun(go())
    assert seqs == list(range(1, 11)) and kept_monitor and not dups


def test_target_rejects_and_clone_stays():
    async def go():
        async with cluster(2) as (reg, srv, devs):
            srv[1].config.capacity_gamma = 1.0
            a = await device(devs, "a", ["b"], rate=50.0, seed=1)
            b = await device(devs, "b", ["a"], rate=50.0, seed=2)
            await a.register(srv[0].endpoint)
            await b.register(srv[0].endpoint)
            a.start_publishing()
            b.start_publishing()
            await wait_until(lambda: srv[0].clones["clone-a"].total_demand() > 1.0)
            rep = await srv[0].migrate_clone("clone-a", "s1")
            return rep.status, srv[0].clones["clone-a"].status, (await reg.get("a")).host_server_id

    assert arun(go()) == (TARGET_REJECTED, CloneStatus.ACTIVE, "s0")


def test_state_transfer_failure_rolls_back():
    async def go():
        async with cluster(2) as (reg, srv, devs):
            a = await device(devs, "a", ["b"])
            b = await device(devs, "b", ["a"])
            await a.register(srv[0].endpoint)
            await b.register(srv[1].endpoint)
            await wait_until(lambda: subs_up(srv))
            a.accept_subscribers = False  # the target cannot subscribe to the device
            rep = await srv[0].migrate_clone("clone-a", "s1")
            a.accept_subscribers = True
            a.publish_one()
            await wait_until(lambda: b.received["a"] == [1])
            return (rep.status, srv[0].clones["clone-a"].status, "clone-a" in srv[1].clones,
                    (await reg.get("a")).host_server_id)

    assert arun(go()) == (STATE_TRANSFER_FAILED, CloneStatus.ACTIVE, False, "s0")


def test_migration_under_traffic_is_transparent():
    async def go():
        async with cluster(3) as (reg, srv, devs):
            names = [f"d{i}" for i in range(4)]
            ds = [await device(devs, n, [m for m in names if m != n], rate=40.0, seed=i)
                  for i, n in enumerate(names)]
            for i, d in enumerate(ds):
                await d.register(srv[i % 3].endpoint)
            await wait_until(lambda: subs_up(srv))
            audit = UniquenessAudit(srv).start()
            for d in ds:
                d.start_publishing()
            reports = []
            for k in range(4):
                await asyncio.sleep(0.15)
                e = await reg.get(names[k])
                src = next(s for s in srv if s.id == e.host_server_id)
                tgt = srv[(srv.index(src) + 1) % 3].id
                reports.append(await src.migrate_clone(e.clone_id, tgt))
            await asyncio.sleep(0.2)
            for d in ds:
                await d.stop_publishing()
            await asyncio.sleep(0.5)
            await audit.stop()
            return [r.status for r in reports], audit_delivery(ds, cutover_windows(reports, 0.2)), audit

    statuses, rep, audit = arun(go())
    assert statuses == ["OK"] * 4
    assert rep.duplicates == 0 and rep.gaps_outside == 0 and rep.delivered > 0
    assert audit.samples > 0 and audit.violations == []


def test_clone_state_serializes_and_rebuilds_monitor_summaries():
    async def go():
        async with cluster(1) as (reg, (s,), devs):
            a = await device(devs, "a", ["b"])
            b = await device(devs, "b", ["a"])
            await a.register(s.endpoint)
            await b.register(s.endpoint)
            await wait_until(lambda: subs_up([s]))
            for _ in range(30):
                a.publish_one()
            await wait_until(lambda: s.clones["clone-b"].relayed == 30)
            clone = s.clones["clone-b"]
            state = CloneState.from_dict(json.loads(json.dumps(clone.snapshot().to_dict())))
            twin = CloneRuntime(state, reg, clock=clone.clock)
            now = clone.clock()
            return (clone.demand.estimates(now), twin.demand.estimates(now), clone.latency.p99(), twin.latency.p99(),
                    state.peer_subscriptions, len(state.delivered["a"]))

    e1, e2, p1, p2, subs, delivered = arun(go())
    assert e1 == e2 and p1 == p2 and subs == {"a": "ACTIVE"} and delivered == 30


def test_single_server_never_migrates():
    async def go():
        async with cluster(1, tick_period_s=0.05) as (reg, (s,), devs):
            a = await device(devs, "a", ["b"], rate=30, seed=1)
            b = await device(devs, "b", ["a"], rate=30, seed=2)
            await a.register(s.endpoint)
            await b.register(s.endpoint)
            a.start_publishing()
            b.start_publishing()
            s.enable_flock()
            await wait_until(lambda: s.ticks >= 5)
            return s.reports, s.decisions

    reports, decisions = arun(go())
    assert reports == [] and list(decisions) == []


def two_server_split(link_ms=20.0, capacity=100.0, rate=10.0, seed=0, **kw):
    """Two chatty devices whose clones start on different servers."""
    @contextlib.asynccontextmanager
    async def ctx():
        reg = MemoryRegistry()
        cfg = lambda i, o: ServerConfig(f"s{i}", gossip_period_s=0.05, probe_period_s=0.05, tick_period_s=0.15,
                                        flock_enabled=False, seed=seed * 10 + i, capacity_gamma=capacity,
                                        link_delay_ms={o: link_ms}, **kw)
        s1 = await FogMQServer(cfg(1, "s2"), registry=reg).start()
        s2 = await FogMQServer(cfg(2, "s1"), registry=reg).start()
        s2.config.bootstrap = [s1.endpoint]
        a = await DeviceEmulator("a", ["b"], rate=rate, seed=2 * seed).start()
        b = await DeviceEmulator("b", ["a"], rate=rate, seed=2 * seed + 1).start()
        try:
            await a.register(s1.endpoint)
            await b.register(s2.endpoint)
            a.start_publishing()
            b.start_publishing()
            await wait_until(lambda: all(s.view.get(o) is not None and s.view.get(o).tau.get(s.id)
                                         for s, o in ((s1, "s2"), (s2, "s1"))), timeout=5.0)
            await asyncio.sleep(1.0)  # let demand estimates and gossip settle
            yield reg, s1, s2
        finally:
            for x in (a, b):
                await x.stop()
            for x in (s1, s2):
                await x.stop()
    return ctx()


def test_decisions_replay_exactly_through_the_model_rule():
    async def go():
        async with two_server_split() as (reg, s1, s2):
            for _ in range(3):
                await s1.flock_tick()
                await s2.flock_tick()
            return list(s1.decisions) + list(s2.decisions)

    decisions = arun(go())
    assert decisions
    for d in decisions:
        again = Decision(**json.loads(json.dumps(d.__dict__)))
        assert again.replay() == d.accepted


def test_split_chatty_pair_colocates():
    async def go():
        async with two_server_split() as (reg, s1, s2):
            for _ in range(5):
                await s1.flock_tick()
                await s2.flock_tick()
            return (await reg.get("a")).host_server_id, (await reg.get("b")).host_server_id

    ha, hb = arun(go())
    assert ha == hb


def test_saturated_target_is_never_selected():
    async def go():
        async with two_server_split() as (reg, s1, s2):
            s2.config.capacity_gamma = 1.0  # far below the pair's load
            await wait_until(lambda: s1.view.get("s2").capacity == 1.0)
            for _ in range(5):
                await s1.flock_tick()
            return s1.candidates(), s1.reports

    cands, reports = arun(go())
    assert cands == [] and reports == []

"""Scripted loopback scenarios used by the experiment scripts and the
acceptance suite."""
from __future__ import annotations

import asyncio
import random
import time
from dataclasses import dataclass, field

from .clone import SubStatus
from .device import AuditReport, DeviceEmulator, audit_delivery, cutover_windows
from .registry import MemoryRegistry
from .server import FogMQServer, MigrationReport, ServerConfig, UniquenessAudit


async def _until(pred, timeout: float, step: float = 0.01) -> bool:
    end = time.monotonic() + timeout
    while not pred():
        if time.monotonic() > end:
            return False
        await asyncio.sleep(step)
    return True


def _subscriptions_up(servers) -> bool:
    return all(w.status == SubStatus.ACTIVE
               for s in servers for c in list(s.clones.values()) for w in c.workers.values())


@dataclass
class TransparencyResult:
    audit: AuditReport
    migrations: list[MigrationReport]
    uniqueness_samples: int
    uniqueness_violations: int
    elapsed_s: float
    published: int = 0
    per_device_rates: dict[str, float] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return (self.audit.ok and self.uniqueness_violations == 0
                and all(m.status == "OK" for m in self.migrations))


async def transparency_scenario(n_servers: int = 3, n_devices: int = 20, n_migrations: int = 10,
                                edge_p: float = 0.2, rate_range=(5.0, 20.0), seed: int = 0,
                                spacing_s: float = 0.25, drain_s: float = 0.2) -> TransparencyResult:
    """Poisson-publishing devices on ``n_servers`` servers while clones are
    force-migrated one after another; audits delivery and uniqueness."""
    rng = random.Random(seed)
    t0 = time.monotonic()
    reg = MemoryRegistry()
    servers = []
    devices: list[DeviceEmulator] = []
    try:
        for i in range(n_servers):
            cfg = ServerConfig(f"s{i}", gossip_period_s=0.05, probe_period_s=0.05, flock_enabled=False,
                               capacity_gamma=1e6, drain_s=drain_s, seed=rng.randrange(2**31))
            servers.append(await FogMQServer(cfg, registry=reg).start())
        for s in servers[1:]:
            s.config.bootstrap = [servers[0].endpoint]
        if not await _until(lambda: all(len(s.view) == n_servers for s in servers), 10.0):
            raise RuntimeError("gossip views did not converge")
        names = [f"d{i}" for i in range(n_devices)]
        peers = {n: [] for n in names}
        for i in range(n_devices):
            for j in range(i + 1, n_devices):
                if rng.random() < edge_p:
                    peers[names[i]].append(names[j])
                    peers[names[j]].append(names[i])
        for k, n in enumerate(names):
            d = await DeviceEmulator(n, peers[n], rate=rng.uniform(*rate_range), seed=rng.randrange(2**31)).start()
            devices.append(d)
            await d.register(servers[k % n_servers].endpoint)
        if not await _until(lambda: _subscriptions_up(servers), 10.0):
            raise RuntimeError("peer subscriptions did not come up")
        audit = UniquenessAudit(servers).start()
        for d in devices:
            d.start_publishing()
        reports = []
        movable = [n for n in names if peers[n]] or names
        for _ in range(n_migrations):
            await asyncio.sleep(spacing_s)
            dev = rng.choice(movable)
            entry = await reg.get(dev)
            src = next(s for s in servers if s.id == entry.host_server_id)
            target = rng.choice([s.id for s in servers if s is not src])
            reports.append(await src.migrate_clone(entry.clone_id, target))
        await asyncio.sleep(spacing_s)
        for d in devices:
            await d.stop_publishing()
        await asyncio.sleep(max(0.5, 2 * drain_s))
        await audit.stop()
        rep = audit_delivery(devices, cutover_windows(reports, drain_s))
        return TransparencyResult(rep, reports, audit.samples, len(audit.violations), time.monotonic() - t0,
                                  sum(len(d.published) for d in devices), {d.device_id: d.rate for d in devices})
    finally:
        for d in devices:
            await d.stop()
        for s in servers:
            await s.stop()


@dataclass
class ColocationResult:
    seed: int
    colocated: bool
    ticks: int
    migrations: int
    tau_ms: float | None


async def colocation_trial(seed: int, link_ms: float = 20.0, rate: float = 10.0, capacity: float = 100.0,
                           max_ticks: int = 20, tick_s: float = 0.15, warmup_s: float = 1.0) -> ColocationResult:
    """Two chatty devices whose clones start on different servers that are
    ``2 * link_ms`` apart round-trip. Runs jittered background flock ticks
    and reports how many ticks (max over both servers) passed before both
    clones shared a host."""
    reg = MemoryRegistry()
    rng = random.Random(seed)

    def cfg(i: int, other: str) -> ServerConfig:
        return ServerConfig(f"s{i}", gossip_period_s=0.05, probe_period_s=0.05, tick_period_s=tick_s,
                            flock_enabled=False, capacity_gamma=capacity, link_delay_ms={other: link_ms},
                            seed=rng.randrange(2**31))

    s1 = await FogMQServer(cfg(1, "s2"), registry=reg).start()
    s2 = await FogMQServer(cfg(2, "s1"), registry=reg).start()
    s2.config.bootstrap = [s1.endpoint]
    a = await DeviceEmulator("a", ["b"], rate=rate, seed=rng.randrange(2**31)).start()
    b = await DeviceEmulator("b", ["a"], rate=rate, seed=rng.randrange(2**31)).start()
    try:
        await a.register(s1.endpoint)
        await b.register(s2.endpoint)
        a.start_publishing()
        b.start_publishing()

        def measured() -> bool:
            return all(s.view.get(o) is not None and s.view.get(o).tau.get(s.id) is not None
                       for s, o in ((s1, "s2"), (s2, "s1")))

        if not await _until(measured, 10.0):
            raise RuntimeError("latency probes never completed")
        await asyncio.sleep(warmup_s)
        s1.enable_flock()
        s2.enable_flock()

        async def hosts():
            return (await reg.get("a")).host_server_id, (await reg.get("b")).host_server_id

        colocated, ticks = False, 0
        while True:
            ha, hb = await hosts()
            ticks = max(s1.ticks, s2.ticks)
            idle = not (s1._lock.locked() or s2._lock.locked())
            if ha == hb and idle:
                colocated = True
                break
            if ticks >= max_ticks and idle:
                break
            await asyncio.sleep(0.005)
        return ColocationResult(seed, colocated, ticks, len(s1.reports) + len(s2.reports), s1.view.tau("s1", "s2"))
    finally:
        for x in (a, b):
            await x.stop()
        for x in (s1, s2):
            await x.stop()

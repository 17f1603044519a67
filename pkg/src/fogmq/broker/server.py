"""FogMQ server: hosts clones, gossips membership, probes inter-server
latency and runs the periodic Flock tick that migrates clones.

Migration decisions are made by building a small :class:`~fogmq.model.Instance`
from measured state (the clone, its peers, their hosts, measured demands,
gossiped loads, capacities, weights and latencies) and handing it to
:func:`fogmq.flock.migration_accepted`. Every decision is logged together
with that snapshot so it can be replayed offline.

Migration protocol, on one connection from source S to target T:

1. S -> T ``MIGRATE_BEGIN``; T may answer ``MIGRATE_ABORT`` (TARGET_REJECTED).
2. S -> T ``STATE``; T builds a STANDBY clone that subscribes to the device
   and to every peer topic, buffering what arrives. Failure here is
   STATE_TRANSFER_FAILED and S carries on untouched.
3. S freezes its clone and sends ``MIGRATE_COMMIT`` with the dedup windows.
4. T switches the registry entry (compare-and-set on the host), activates
   the clone and flushes the buffer through the windows.
5. S drains the frozen clone and stops it. Peers' subscriber workers see
   their stream end and resubscribe at the registry's new host, asking for
   replay after the last sequence number they hold.
"""
from __future__ import annotations

import asyncio
import json
import logging
import math
import random
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..flock import migration_accepted
from ..latency import RegularizationParams, cloud_weight
from ..model import Assignment, CloneNode, CloudNode, DemandGraph, Instance, LatencyMatrix
from .clone import CloneRuntime, CloneState, CloneStatus, UnreachableEndpoint, clone_id_for
from .gossip import GossipView, ViewEntry
from .registry import MemoryRegistry, RegistryEntry, RegistryError, RemoteRegistry, handle_registry_op
from .wire import Frame, MsgType, ProtocolError, encode_json, read_frame, request, split_addr

log = logging.getLogger(__name__)

UNREACHABLE_ENDPOINT = "UNREACHABLE_ENDPOINT"
TARGET_REJECTED = "TARGET_REJECTED"
STATE_TRANSFER_FAILED = "STATE_TRANSFER_FAILED"
OK = "OK"
ABORTED = "ABORTED"
DECISION_LOG = 10_000


@dataclass
class ServerConfig:
    server_id: str
    bind_addr: str = "127.0.0.1:0"
    capacity_gamma: float = 100.0
    delta: float = 1.0
    bootstrap: list[str] = field(default_factory=list)
    gossip_period_s: float = 1.0
    tick_period_s: float = 30.0
    eta: float = 0.9
    a: float = 9.0
    registry_addr: str | None = None
    host_registry: bool = False
    expiry_s: float = 60.0
    probe_period_s: float = 1.0
    probe_timeout_s: float = 1.0
    drain_s: float = 0.2
    demand_window_s: float = 60.0
    link_delay_ms: dict[str, float] = field(default_factory=dict)
    flock_enabled: bool = True
    seed: int | None = None

    def __post_init__(self):
        split_addr(self.bind_addr)
        if not self.server_id:
            raise ValueError("server_id must be non-empty")
        if not (self.capacity_gamma > 0 and math.isfinite(self.capacity_gamma)):
            raise ValueError("capacity_gamma must be positive")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if not 0 < self.eta <= 1:
            raise ValueError("eta must lie in (0, 1]")
        if not self.a > 0:
            raise ValueError("a must be positive")
        for name in ("gossip_period_s", "tick_period_s", "probe_period_s", "expiry_s", "demand_window_s"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.registry_addr is not None and self.host_registry:
            raise ValueError("host_registry and registry_addr are mutually exclusive")

    @classmethod
    def from_dict(cls, d: dict) -> "ServerConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ServerConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DeviceRecord:
    device_id: str
    publish_endpoint: str
    push_endpoint: str
    peer_ids: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceRecord":
        return cls(d["device_id"], d["publish_endpoint"], d["push_endpoint"], list(d.get("peer_ids", [])))


@dataclass
class MigrationReport:
    clone_id: str
    source: str
    target: str
    status: str
    detail: str = ""
    started: float = 0.0
    finished: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Decision:
    """One evaluation of the migration rule and the snapshot it saw."""
    t: float
    clone_id: str
    source: str
    target: str
    accepted: bool
    instance: dict
    assignment: dict
    weights: dict
    eta: float
    a: float

    def replay(self) -> bool:
        inst = Instance.from_dict(self.instance)
        return migration_accepted(inst, Assignment(self.assignment), RegularizationParams(self.a),
                                  self.eta, self.clone_id, self.target, self.weights)


class FogMQServer:
    def __init__(self, config: ServerConfig, registry=None, clock=time.time):
        self.config = config
        self.id = config.server_id
        self.clock = clock
        self.rng = random.Random(config.seed)
        self.params = RegularizationParams(config.a)
        self.served_registry: MemoryRegistry | None = None
        if registry is not None:
            self.registry = registry
        elif config.registry_addr is not None:
            self.registry = RemoteRegistry(config.registry_addr)
        else:
            self.registry = MemoryRegistry(clock)
        if config.host_registry:
            if not isinstance(self.registry, MemoryRegistry):
                raise ValueError("a hosted registry must be in-memory")
            self.served_registry = self.registry
        self.clones: dict[str, CloneRuntime] = {}
        self.view: GossipView | None = None
        self.endpoint: str | None = None
        self.reports: list[MigrationReport] = []
        self.decisions: deque[Decision] = deque(maxlen=DECISION_LOG)
        self.ticks = 0
        self.weight = 0.0
        self._incoming: set[str] = set()
        self._server: asyncio.base_events.Server | None = None
        self._tasks: list[asyncio.Task] = []
        self._bg: set[asyncio.Task] = set()
        self._lock: asyncio.Lock | None = None
        self._unwatch = None

    # -- lifecycle -------------------------------------------------------------

    async def start(self) -> "FogMQServer":
        host, port = split_addr(self.config.bind_addr)
        self._server = await asyncio.start_server(self._handle, host, port)
        port = self._server.sockets[0].getsockname()[1]
        self.endpoint = f"{host}:{port}"
        self._lock = asyncio.Lock()
        self.view = GossipView(ViewEntry(self.id, self.endpoint, capacity=self.config.capacity_gamma),
                               self.config.expiry_s, self.clock)
        self._unwatch = self.registry.watch(self._on_registry_event)
        loop = asyncio.get_running_loop()
        self._tasks = [loop.create_task(self._periodic(self.gossip_round, self.config.gossip_period_s)),
                       loop.create_task(self._periodic(self.probe_all, self.config.probe_period_s))]
        if self.config.flock_enabled:
            self.enable_flock()
        log.info("server %s listening on %s", self.id, self.endpoint)
        return self

    def enable_flock(self) -> None:
        loop = asyncio.get_running_loop()
        self._tasks.append(loop.create_task(self._periodic(self.flock_tick, self.config.tick_period_s, jitter=True)))

    async def stop(self) -> None:
        for t in self._tasks + list(self._bg):
            t.cancel()
        for t in self._tasks + list(self._bg):
            try:
                await t
            except (asyncio.CancelledError, Exception):
                pass
        self._tasks.clear()
        for c in list(self.clones.values()):
            await c.stop()
        self.clones.clear()
        if self._unwatch is not None:
            self._unwatch()
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        if isinstance(self.registry, RemoteRegistry):
            await self.registry.close()

    async def serve_forever(self) -> None:
        await self._server.serve_forever()

    async def _periodic(self, fn, period: float, jitter: bool = False) -> None:
        while True:
            await asyncio.sleep(period * (self.rng.uniform(0.5, 1.5) if jitter else 1.0))
            try:
                await fn()
            except asyncio.CancelledError:
                raise
            except Exception:
                log.exception("%s: periodic %s failed", self.id, fn.__name__)

    def _spawn(self, coro) -> None:
        t = asyncio.get_running_loop().create_task(coro)
        self._bg.add(t)
        t.add_done_callback(self._bg.discard)

    def _on_registry_event(self, event: str, entry: RegistryEntry) -> None:
        for c in self.clones.values():
            w = c.workers.get(entry.device_id)
            if w is not None:
                w.registry_changed(event, entry)

    def _new_clone(self, state: CloneState) -> CloneRuntime:
        return CloneRuntime(state, self.registry, random.Random(self.rng.random()), self.clock,
                            self.config.demand_window_s)

    # -- connection handling ----------------------------------------------------

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            while True:
                frame = await read_frame(reader)
                if frame is None:
                    return
                t = frame.type
                if t == MsgType.REGISTER:
                    writer.write(encode_json(MsgType.REGISTER_ACK, await self._on_register(frame.json())))
                elif t == MsgType.GOSSIP:
                    self.view.merge(frame.json().get("entries", []))
                    self._refresh_self()
                    writer.write(encode_json(MsgType.GOSSIP, {"from": self.id, "entries": self.view.to_wire()}))
                elif t == MsgType.PROBE:
                    body = frame.json()
                    delay = self.config.link_delay_ms.get(body.get("from", ""), 0.0)
                    if delay:
                        await asyncio.sleep(delay / 1000.0)
                    writer.write(encode_json(MsgType.PROBE_ACK, {"from": self.id, "nonce": body.get("nonce")}))
                elif t == MsgType.SUBSCRIBE:
                    await self._on_subscribe(frame.json(), reader, writer)
                    return
                elif t == MsgType.MIGRATE_BEGIN:
                    await self._on_migrate(frame, reader, writer)
                    return
                elif t == MsgType.REGISTRY_OP:
                    if self.served_registry is None:
                        writer.write(encode_json(MsgType.REGISTRY_REPLY, {"ok": False, "error": "NO_REGISTRY"}))
                    else:
                        await handle_registry_op(self.served_registry, frame.json(), reader, writer)
                else:
                    log.debug("%s: unexpected %s", self.id, t.name)
                await writer.drain()
        except (ProtocolError, OSError, ConnectionError, json.JSONDecodeError) as exc:
            log.debug("%s: connection error: %s", self.id, exc)
        finally:
            writer.close()

    async def _on_register(self, body: dict) -> dict:
        if body.get("op") == "deregister":
            return {"ok": await self.deregister_device(body["device_id"]), "server_id": self.id}
        try:
            cid = await self.register_device(DeviceRecord.from_dict(body))
        except RegistryError as exc:
            return {"ok": False, "error": exc.code, "detail": exc.detail}
        except UnreachableEndpoint as exc:
            return {"ok": False, "error": UNREACHABLE_ENDPOINT, "detail": str(exc)}
        except (KeyError, ValueError) as exc:
            return {"ok": False, "error": "BAD_REQUEST", "detail": str(exc)}
        return {"ok": True, "clone_id": cid, "server_id": self.id}

    async def _on_subscribe(self, body: dict, reader, writer) -> None:
        clone = self.clones.get(body.get("topic", ""))
        if clone is None or clone.status == CloneStatus.STOPPED:
            writer.write(encode_json(MsgType.SUBSCRIBE, {"ok": False, "error": "NOT_HOSTED"}))
            await writer.drain()
            return
        writer.write(encode_json(MsgType.SUBSCRIBE, {"ok": True, "server_id": self.id}))
        clone.add_subscriber(writer, body.get("subscriber", "?"), body.get("since"))
        try:
            await reader.read()  # subscriber sends nothing more; wait for it to leave
        finally:
            clone.subscribers.pop(writer, None)

    # -- device registration ------------------------------------------------------

    async def register_device(self, record: DeviceRecord) -> str:
        """Claim the device in the registry and start its clone here."""
        cid = clone_id_for(record.device_id)
        entry = RegistryEntry(record.device_id, cid, self.id, self.endpoint, record.publish_endpoint,
                              record.push_endpoint, list(record.peer_ids))
        await self.registry.claim(entry)
        clone = self._new_clone(CloneState(cid, record.device_id, self.id, record.publish_endpoint,
                                           record.push_endpoint, list(record.peer_ids)))
        self.clones[cid] = clone
        try:
            await clone.start(active=True)
        except UnreachableEndpoint:
            self.clones.pop(cid, None)
            await clone.stop()
            await self.registry.remove(record.device_id, self.id)
            raise
        return cid

    async def deregister_device(self, device_id: str) -> bool:
        clone = self.clones.pop(clone_id_for(device_id), None)
        removed = await self.registry.remove(device_id, self.id)
        if clone is not None:
            await clone.stop()
        return removed

    # -- measurements ------------------------------------------------------------

    def active_clones(self) -> list[CloneRuntime]:
        return [self.clones[k] for k in sorted(self.clones) if self.clones[k].status == CloneStatus.ACTIVE]

    def load(self, now: float | None = None) -> float:
        """Sum of hosted clones' measured demand: this server's L."""
        now = self.clock() if now is None else now
        return math.fsum(c.total_demand(now) for c in self.active_clones())

    def _refresh_self(self) -> None:
        self.view.update_self(endpoint=self.endpoint, weight=self.weight, load=self.load(),
                              capacity=self.config.capacity_gamma)

    async def gossip_round(self) -> GossipView:
        """Exchange views with one random known server (or a bootstrap)."""
        self._refresh_self()
        others = self.view.others(reachable_only=False)
        if others:
            addr = self.view.get(self.rng.choice(others)).endpoint
        else:
            boots = [b for b in self.config.bootstrap if b != self.endpoint]
            if not boots:
                self.view.evict()
                return self.view
            addr = self.rng.choice(boots)
        try:
            reply = await request(addr, encode_json(MsgType.GOSSIP, {"from": self.id, "entries": self.view.to_wire()}),
                                  self.config.probe_timeout_s * 2)
            if reply is not None and reply.type == MsgType.GOSSIP:
                self.view.merge(reply.json().get("entries", []))
        except (OSError, asyncio.TimeoutError, ProtocolError) as exc:
            log.debug("%s: gossip with %s failed: %s", self.id, addr, exc)
        self.view.evict()
        return self.view

    async def measure_tau(self, server_id: str) -> float | None:
        """One probe round trip; folds rtt/2 into the EWMA estimate."""
        if server_id == self.id:
            return 0.0
        e = self.view.get(server_id)
        if e is None:
            return None
        delay = self.config.link_delay_ms.get(server_id, 0.0) / 1000.0
        t0 = time.perf_counter()
        try:
            if delay:
                await asyncio.sleep(delay)
            reply = await request(e.endpoint, encode_json(MsgType.PROBE, {"from": self.id, "nonce": t0}),
                                  self.config.probe_timeout_s)
            if reply is None or reply.type != MsgType.PROBE_ACK:
                raise ProtocolError("no probe ack")
        except (OSError, asyncio.TimeoutError, ProtocolError) as exc:
            log.debug("%s: probe to %s failed: %s", self.id, server_id, exc)
            self.view.mark_unreachable(server_id)
            return None
        return self.view.record_tau(server_id, (time.perf_counter() - t0) * 1000.0 / 2)

    async def probe_all(self) -> None:
        others = self.view.others(reachable_only=False)
        if others:
            await asyncio.gather(*(self.measure_tau(s) for s in others))

    # -- Flock ---------------------------------------------------------------------

    async def _peer_hosts(self, clones) -> dict[str, str]:
        hosts = {}
        for c in clones:
            for p in c.peer_ids:
                if p in hosts:
                    continue
                try:
                    e = await self.registry.get(p)
                except RegistryError:
                    e = None
                if e is not None:
                    hosts[p] = e.host_server_id
        return hosts

    def snapshot(self, clones, hosts: dict[str, str], extra=()) -> tuple[Instance, Assignment] | None:
        """Model instance for ``clones`` (hosted here) and their peers.

        Clouds are this server, ``extra`` and the peers' hosts. A peer whose
        host has no known latency to the other clouds is left out; if an
        ``extra`` cloud lacks one the snapshot is unusable and None is
        returned. Traffic not represented by the included clones becomes the
        cloud's ``base_load`` (reported load minus modeled load).
        """
        view, now = self.view, self.clock()
        clouds = [self.id]
        for y in extra:
            if y in clouds:
                continue
            if y not in view or any(view.tau(y, c) is None for c in clouds):
                return None
            clouds.append(y)
        for h in sorted(set(hosts.values())):
            if h not in clouds and h in view and all(view.tau(h, c) is not None for c in clouds):
                clouds.append(h)
        local = {c.clone_id: c for c in clones}
        place = {cid: self.id for cid in local}
        edges: dict[tuple[str, str], list[float]] = {}
        for c in clones:
            for p, d in c.demand.estimates(now).items():
                h = hosts.get(p)
                if d <= 0 or h not in clouds:
                    continue
                pid = clone_id_for(p)
                if pid not in place:
                    place[pid] = self.id if pid in local else h
                edges.setdefault(tuple(sorted((c.clone_id, pid))), []).append(d)
        demands = {k: math.fsum(v) / len(v) for k, v in edges.items()}
        modeled = dict.fromkeys(clouds, 0.0)
        for (i, j), d in demands.items():
            modeled[place[i]] += d
            modeled[place[j]] += d
        nodes = []
        for x in clouds:
            if x == self.id:
                cap, reported = self.config.capacity_gamma, self.load(now)
            else:
                e = view.get(x)
                cap, reported = e.capacity, e.load
            nodes.append(CloudNode(x, cap, view.get(x).endpoint, max(0.0, reported - modeled[x])))
        pairs = [(a, b, view.tau(a, b)) for k, a in enumerate(clouds) for b in clouds[k + 1:]]
        inst = Instance(nodes, LatencyMatrix.from_pairs(clouds, pairs),
                        [CloneNode(cid) for cid in sorted(place)], DemandGraph(demands), self.config.delta)
        return inst, Assignment(place)

    async def refresh_weight(self) -> float:
        """w_x: sum of hosted clones' costs under measured demand."""
        active = self.active_clones()
        if not active:
            self.weight = 0.0
        else:
            snap = self.snapshot(active, await self._peer_hosts(active))
            self.weight = cloud_weight(*snap, self.id) if snap else 0.0
        return self.weight

    async def evaluate(self, clone: CloneRuntime, target: str) -> Decision | None:
        snap = self.snapshot([clone], await self._peer_hosts([clone]), extra=[target])
        if snap is None:
            return None
        inst, asg = snap
        weights = {x: (self.weight if x == self.id else self.view.get(x).weight) for x in inst.cloud_ids}
        ok = migration_accepted(inst, asg, self.params, self.config.eta, clone.clone_id, target, weights)
        d = Decision(self.clock(), clone.clone_id, self.id, target, ok, inst.to_dict(), asg.to_dict(),
                     weights, self.config.eta, self.config.a)
        self.decisions.append(d)
        return d

    def candidates(self) -> list[str]:
        out = []
        for s in self.view.others():
            e = self.view.get(s)
            if self.view.tau(self.id, s) is not None and e.load < e.capacity:
                out.append(s)
        return out

    async def flock_tick(self) -> list[MigrationReport]:
        """Each hosted clone samples one target and moves if the rule says so."""
        self.ticks += 1
        await self.refresh_weight()
        reports = []
        order = self.active_clones()
        self.rng.shuffle(order)
        for clone in order:
            targets = self.candidates()
            if not targets:
                break
            if clone.status != CloneStatus.ACTIVE or self.clones.get(clone.clone_id) is not clone:
                continue
            y = self.rng.choice(targets)
            d = await self.evaluate(clone, y)
            if d is not None and d.accepted:
                reports.append(await self.migrate_clone(clone.clone_id, y))
                await self.refresh_weight()
        return reports

    # -- migration: source side ------------------------------------------------------

    async def migrate_clone(self, clone_id: str, target: str, timeout: float = 5.0) -> MigrationReport:
        async with self._lock:
            rep = await self._migrate(clone_id, target, timeout)
        rep.finished = self.clock()
        self.reports.append(rep)
        log.info("%s: migrate %s -> %s: %s %s", self.id, clone_id, target, rep.status, rep.detail)
        return rep

    async def _migrate(self, clone_id: str, target: str, timeout: float) -> MigrationReport:
        rep = MigrationReport(clone_id, self.id, target, ABORTED, started=self.clock())
        clone = self.clones.get(clone_id)
        if clone is None or clone.status != CloneStatus.ACTIVE:
            rep.detail = "clone not active here"
            return rep
        if target == self.id:
            rep.detail = "target is the current host"
            return rep
        entry = self.view.get(target)
        if entry is None:
            rep.status, rep.detail = TARGET_REJECTED, "unknown target"
            return rep
        try:
            reader, writer = await asyncio.wait_for(asyncio.open_connection(*split_addr(entry.endpoint)), timeout)
        except (OSError, asyncio.TimeoutError) as exc:
            rep.status, rep.detail = TARGET_REJECTED, f"unreachable: {exc}"
            return rep

        async def exchange(mtype: MsgType, body: dict) -> Frame | None:
            writer.write(encode_json(mtype, body))
            await writer.drain()
            return await asyncio.wait_for(read_frame(reader), timeout)

        frozen = False
        try:
            reply = await exchange(MsgType.MIGRATE_BEGIN, {
                "clone_id": clone_id, "device_id": clone.device_id, "source": self.id,
                "load": clone.total_demand()})
            if reply is None or reply.type != MsgType.MIGRATE_BEGIN:
                rep.status = TARGET_REJECTED
                rep.detail = reply.json().get("detail", "") if reply is not None else "connection closed"
                return rep
            reply = await exchange(MsgType.STATE, {"state": clone.snapshot().to_dict()})
            if reply is None or reply.type != MsgType.STATE:
                rep.status = STATE_TRANSFER_FAILED
                rep.detail = reply.json().get("detail", "") if reply is not None else "connection closed"
                return rep
            windows = clone.freeze()
            frozen = True
            reply = await exchange(MsgType.MIGRATE_COMMIT, {"source": self.id, **windows})
            committed = reply is not None and reply.type == MsgType.MIGRATE_COMMIT
            if not committed:
                rep.detail = reply.json().get("detail", "") if reply is not None else "connection closed"
        except (OSError, asyncio.TimeoutError, ProtocolError) as exc:
            committed = False
            rep.detail = str(exc)
        finally:
            writer.close()
        if frozen and not committed:
            # the reply may have been lost after the target switched the registry
            try:
                cur = await self.registry.get(clone.device_id)
                committed = cur is not None and cur.host_server_id == target
            except RegistryError:
                committed = False
        if not frozen:
            rep.status = STATE_TRANSFER_FAILED
            return rep
        if not committed:
            clone.resume()
            rep.status = STATE_TRANSFER_FAILED
            return rep
        if self.clones.get(clone_id) is clone:
            del self.clones[clone_id]
        self._spawn(clone.drain(self.config.drain_s))
        rep.status, rep.detail = OK, ""
        return rep

    # -- migration: target side --------------------------------------------------------

    async def _on_migrate(self, first: Frame, reader, writer, timeout: float = 5.0) -> None:
        body = first.json()
        cid = body["clone_id"]
        reason = None
        if cid in self.clones or cid in self._incoming:
            reason = "clone already present"
        elif self.load() + float(body.get("load", 0.0)) >= self.config.capacity_gamma:
            reason = "insufficient capacity"
        if reason is not None:
            writer.write(encode_json(MsgType.MIGRATE_ABORT, {"reason": TARGET_REJECTED, "detail": reason}))
            await writer.drain()
            return
        self._incoming.add(cid)
        clone, committed = None, False

        def abort(reason: str, detail: str) -> None:
            writer.write(encode_json(MsgType.MIGRATE_ABORT, {"reason": reason, "detail": detail}))

        try:
            writer.write(encode_json(MsgType.MIGRATE_BEGIN, {"ok": True}))
            await writer.drain()
            frame = await asyncio.wait_for(read_frame(reader), timeout)
            if frame is None or frame.type != MsgType.STATE:
                return
            state = CloneState.from_dict(frame.json()["state"])
            state.host_server_id = self.id
            clone = self._new_clone(state)
            try:
                await clone.start(active=False)
            except UnreachableEndpoint as exc:
                abort(STATE_TRANSFER_FAILED, str(exc))
                return
            self.clones[cid] = clone
            writer.write(encode_json(MsgType.STATE, {"ok": True}))
            await writer.drain()
            frame = await asyncio.wait_for(read_frame(reader), timeout)
            if frame is None or frame.type != MsgType.MIGRATE_COMMIT:
                return
            commit = frame.json()
            try:
                await self.registry.switch(state.device_id, commit["source"], self.id, self.endpoint)
            except RegistryError as exc:
                abort(STATE_TRANSFER_FAILED, str(exc))
                return
            clone.activate(commit.get("published", ()), commit.get("delivered", {}))
            committed = True
            writer.write(encode_json(MsgType.MIGRATE_COMMIT, {"ok": True}))
            await writer.drain()
        except (OSError, asyncio.TimeoutError, ProtocolError) as exc:
            log.debug("%s: incoming migration of %s failed: %s", self.id, cid, exc)
        finally:
            self._incoming.discard(cid)
            if clone is not None and not committed:
                if self.clones.get(cid) is clone:
                    del self.clones[cid]
                await clone.stop()


def active_census(servers) -> dict[str, int]:
    """Number of ACTIVE clones per device across ``servers``."""
    out: dict[str, int] = {}
    for s in servers:
        for c in list(s.clones.values()):
            if c.status == CloneStatus.ACTIVE:
                out[c.device_id] = out.get(c.device_id, 0) + 1
    return out


class UniquenessAudit:
    """Samples :func:`active_census` in the background and counts instants
    where some device had more than one ACTIVE clone."""

    def __init__(self, servers, period: float = 0.002):
        self.servers = servers
        self.period = period
        self.samples = 0
        self.violations: list[tuple[float, dict]] = []
        self._task: asyncio.Task | None = None

    def start(self) -> "UniquenessAudit":
        self._task = asyncio.get_running_loop().create_task(self._run())
        return self

    async def _run(self) -> None:
        while True:
            census = active_census(self.servers)
            self.samples += 1
            bad = {d: k for d, k in census.items() if k > 1}
            if bad:
                self.violations.append((time.time(), bad))
            await asyncio.sleep(self.period)

    async def stop(self) -> None:
        if self._task is not None:
            self._task.cancel()
            try:
                await self._task
            except asyncio.CancelledError:
                pass

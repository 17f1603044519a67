"""Clone runtime: a device's surrogate living inside a FogMQ server.

A clone connects inward to its device's publish endpoint, republishes each
device message on its own topic (named by the clone id), runs one
subscriber worker per peer, and pushes peer messages to the device's push
endpoint.

Lifecycle::

    STANDBY  -> ACTIVE                 (migration target after commit)
    ACTIVE   -> FROZEN -> ACTIVE       (migration source, aborted)
    ACTIVE   -> FROZEN -> DRAINING -> STOPPED

Only an ACTIVE clone forwards anything. A STANDBY clone is already
subscribed and buffers what it hears; on activation it replays the buffer
through the dedup windows inherited from the frozen source, which is what
makes a cutover lose nothing and duplicate nothing.
"""
from __future__ import annotations

import asyncio
import enum
import logging
import random
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from .monitors import DemandMonitor, LatencyMonitor
from .registry import RegistryEntry
from .wire import Message, MsgType, ProtocolError, encode_json, publish_frame, read_frame, split_addr

log = logging.getLogger(__name__)

DEDUP_WINDOW = 10_000
RING_SIZE = 4096


def clone_id_for(device_id: str) -> str:
    return f"clone-{device_id}"


class UnreachableEndpoint(Exception):
    pass


class CloneStatus(str, enum.Enum):
    STANDBY = "STANDBY"
    ACTIVE = "ACTIVE"
    FROZEN = "FROZEN"
    DRAINING = "DRAINING"
    STOPPED = "STOPPED"


class SubStatus(str, enum.Enum):
    PENDING = "PENDING"
    ACTIVE = "ACTIVE"
    DISCONNECTED = "DISCONNECTED"


class SeqWindow:
    """The last ``size`` sequence numbers seen, for duplicate suppression."""

    def __init__(self, size: int = DEDUP_WINDOW, seqs=()):
        self.size = size
        self._order: deque[int] = deque()
        self._set: set[int] = set()
        for s in seqs:
            self.add(s)

    def __contains__(self, seq: int) -> bool:
        return seq in self._set

    def __len__(self) -> int:
        return len(self._set)

    def add(self, seq: int) -> bool:
        """Record ``seq``; False if it was already present."""
        if seq in self._set:
            return False
        self._set.add(seq)
        self._order.append(seq)
        if len(self._order) > self.size:
            self._set.discard(self._order.popleft())
        return True

    def merge(self, seqs) -> None:
        for s in seqs:
            self.add(s)

    def to_list(self) -> list[int]:
        return list(self._order)


@dataclass
class CloneState:
    """Everything a clone needs to be rebuilt on another server."""
    clone_id: str
    device_id: str
    host_server_id: str
    publish_endpoint: str
    push_endpoint: str
    peer_ids: list[str]
    peer_subscriptions: dict[str, str] = field(default_factory=dict)
    demand: dict | None = None
    latency: dict | None = None
    published: list[int] = field(default_factory=list)
    delivered: dict[str, list[int]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "CloneState":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


class Backoff:
    """Exponential random backoff: wait U(0, min(cap, base * 2^k))."""

    def __init__(self, rng: random.Random, base: float = 0.05, cap: float = 2.0):
        self.rng, self.base, self.cap = rng, base, cap
        self.attempt = 0

    def reset(self) -> None:
        self.attempt = 0

    def next(self) -> float:
        d = self.rng.uniform(0, min(self.cap, self.base * 2 ** self.attempt))
        self.attempt += 1
        return d


class PeerWorker:
    """Subscribes to one peer's topic wherever the registry says it lives,
    and follows it across migrations."""

    def __init__(self, clone: "CloneRuntime", peer_id: str):
        self.clone = clone
        self.peer_id = peer_id
        self.status = SubStatus.PENDING
        self.host: str | None = None
        self.last_seq: int | None = None
        self.backoff = Backoff(clone.rng)
        self._writer: asyncio.StreamWriter | None = None
        self._task: asyncio.Task | None = None
        self._stopped = False
        self.connected = asyncio.Event()
        self._wake = asyncio.Event()

    def start(self) -> None:
        self._task = asyncio.get_running_loop().create_task(self._run())

    def registry_changed(self, event: str, entry: RegistryEntry) -> None:
        # a draining host closes our stream itself once flushed, so events
        # only need to cut a pending backoff short
        self.backoff.reset()
        self._wake.set()

    def _drop(self) -> None:
        if self._writer is not None:
            self._writer.close()

    async def _sleep(self, seconds: float) -> None:
        try:
            await asyncio.wait_for(self._wake.wait(), seconds)
        except asyncio.TimeoutError:
            pass
        self._wake.clear()

    async def _run(self) -> None:
        clone = self.clone
        while not self._stopped:
            try:
                entry = await clone.registry.get(self.peer_id)
            except Exception as exc:
                log.debug("%s: registry lookup for %s failed: %s", clone.clone_id, self.peer_id, exc)
                entry = None
            if entry is None:
                if self.status == SubStatus.ACTIVE:
                    self.status = SubStatus.DISCONNECTED
                await self._sleep(self.backoff.next())
                continue
            try:
                await self._follow(entry)
            except asyncio.CancelledError:
                raise
            except (OSError, ProtocolError, asyncio.TimeoutError) as exc:
                log.debug("%s: subscription to %s failed: %s", clone.clone_id, self.peer_id, exc)
            finally:
                self._writer = None
                self.connected.clear()
            if self.status == SubStatus.ACTIVE:
                self.status = SubStatus.DISCONNECTED
            if not self._stopped:
                await self._sleep(self.backoff.next())

    async def _follow(self, entry: RegistryEntry) -> None:
        host, port = split_addr(entry.host_endpoint)
        reader, writer = await asyncio.wait_for(asyncio.open_connection(host, port), 2.0)
        self._writer = writer
        try:
            writer.write(encode_json(MsgType.SUBSCRIBE, {
                "topic": entry.clone_id, "subscriber": self.clone.clone_id, "since": self.last_seq}))
            await writer.drain()
            reply = await asyncio.wait_for(read_frame(reader), 2.0)
            if reply is None or reply.type != MsgType.SUBSCRIBE or not reply.json().get("ok"):
                return
            self.host = entry.host_server_id
            self.status = SubStatus.ACTIVE
            self.backoff.reset()
            self.connected.set()
            while True:
                frame = await read_frame(reader)
                if frame is None:
                    return
                if frame.type == MsgType.PUBLISH:
                    msg = frame.message()
                    if self.last_seq is None or msg.seq > self.last_seq:
                        self.last_seq = msg.seq
                    self.clone.on_peer_message(self.peer_id, msg)
        finally:
            writer.close()

    async def stop(self) -> None:
        self._stopped = True
        self._drop()
        if self._task is not None:
            self._task.cancel()
            try:
                await self._task
            except (asyncio.CancelledError, Exception):
                pass


class CloneRuntime:
    def __init__(self, state: CloneState, registry, rng: random.Random | None = None,
                 clock=time.time, demand_window: float = 60.0,
                 relay_hook: Callable[["CloneRuntime", str, Message], None] | None = None):
        self.clone_id = state.clone_id
        self.device_id = state.device_id
        self.host_server_id = state.host_server_id
        self.publish_endpoint = state.publish_endpoint
        self.push_endpoint = state.push_endpoint
        self.peer_ids = list(state.peer_ids)
        self.registry = registry
        self.rng = rng or random.Random()
        self.clock = clock
        self.status = CloneStatus.STANDBY
        self.demand = (DemandMonitor.from_dict(state.demand, clock) if state.demand
                       else DemandMonitor(demand_window, 1.0, clock))
        for p in self.peer_ids:
            self.demand.track(p)
        self.latency = LatencyMonitor.from_dict(state.latency) if state.latency else LatencyMonitor()
        self.published = SeqWindow(seqs=state.published)
        self.delivered = {p: SeqWindow(seqs=state.delivered.get(p, ())) for p in self.peer_ids}
        self.relay_hook = relay_hook
        self.workers = {p: PeerWorker(self, p) for p in self.peer_ids}
        self.subscribers: dict[asyncio.StreamWriter, str] = {}
        self.ring: deque[Message] = deque(maxlen=RING_SIZE)
        self._buffer: list[tuple[str | None, Message]] = []
        self._push_q: asyncio.Queue = asyncio.Queue()
        self._tasks: list[asyncio.Task] = []
        self._dev_writer: asyncio.StreamWriter | None = None
        self.received = 0
        self.relayed = 0
        self.pushed = 0

    # -- lifecycle ----------------------------------------------------------

    async def start(self, active: bool = True, timeout: float = 2.0) -> None:
        """Subscribe to the device and start peer workers. Raises
        :class:`UnreachableEndpoint` if the device cannot be reached."""
        try:
            host, port = split_addr(self.publish_endpoint)
            reader, writer = await asyncio.wait_for(asyncio.open_connection(host, port), timeout)
            writer.write(encode_json(MsgType.SUBSCRIBE, {"subscriber": self.clone_id}))
            await writer.drain()
            reply = await asyncio.wait_for(read_frame(reader), timeout)
            if reply is None or reply.type != MsgType.SUBSCRIBE or not reply.json().get("ok"):
                writer.close()
                raise UnreachableEndpoint(f"device {self.device_id} refused subscription")
        except (OSError, asyncio.TimeoutError, ProtocolError, ValueError) as exc:
            raise UnreachableEndpoint(f"{self.publish_endpoint}: {exc}") from exc
        self._dev_writer = writer
        loop = asyncio.get_running_loop()
        self._tasks.append(loop.create_task(self._device_loop(reader)))
        self._tasks.append(loop.create_task(self._push_loop()))
        for w in self.workers.values():
            w.start()
        if active:
            self.status = CloneStatus.ACTIVE

    def activate(self, published=(), delivered: dict | None = None) -> None:
        self.published.merge(published)
        for p, seqs in (delivered or {}).items():
            if p in self.delivered:
                self.delivered[p].merge(seqs)
        self.status = CloneStatus.ACTIVE
        buf, self._buffer = self._buffer, []
        # keep what the predecessor already published available for replay
        for peer, msg in buf:
            if peer is None and msg.seq in self.published:
                self.ring.append(msg)
        for peer, msg in buf:
            if peer is None:
                self.on_device_message(msg)
            else:
                self.on_peer_message(peer, msg)

    def freeze(self) -> dict:
        """Stop forwarding and return the dedup windows for the successor."""
        self.status = CloneStatus.FROZEN
        return {"published": self.published.to_list(),
                "delivered": {p: w.to_list() for p, w in self.delivered.items()}}

    def resume(self) -> None:
        if self.status == CloneStatus.FROZEN:
            self.status = CloneStatus.ACTIVE

    async def drain(self, seconds: float = 0.2) -> None:
        """Let queued pushes and topic writes flush, then stop."""
        self.status = CloneStatus.DRAINING
        deadline = self.clock() + seconds
        while not self._push_q.empty() and self.clock() < deadline:
            await asyncio.sleep(0.01)
        for w in list(self.subscribers):
            try:
                await asyncio.wait_for(w.drain(), max(0.01, deadline - self.clock()))
            except (OSError, asyncio.TimeoutError, ConnectionError):
                pass
        await self.stop()

    async def stop(self) -> None:
        self.status = CloneStatus.STOPPED
        for w in self.workers.values():
            await w.stop()
        for w in list(self.subscribers):
            w.close()
        self.subscribers.clear()
        if self._dev_writer is not None:
            self._dev_writer.close()
        for t in self._tasks:
            t.cancel()
        for t in self._tasks:
            try:
                await t
            except (asyncio.CancelledError, Exception):
                pass
        self._tasks.clear()

    # -- data path ----------------------------------------------------------

    async def _device_loop(self, reader) -> None:
        try:
            while True:
                frame = await read_frame(reader)
                if frame is None:
                    return
                if frame.type == MsgType.PUBLISH:
                    self.on_device_message(frame.message())
        except (OSError, ProtocolError) as exc:
            log.debug("%s: device stream ended: %s", self.clone_id, exc)

    def on_device_message(self, msg: Message) -> None:
        if self.status == CloneStatus.STANDBY:
            self._buffer.append((None, msg))
            return
        if self.status != CloneStatus.ACTIVE:
            return
        if not self.published.add(msg.seq):
            return
        self.received += 1
        self.demand.record_out()
        self.ring.append(msg)
        frame = publish_frame(msg)
        for w in list(self.subscribers):
            if w.is_closing():
                self.subscribers.pop(w, None)
            else:
                w.write(frame)

    def on_peer_message(self, peer: str, msg: Message) -> None:
        if self.status == CloneStatus.STANDBY:
            self._buffer.append((peer, msg))
            return
        if self.status != CloneStatus.ACTIVE:
            return
        if not self.delivered[peer].add(msg.seq):
            return
        self.demand.record_in(peer)
        self.latency.add(max(0.0, (self.clock() - msg.ts) * 1000.0))
        self.relayed += 1
        if self.relay_hook is not None:
            self.relay_hook(self, peer, msg)
        self._push_q.put_nowait(msg)

    def add_subscriber(self, writer: asyncio.StreamWriter, name: str, since: int | None) -> None:
        """Attach a topic subscriber, replaying retained messages after
        ``since`` so a peer that follows us across a migration misses none."""
        if self.status in (CloneStatus.ACTIVE, CloneStatus.FROZEN, CloneStatus.DRAINING):
            for msg in self.ring:
                if since is None or msg.seq > since:
                    writer.write(publish_frame(msg))
        elif self.status == CloneStatus.STANDBY:
            pass  # activation replays the buffer to everyone attached
        self.subscribers[writer] = name

    async def _push_loop(self) -> None:
        writer = None
        backoff = Backoff(self.rng)
        try:
            while True:
                msg = await self._push_q.get()
                while True:
                    if writer is None or writer.is_closing():
                        try:
                            host, port = split_addr(self.push_endpoint)
                            _, writer = await asyncio.wait_for(asyncio.open_connection(host, port), 2.0)
                            backoff.reset()
                        except (OSError, asyncio.TimeoutError) as exc:
                            writer = None
                            log.debug("%s: push endpoint unreachable: %s", self.clone_id, exc)
                            await asyncio.sleep(backoff.next())
                            if self.status in (CloneStatus.STOPPED, CloneStatus.DRAINING):
                                break
                            continue
                    writer.write(publish_frame(msg, MsgType.PUSH))
                    self.pushed += 1
                    break
        finally:
            if writer is not None:
                writer.close()

    # -- introspection ------------------------------------------------------

    def total_demand(self, now: float | None = None) -> float:
        return sum(self.demand.estimates(now).values())

    def subscription_status(self) -> dict[str, str]:
        return {p: w.status.value for p, w in self.workers.items()}

    def snapshot(self) -> CloneState:
        return CloneState(
            clone_id=self.clone_id, device_id=self.device_id, host_server_id=self.host_server_id,
            publish_endpoint=self.publish_endpoint, push_endpoint=self.push_endpoint,
            peer_ids=list(self.peer_ids), peer_subscriptions=self.subscription_status(),
            demand=self.demand.to_dict(), latency=self.latency.to_dict(),
            published=self.published.to_list(),
            delivered={p: w.to_list() for p, w in self.delivered.items()})

"""Device emulator and delivery audit.

A device binds two endpoints: one its clone subscribes to for the device's
publications, one that receives pushes from its clone. Publishing is a
Poisson process with per-device sequence numbers, so a receiver can tell
duplicates and gaps apart.
"""
from __future__ import annotations

import asyncio
import logging
import random
import time
from collections import defaultdict
from dataclasses import dataclass, field

from .server import DeviceRecord
from .wire import Message, MsgType, ProtocolError, encode_json, publish_frame, read_frame, request

log = logging.getLogger(__name__)


class RegistrationFailed(Exception):
    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}")
        self.code = code


class DeviceEmulator:
    def __init__(self, device_id: str, peer_ids=(), rate: float = 1.0, seed: int | None = None,
                 host: str = "127.0.0.1", payload_size: int = 16, clock=time.time):
        self.device_id = device_id
        self.peer_ids = list(peer_ids)
        self.rate = rate
        self.rng = random.Random(seed)
        self.host = host
        self.payload = b"x" * payload_size
        self.clock = clock
        self.seq = 0
        self.published: dict[int, float] = {}
        self.received: dict[str, list[int]] = defaultdict(list)
        self.duplicates: dict[str, int] = defaultdict(int)
        self._seen: dict[str, set[int]] = defaultdict(set)
        self.subscribers: dict[asyncio.StreamWriter, str] = {}
        self.accept_subscribers = True
        self.clone_id: str | None = None
        self.server_id: str | None = None
        self._pub_server = None
        self._push_server = None
        self._pub_task: asyncio.Task | None = None
        self._conns: set[asyncio.Task] = set()
        self.publish_endpoint = ""
        self.push_endpoint = ""

    @property
    def record(self) -> DeviceRecord:
        return DeviceRecord(self.device_id, self.publish_endpoint, self.push_endpoint, list(self.peer_ids))

    async def start(self) -> "DeviceEmulator":
        self._pub_server = await asyncio.start_server(self._on_subscriber, self.host, 0)
        self._push_server = await asyncio.start_server(self._on_push, self.host, 0)
        self.publish_endpoint = f"{self.host}:{self._pub_server.sockets[0].getsockname()[1]}"
        self.push_endpoint = f"{self.host}:{self._push_server.sockets[0].getsockname()[1]}"
        return self

    async def register(self, server_addr: str, timeout: float = 5.0) -> str:
        reply = await request(server_addr, encode_json(MsgType.REGISTER, self.record.to_dict()), timeout)
        if reply is None or reply.type != MsgType.REGISTER_ACK:
            raise RegistrationFailed("NO_REPLY")
        body = reply.json()
        if not body.get("ok"):
            raise RegistrationFailed(body.get("error", "UNKNOWN"), body.get("detail", ""))
        self.clone_id, self.server_id = body["clone_id"], body["server_id"]
        return self.clone_id

    async def deregister(self, registry, timeout: float = 5.0) -> bool:
        """Ask whichever server currently hosts our clone to retire it."""
        entry = await registry.get(self.device_id)
        if entry is None:
            return False
        reply = await request(entry.host_endpoint, encode_json(MsgType.REGISTER, {
            "op": "deregister", "device_id": self.device_id}), timeout)
        return reply is not None and bool(reply.json().get("ok"))

    async def _on_subscriber(self, reader, writer) -> None:
        task = asyncio.current_task()
        self._conns.add(task)
        try:
            frame = await read_frame(reader)
            if frame is None or frame.type != MsgType.SUBSCRIBE or not self.accept_subscribers:
                writer.write(encode_json(MsgType.SUBSCRIBE, {"ok": False}))
                await writer.drain()
                return
            writer.write(encode_json(MsgType.SUBSCRIBE, {"ok": True}))
            self.subscribers[writer] = frame.json().get("subscriber", "?")
            await reader.read()
        except (OSError, ProtocolError, asyncio.CancelledError):
            pass
        finally:
            self.subscribers.pop(writer, None)
            writer.close()
            self._conns.discard(task)

    async def _on_push(self, reader, writer) -> None:
        task = asyncio.current_task()
        self._conns.add(task)
        try:
            while True:
                frame = await read_frame(reader)
                if frame is None:
                    return
                if frame.type == MsgType.PUSH:
                    self.on_push(frame.message())
        except (OSError, ProtocolError, asyncio.CancelledError):
            pass
        finally:
            writer.close()
            self._conns.discard(task)

    def on_push(self, msg: Message) -> None:
        seen = self._seen[msg.device_id]
        if msg.seq in seen:
            self.duplicates[msg.device_id] += 1
            return
        seen.add(msg.seq)
        self.received[msg.device_id].append(msg.seq)

    def publish_one(self) -> Message:
        self.seq += 1
        msg = Message(self.device_id, self.seq, self.clock(), self.payload)
        self.published[self.seq] = msg.ts
        frame = publish_frame(msg)
        for w in list(self.subscribers):
            if not w.is_closing():
                w.write(frame)
        return msg

    async def _publish_loop(self, duration: float | None) -> None:
        end = None if duration is None else self.clock() + duration
        while end is None or self.clock() < end:
            await asyncio.sleep(self.rng.expovariate(self.rate))
            if end is not None and self.clock() >= end:
                break
            self.publish_one()

    def start_publishing(self, duration: float | None = None) -> asyncio.Task:
        self._pub_task = asyncio.get_running_loop().create_task(self._publish_loop(duration))
        return self._pub_task

    async def stop_publishing(self) -> None:
        if self._pub_task is not None:
            self._pub_task.cancel()
            try:
                await self._pub_task
            except asyncio.CancelledError:
                pass
            self._pub_task = None

    async def stop(self) -> None:
        await self.stop_publishing()
        for srv in (self._pub_server, self._push_server):
            if srv is not None:
                srv.close()
        for w in list(self.subscribers):
            w.close()
        for t in list(self._conns):
            t.cancel()
        for srv in (self._pub_server, self._push_server):
            if srv is not None:
                await srv.wait_closed()


@dataclass
class AuditReport:
    delivered: int = 0
    expected: int = 0
    duplicates: int = 0
    gaps_in_cutover: int = 0
    gaps_outside: int = 0
    missing: list[tuple[str, str, int]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.duplicates == 0 and self.gaps_outside == 0

    def to_dict(self) -> dict:
        return {"delivered": self.delivered, "expected": self.expected, "duplicates": self.duplicates,
                "gaps_in_cutover": self.gaps_in_cutover, "gaps_outside": self.gaps_outside, "ok": self.ok}


def audit_delivery(devices, cutovers: dict[str, list[tuple[float, float]]] | None = None,
                   margin: float = 0.05) -> AuditReport:
    """Check every peer pair's push stream.

    Each receiver must hold every sequence number each of its peers
    published, exactly once. A missing number is excused only if it was
    published within ``margin`` seconds of a cutover window of the sender's
    or the receiver's clone (``cutovers`` maps device id to windows).
    """
    cutovers = cutovers or {}
    by_id = {d.device_id: d for d in devices}
    rep = AuditReport()

    def in_cutover(dev: str, t: float) -> bool:
        return any(a - margin <= t <= b + margin for a, b in cutovers.get(dev, ()))

    for r in devices:
        for p in r.peer_ids:
            src = by_id.get(p)
            if src is None:
                continue
            got = set(r.received.get(p, ()))
            rep.duplicates += r.duplicates.get(p, 0)
            rep.expected += len(src.published)
            rep.delivered += len(got & src.published.keys())
            for seq, ts in src.published.items():
                if seq in got:
                    continue
                if in_cutover(p, ts) or in_cutover(r.device_id, ts):
                    rep.gaps_in_cutover += 1
                else:
                    rep.gaps_outside += 1
                    rep.missing.append((r.device_id, p, seq))
    return rep


def cutover_windows(reports, drain_s: float = 0.0) -> dict[str, list[tuple[float, float]]]:
    """Group migration windows by device id. A window runs from the start of
    the migration until the source has finished draining."""
    out: dict[str, list[tuple[float, float]]] = defaultdict(list)
    for rep in reports:
        dev = rep.clone_id.removeprefix("clone-")
        out[dev].append((rep.started, rep.finished + drain_s))
    return dict(out)

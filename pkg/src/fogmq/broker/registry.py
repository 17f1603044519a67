"""Device registry: device_id -> hosting clone.

The registry is the single source of truth for where a device's clone
lives. ``switch`` is a compare-and-set on the host, which is what keeps two
servers from both believing they own a clone after a migration race.

Backends share one async interface. :class:`MemoryRegistry` is the default;
:class:`RemoteRegistry` talks to a registry hosted inside some FogMQ server
over REGISTRY_OP / REGISTRY_REPLY / REGISTRY_EVENT frames.
"""
from __future__ import annotations

import asyncio
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

from .wire import MsgType, ProtocolError, encode_json, read_frame, request, split_addr

log = logging.getLogger(__name__)

DUPLICATE_DEVICE = "DUPLICATE_DEVICE"
NOT_FOUND = "NOT_FOUND"
CAS_FAILED = "CAS_FAILED"
UNAVAILABLE = "REGISTRY_UNAVAILABLE"


class RegistryError(Exception):
    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code
        self.detail = detail


@dataclass
class RegistryEntry:
    device_id: str
    clone_id: str
    host_server_id: str
    host_endpoint: str
    publish_endpoint: str
    push_endpoint: str
    peer_ids: list[str] = field(default_factory=list)
    epoch: int = 0
    updated_at: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RegistryEntry":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


Watcher = Callable[[str, RegistryEntry], None]


class MemoryRegistry:
    """In-process registry. Watchers are called synchronously after each
    change with ``(event, entry)``, event one of claim/switch/remove."""

    def __init__(self, clock=time.time):
        self.clock = clock
        self._entries: dict[str, RegistryEntry] = {}
        self._watchers: list[Watcher] = []
        self.history: list[dict] = []

    def _emit(self, event: str, entry: RegistryEntry) -> None:
        self.history.append({"event": event, "t": entry.updated_at, **entry.to_dict()})
        for cb in list(self._watchers):
            try:
                cb(event, entry)
            except Exception:  # a broken watcher must not break the registry
                log.exception("registry watcher failed")

    async def claim(self, entry: RegistryEntry) -> RegistryEntry:
        if entry.device_id in self._entries:
            raise RegistryError(DUPLICATE_DEVICE, entry.device_id)
        entry = replace(entry, epoch=1, updated_at=self.clock())
        self._entries[entry.device_id] = entry
        self._emit("claim", entry)
        return entry

    async def get(self, device_id: str) -> RegistryEntry | None:
        return self._entries.get(device_id)

    async def switch(self, device_id: str, expected_host: str, host_server_id: str,
                     host_endpoint: str) -> RegistryEntry:
        cur = self._entries.get(device_id)
        if cur is None:
            raise RegistryError(NOT_FOUND, device_id)
        if cur.host_server_id != expected_host:
            raise RegistryError(CAS_FAILED, f"{device_id} is at {cur.host_server_id}, not {expected_host}")
        new = replace(cur, host_server_id=host_server_id, host_endpoint=host_endpoint,
                      epoch=cur.epoch + 1, updated_at=self.clock())
        self._entries[device_id] = new
        self._emit("switch", new)
        return new

    async def remove(self, device_id: str, expected_host: str | None = None) -> bool:
        cur = self._entries.get(device_id)
        if cur is None or (expected_host is not None and cur.host_server_id != expected_host):
            return False
        del self._entries[device_id]
        self._emit("remove", replace(cur, updated_at=self.clock()))
        return True

    async def entries(self) -> list[RegistryEntry]:
        return [self._entries[k] for k in sorted(self._entries)]

    async def get_history(self) -> list[dict]:
        return list(self.history)

    def watch(self, cb: Watcher) -> Callable[[], None]:
        self._watchers.append(cb)
        return lambda: self._watchers.remove(cb) if cb in self._watchers else None

    async def close(self) -> None:
        self._watchers.clear()


# -- remote access ---------------------------------------------------------------

async def handle_registry_op(registry: MemoryRegistry, body: dict, reader, writer) -> None:
    """Serve one REGISTRY_OP on a server connection. A ``watch`` op keeps
    the connection open and streams REGISTRY_EVENT frames."""
    op = body.get("op")
    try:
        if op == "watch":
            queue: asyncio.Queue = asyncio.Queue()
            unsubscribe = registry.watch(lambda ev, e: queue.put_nowait((ev, e)))
            writer.write(encode_json(MsgType.REGISTRY_REPLY, {"ok": True}))
            try:
                closed = asyncio.ensure_future(reader.read())
                while True:
                    getter = asyncio.ensure_future(queue.get())
                    done, _ = await asyncio.wait({getter, closed}, return_when=asyncio.FIRST_COMPLETED)
                    if closed in done:
                        getter.cancel()
                        return
                    ev, e = getter.result()
                    writer.write(encode_json(MsgType.REGISTRY_EVENT, {"event": ev, "entry": e.to_dict()}))
                    await writer.drain()
            finally:
                unsubscribe()
        if op == "claim":
            e = await registry.claim(RegistryEntry.from_dict(body["entry"]))
            reply = {"ok": True, "entry": e.to_dict()}
        elif op == "get":
            e = await registry.get(body["device_id"])
            reply = {"ok": True, "entry": e.to_dict() if e else None}
        elif op == "switch":
            e = await registry.switch(body["device_id"], body["expected_host"],
                                      body["host_server_id"], body["host_endpoint"])
            reply = {"ok": True, "entry": e.to_dict()}
        elif op == "remove":
            reply = {"ok": True, "removed": await registry.remove(body["device_id"], body.get("expected_host"))}
        elif op == "entries":
            reply = {"ok": True, "entries": [e.to_dict() for e in await registry.entries()]}
        elif op == "history":
            reply = {"ok": True, "history": await registry.get_history()}
        else:
            reply = {"ok": False, "error": "BAD_OP", "detail": str(op)}
    except RegistryError as exc:
        reply = {"ok": False, "error": exc.code, "detail": exc.detail}
    writer.write(encode_json(MsgType.REGISTRY_REPLY, reply))
    await writer.drain()


class RemoteRegistry:
    """Client for a registry hosted by a FogMQ server at ``addr``."""

    def __init__(self, addr: str, timeout: float = 5.0, retry_s: float = 0.5):
        split_addr(addr)
        self.addr = addr
        self.timeout = timeout
        self.retry_s = retry_s
        self._watchers: list[Watcher] = []
        self._watch_task: asyncio.Task | None = None

    async def _call(self, body: dict) -> dict:
        try:
            frame = await request(self.addr, encode_json(MsgType.REGISTRY_OP, body), self.timeout)
        except (OSError, asyncio.TimeoutError, ProtocolError) as exc:
            raise RegistryError(UNAVAILABLE, str(exc)) from exc
        if frame is None or frame.type != MsgType.REGISTRY_REPLY:
            raise RegistryError(UNAVAILABLE, "no reply")
        reply = frame.json()
        if not reply.get("ok"):
            raise RegistryError(reply.get("error", UNAVAILABLE), reply.get("detail", ""))
        return reply

    async def claim(self, entry: RegistryEntry) -> RegistryEntry:
        return RegistryEntry.from_dict((await self._call({"op": "claim", "entry": entry.to_dict()}))["entry"])

    async def get(self, device_id: str) -> RegistryEntry | None:
        e = (await self._call({"op": "get", "device_id": device_id}))["entry"]
        return RegistryEntry.from_dict(e) if e else None

    async def switch(self, device_id: str, expected_host: str, host_server_id: str,
                     host_endpoint: str) -> RegistryEntry:
        r = await self._call({"op": "switch", "device_id": device_id, "expected_host": expected_host,
                              "host_server_id": host_server_id, "host_endpoint": host_endpoint})
        return RegistryEntry.from_dict(r["entry"])

    async def remove(self, device_id: str, expected_host: str | None = None) -> bool:
        r = await self._call({"op": "remove", "device_id": device_id, "expected_host": expected_host})
        return bool(r["removed"])

    async def entries(self) -> list[RegistryEntry]:
        return [RegistryEntry.from_dict(e) for e in (await self._call({"op": "entries"}))["entries"]]

    async def get_history(self) -> list[dict]:
        return (await self._call({"op": "history"}))["history"]

    def watch(self, cb: Watcher) -> Callable[[], None]:
        self._watchers.append(cb)
        if self._watch_task is None:
            self._watch_task = asyncio.get_running_loop().create_task(self._watch_loop())
        return lambda: self._watchers.remove(cb) if cb in self._watchers else None

    async def _watch_loop(self) -> None:
        host, port = split_addr(self.addr)
        while True:
            writer = None
            try:
                reader, writer = await asyncio.open_connection(host, port)
                writer.write(encode_json(MsgType.REGISTRY_OP, {"op": "watch"}))
                await writer.drain()
                while True:
                    frame = await read_frame(reader)
                    if frame is None:
                        break
                    if frame.type != MsgType.REGISTRY_EVENT:
                        continue
                    body = frame.json()
                    entry = RegistryEntry.from_dict(body["entry"])
                    for cb in list(self._watchers):
                        try:
                            cb(body["event"], entry)
                        except Exception:
                            log.exception("registry watcher failed")
            except asyncio.CancelledError:
                raise
            except (OSError, ProtocolError) as exc:
                log.debug("registry watch to %s lost: %s", self.addr, exc)
            finally:
                if writer is not None:
                    writer.close()
            await asyncio.sleep(self.retry_s)

    async def close(self) -> None:
        self._watchers.clear()
        if self._watch_task is not None:
            self._watch_task.cancel()
            try:
                await self._watch_task
            except (asyncio.CancelledError, Exception):
                pass
            self._watch_task = None

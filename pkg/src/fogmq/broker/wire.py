"""Length-prefixed binary frames.

Header is ``version:u8 type:u8 length:u32`` (big-endian) followed by
``length`` body bytes. PUBLISH and PUSH bodies are packed binary; every other
frame type carries a UTF-8 JSON object.
"""
from __future__ import annotations

import asyncio
import enum
import json
import struct
from dataclasses import dataclass

VERSION = 1
HEADER = struct.Struct("!BBI")
MAX_BODY = 16 * 1024 * 1024
_PUB = struct.Struct("!H")
_SEQ = struct.Struct("!Qd")


class MsgType(enum.IntEnum):
    REGISTER = 1
    REGISTER_ACK = 2
    PUBLISH = 3
    SUBSCRIBE = 4
    PUSH = 5
    GOSSIP = 6
    PROBE = 7
    PROBE_ACK = 8
    MIGRATE_BEGIN = 9
    STATE = 10
    MIGRATE_COMMIT = 11
    MIGRATE_ABORT = 12
    # registry service, not part of the data plane
    REGISTRY_OP = 13
    REGISTRY_REPLY = 14
    REGISTRY_EVENT = 15


BINARY_TYPES = {MsgType.PUBLISH, MsgType.PUSH}


class ProtocolError(Exception):
    pass


@dataclass(frozen=True)
class Message:
    """A device publication as carried by PUBLISH/PUSH frames."""
    device_id: str
    seq: int
    ts: float
    payload: bytes = b""


@dataclass(frozen=True)
class Frame:
    type: MsgType
    body: bytes

    def json(self) -> dict:
        return json.loads(self.body.decode("utf-8")) if self.body else {}

    def message(self) -> Message:
        return decode_message(self.body)


def encode_frame(mtype: MsgType, body: bytes = b"") -> bytes:
    if len(body) > MAX_BODY:
        raise ProtocolError(f"frame body too large: {len(body)}")
    return HEADER.pack(VERSION, int(mtype), len(body)) + body


def encode_json(mtype: MsgType, obj: dict) -> bytes:
    return encode_frame(mtype, json.dumps(obj, separators=(",", ":")).encode("utf-8"))


def encode_message(msg: Message) -> bytes:
    dev = msg.device_id.encode("utf-8")
    return _PUB.pack(len(dev)) + dev + _SEQ.pack(msg.seq, msg.ts) + msg.payload


def decode_message(body: bytes) -> Message:
    try:
        (k,) = _PUB.unpack_from(body, 0)
        dev = body[2:2 + k].decode("utf-8")
        seq, ts = _SEQ.unpack_from(body, 2 + k)
    except (struct.error, UnicodeDecodeError) as exc:
        raise ProtocolError(f"bad message body: {exc}") from exc
    return Message(dev, seq, ts, bytes(body[2 + k + _SEQ.size:]))


def publish_frame(msg: Message, mtype: MsgType = MsgType.PUBLISH) -> bytes:
    return encode_frame(mtype, encode_message(msg))


def _parse_header(hdr: bytes) -> tuple[MsgType, int]:
    version, mtype, length = HEADER.unpack(hdr)
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    try:
        mtype = MsgType(mtype)
    except ValueError:
        raise ProtocolError(f"unknown frame type {mtype}") from None
    if length > MAX_BODY:
        raise ProtocolError(f"frame body too large: {length}")
    return mtype, length


async def read_frame(reader: asyncio.StreamReader) -> Frame | None:
    """Next frame, or None on a clean EOF between frames."""
    try:
        hdr = await reader.readexactly(HEADER.size)
    except asyncio.IncompleteReadError as exc:
        if exc.partial:
            raise ProtocolError("truncated header") from exc
        return None
    mtype, length = _parse_header(hdr)
    try:
        body = await reader.readexactly(length)
    except asyncio.IncompleteReadError as exc:
        raise ProtocolError("truncated body") from exc
    return Frame(mtype, body)


class FrameDecoder:
    """Incremental decoder for byte streams arriving in arbitrary chunks."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Frame]:
        self._buf += data
        out = []
        while len(self._buf) >= HEADER.size:
            mtype, length = _parse_header(bytes(self._buf[:HEADER.size]))
            end = HEADER.size + length
            if len(self._buf) < end:
                break
            out.append(Frame(mtype, bytes(self._buf[HEADER.size:end])))
            del self._buf[:end]
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)


def split_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bad address {addr!r}, expected host:port")
    return host, int(port)


async def request(addr: str, frame: bytes, timeout: float = 5.0) -> Frame | None:
    """One-shot exchange: connect, send one frame, read one reply."""
    host, port = split_addr(addr)
    reader, writer = await asyncio.wait_for(asyncio.open_connection(host, port), timeout)
    try:
        writer.write(frame)
        await writer.drain()
        return await asyncio.wait_for(read_frame(reader), timeout)
    finally:
        writer.close()
        try:
            await writer.wait_closed()
        except (ConnectionError, OSError):
            pass

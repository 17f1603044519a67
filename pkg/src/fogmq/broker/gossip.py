"""Membership view exchanged between servers.

Each server owns its own entry and stamps it with ``last_seen`` whenever it
refreshes it; everyone else only copies entries around, keeping the freshest
copy. Entries not refreshed within ``expiry`` seconds are dropped.

Latency is measured by both ends of a link. ``tau(a, b)`` averages the two
one-sided estimates once both have been gossiped, so a and b agree on the
value they feed into migration decisions.
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field


@dataclass
class ViewEntry:
    server_id: str
    endpoint: str
    weight: float = 0.0
    capacity: float = math.inf
    load: float = 0.0
    tau: dict[str, float] = field(default_factory=dict)
    last_seen: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(d["capacity"]):
            d["capacity"] = None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ViewEntry":
        cap = d.get("capacity")
        return cls(server_id=d["server_id"], endpoint=d["endpoint"], weight=float(d.get("weight", 0.0)),
                   capacity=math.inf if cap is None else float(cap), load=float(d.get("load", 0.0)),
                   tau={k: float(v) for k, v in d.get("tau", {}).items()},
                   last_seen=float(d.get("last_seen", 0.0)))


class GossipView:
    def __init__(self, me: ViewEntry, expiry: float = 60.0, clock=time.time, ewma: float = 0.3):
        self.self_id = me.server_id
        self.expiry = expiry
        self.clock = clock
        self.ewma = ewma
        me.tau[self.self_id] = 0.0
        me.last_seen = clock()
        self._entries: dict[str, ViewEntry] = {me.server_id: me}
        self.unreachable: set[str] = set()

    @property
    def me(self) -> ViewEntry:
        return self._entries[self.self_id]

    def __contains__(self, server_id: str) -> bool:
        return server_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, server_id: str) -> ViewEntry | None:
        return self._entries.get(server_id)

    def ids(self) -> list[str]:
        return sorted(self._entries)

    def others(self, reachable_only: bool = True) -> list[str]:
        return [s for s in sorted(self._entries)
                if s != self.self_id and not (reachable_only and s in self.unreachable)]

    def update_self(self, **fields) -> ViewEntry:
        me = self.me
        for k, v in fields.items():
            setattr(me, k, v)
        me.tau[self.self_id] = 0.0
        me.last_seen = self.clock()
        return me

    def record_tau(self, other: str, ms: float) -> float:
        """Fold one probe estimate into the EWMA for self -> other."""
        prev = self.me.tau.get(other)
        val = ms if prev is None else (1 - self.ewma) * prev + self.ewma * ms
        self.me.tau[other] = val
        self.unreachable.discard(other)
        return val

    def mark_unreachable(self, other: str) -> None:
        if other != self.self_id:
            self.unreachable.add(other)
            self.me.tau.pop(other, None)

    def tau(self, a: str, b: str) -> float | None:
        if a == b:
            return 0.0
        ea, eb = self._entries.get(a), self._entries.get(b)
        vals = []
        if ea is not None and b in ea.tau:
            vals.append(ea.tau[b])
        if eb is not None and a in eb.tau:
            vals.append(eb.tau[a])
        if not vals:
            return None
        return sum(vals) / len(vals)

    def merge(self, entries) -> list[str]:
        """Adopt any entry fresher than ours; returns newly learned ids."""
        learned = []
        for e in entries:
            if isinstance(e, dict):
                e = ViewEntry.from_dict(e)
            if e.server_id == self.self_id:
                continue
            cur = self._entries.get(e.server_id)
            if cur is None:
                learned.append(e.server_id)
            if cur is None or e.last_seen > cur.last_seen:
                self._entries[e.server_id] = e
        self.evict()
        return learned

    def evict(self, now: float | None = None) -> list[str]:
        now = self.clock() if now is None else now
        gone = [s for s, e in self._entries.items()
                if s != self.self_id and now - e.last_seen > self.expiry]
        for s in gone:
            del self._entries[s]
            self.unreachable.discard(s)
            self.me.tau.pop(s, None)
        return gone

    def to_wire(self) -> list[dict]:
        return [self._entries[s].to_dict() for s in sorted(self._entries)]

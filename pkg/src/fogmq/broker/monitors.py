"""Per-clone demand and latency monitors.

Demand is a sliding-window message rate per peer, symmetrized as
(rate i->j + rate j->i) / 2. Tail latency comes from a log-bucket quantile
sketch with a bounded relative error, so p99 survives serialization during
migration without keeping raw samples.
"""
from __future__ import annotations

import math
import threading
import time
from collections import deque
from typing import Callable

Clock = Callable[[], float]


class RateWindow:
    """Event rate over the trailing ``window`` seconds in ``bucket``-second
    bins. Before a full window has elapsed the rate is taken over the time
    observed so far (at least one bucket)."""

    def __init__(self, window: float = 60.0, bucket: float = 1.0, clock: Clock = time.time,
                 start: float | None = None):
        if window <= 0 or bucket <= 0 or bucket > window:
            raise ValueError("need 0 < bucket <= window")
        self.window = window
        self.bucket = bucket
        self.clock = clock
        self.start = clock() if start is None else start
        self._bins: deque[list] = deque()  # [bin index, count]

    def _expire(self, now: float) -> None:
        oldest = math.floor(now / self.bucket) - int(round(self.window / self.bucket)) + 1
        while self._bins and self._bins[0][0] < oldest:
            self._bins.popleft()

    def add(self, n: int = 1, t: float | None = None) -> None:
        t = self.clock() if t is None else t
        k = math.floor(t / self.bucket)
        if self._bins and self._bins[-1][0] == k:
            self._bins[-1][1] += n
        elif not self._bins or self._bins[-1][0] < k:
            self._bins.append([k, n])
        else:
            # late sample: find its bin (rare; samples arrive in time order)
            for b in reversed(self._bins):
                if b[0] == k:
                    b[1] += n
                    break
            else:
                return
        self._expire(t)

    def count(self, now: float | None = None) -> int:
        now = self.clock() if now is None else now
        self._expire(now)
        return sum(c for _, c in self._bins)

    def rate(self, now: float | None = None) -> float:
        now = self.clock() if now is None else now
        span = min(self.window, max(now - self.start, self.bucket))
        return self.count(now) / span

    def to_dict(self) -> dict:
        return {"window": self.window, "bucket": self.bucket, "start": self.start,
                "bins": [list(b) for b in self._bins]}

    @classmethod
    def from_dict(cls, d: dict, clock: Clock = time.time) -> "RateWindow":
        w = cls(d["window"], d["bucket"], clock, d["start"])
        w._bins = deque([list(b) for b in d["bins"]])
        return w


class DemandMonitor:
    """Tracks a clone's own publication rate and per-peer inbound rates."""

    def __init__(self, window: float = 60.0, bucket: float = 1.0, clock: Clock = time.time):
        self.window, self.bucket, self.clock = window, bucket, clock
        self.outbound = RateWindow(window, bucket, clock)
        self.inbound: dict[str, RateWindow] = {}

    def record_out(self, t: float | None = None) -> None:
        self.outbound.add(1, t)

    def record_in(self, peer: str, t: float | None = None) -> None:
        w = self.inbound.get(peer)
        if w is None:
            w = self.inbound[peer] = RateWindow(self.window, self.bucket, self.clock)
        w.add(1, t)

    def track(self, peer: str) -> None:
        if peer not in self.inbound:
            self.inbound[peer] = RateWindow(self.window, self.bucket, self.clock)

    def estimate(self, peer: str, now: float | None = None) -> float:
        now = self.clock() if now is None else now
        w = self.inbound.get(peer)
        inbound = w.rate(now) if w is not None else 0.0
        return (self.outbound.rate(now) + inbound) / 2.0

    def estimates(self, now: float | None = None) -> dict[str, float]:
        now = self.clock() if now is None else now
        return {p: self.estimate(p, now) for p in sorted(self.inbound)}

    def to_dict(self) -> dict:
        return {"window": self.window, "bucket": self.bucket, "outbound": self.outbound.to_dict(),
                "inbound": {p: w.to_dict() for p, w in self.inbound.items()}}

    @classmethod
    def from_dict(cls, d: dict, clock: Clock = time.time) -> "DemandMonitor":
        m = cls(d["window"], d["bucket"], clock)
        m.outbound = RateWindow.from_dict(d["outbound"], clock)
        m.inbound = {p: RateWindow.from_dict(w, clock) for p, w in d["inbound"].items()}
        return m


class QuantileSketch:
    """Log-bucketed histogram; any quantile is returned within relative
    error ``rel_acc`` of some sample at that rank."""

    def __init__(self, rel_acc: float = 0.01, min_value: float = 1e-9):
        if not 0 < rel_acc < 1:
            raise ValueError("rel_acc must lie in (0, 1)")
        self.rel_acc = rel_acc
        self.min_value = min_value
        self._gamma = (1 + rel_acc) / (1 - rel_acc)
        self._log_gamma = math.log(self._gamma)
        self.bins: dict[int, int] = {}
        self.zeros = 0
        self.count = 0

    def _key(self, x: float) -> int:
        return math.ceil(math.log(x) / self._log_gamma)

    def _value(self, k: int) -> float:
        return 2 * self._gamma ** k / (self._gamma + 1)

    def add(self, x: float, n: int = 1) -> None:
        if x < 0 or math.isnan(x):
            raise ValueError("samples must be non-negative")
        if x <= self.min_value:
            self.zeros += n
        else:
            k = self._key(x)
            self.bins[k] = self.bins.get(k, 0) + n
        self.count += n

    def quantile(self, q: float) -> float:
        if not 0 <= q <= 1:
            raise ValueError("q must lie in [0, 1]")
        if self.count == 0:
            return math.nan
        rank = q * (self.count - 1)
        seen = self.zeros
        if seen > rank:
            return 0.0
        for k in sorted(self.bins):
            seen += self.bins[k]
            if seen > rank:
                return self._value(k)
        return self._value(max(self.bins))

    def merge(self, other: "QuantileSketch") -> None:
        if other.rel_acc != self.rel_acc:
            raise ValueError("cannot merge sketches with different accuracy")
        for k, c in other.bins.items():
            self.bins[k] = self.bins.get(k, 0) + c
        self.zeros += other.zeros
        self.count += other.count

    def to_dict(self) -> dict:
        return {"rel_acc": self.rel_acc, "min_value": self.min_value, "zeros": self.zeros,
                "bins": [[k, c] for k, c in sorted(self.bins.items())]}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantileSketch":
        s = cls(d["rel_acc"], d["min_value"])
        s.bins = {int(k): int(c) for k, c in d["bins"]}
        s.zeros = int(d["zeros"])
        s.count = s.zeros + sum(s.bins.values())
        return s


class LatencyMonitor:
    """Thread-safe p99 tracker; appends go to a side buffer that is merged
    into the sketch on read."""

    def __init__(self, rel_acc: float = 0.01):
        self._sketch = QuantileSketch(rel_acc)
        self._pending: list[float] = []
        self._lock = threading.Lock()

    def add(self, ms: float) -> None:
        with self._lock:
            self._pending.append(max(ms, 0.0))
            if len(self._pending) >= 4096:
                self._flush()

    def _flush(self) -> None:
        for v in self._pending:
            self._sketch.add(v)
        self._pending.clear()

    def sketch(self) -> QuantileSketch:
        with self._lock:
            self._flush()
            return self._sketch

    def quantile(self, q: float) -> float:
        return self.sketch().quantile(q)

    def p99(self) -> float:
        return self.quantile(0.99)

    @property
    def count(self) -> int:
        return self.sketch().count

    def to_dict(self) -> dict:
        return self.sketch().to_dict()

    @classmethod
    def from_dict(cls, d: dict) -> "LatencyMonitor":
        m = cls(d["rel_acc"])
        m._sketch = QuantileSketch.from_dict(d)
        return m

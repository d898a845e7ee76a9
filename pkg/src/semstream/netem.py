"""Deterministic trace-driven network emulation.

Traces use the mahimahi text convention: one integer millisecond timestamp
per line, each granting delivery of one MTU (1500 bytes); the trace repeats
cyclically with period equal to its last timestamp. Queued packets share an
opportunity's byte budget, so several small packets may ride one opportunity
and a large packet spans several; unused budget is wasted when the queue
empties.

Everything runs on a virtual clock inside a single-threaded discrete-event
loop; identical (trace, loss rate, seed, input schedule) yields an identical
event log.
"""

from __future__ import annotations

import csv
import heapq
import random
from dataclasses import dataclass

MTU_BYTES = 1500
DEFAULT_QUEUE_BYTES = 60_000
MAX_PACKET_BYTES = 64 * 1024


class TraceError(ValueError):
    """Malformed trace file."""


@dataclass(frozen=True)
class LinkTrace:
    """Sorted millisecond delivery opportunities, repeated cyclically."""

    opportunities: tuple

    def __post_init__(self):
        opps = tuple(int(t) for t in self.opportunities)
        if not opps:
            raise TraceError("trace must contain at least one opportunity")
        if any(b < a for a, b in zip(opps, opps[1:])):
            raise TraceError("trace timestamps must be non-decreasing")
        if opps[0] < 0:
            raise TraceError("trace timestamps must be non-negative")
        if opps[-1] <= 0:
            raise TraceError("trace period (last timestamp) must be positive")
        object.__setattr__(self, "opportunities", opps)

    @property
    def period_ms(self) -> int:
        return self.opportunities[-1]

    def time_of(self, index: int) -> float:
        """Absolute time of the index-th opportunity (cyclic extension)."""
        n = len(self.opportunities)
        return (index // n) * self.period_ms + self.opportunities[index % n]

    def first_index_at_or_after(self, t: float) -> int:
        n = len(self.opportunities)
        cycle = max(0, int(t // self.period_ms) - 1)
        idx = cycle * n
        while self.time_of(idx) < t:
            idx += 1
        return idx

    def capacity_bits(self, t0: float, t1: float, mtu: int = MTU_BYTES) -> float:
        """Trace capacity in bits over [t0, t1)."""
        if t1 <= t0:
            return 0.0
        i = self.first_index_at_or_after(t0)
        bits = 0.0
        while self.time_of(i) < t1:
            bits += mtu * 8
            i += 1
        return bits

    def mean_rate_bps(self) -> float:
        return len(self.opportunities) * MTU_BYTES * 8 * 1000.0 / self.period_ms


def load_trace(path: str) -> LinkTrace:
    """Parse a mahimahi trace file (one integer millisecond per line)."""
    times = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                times.append(int(line))
            except ValueError:
                raise TraceError(f"{path}:{lineno}: not an integer timestamp: {line!r}")
    if not times:
        raise TraceError(f"{path}: empty trace")
    return LinkTrace(tuple(times))


def save_trace(path: str, trace: LinkTrace) -> None:
    with open(path, "w") as fh:
        for t in trace.opportunities:
            fh.write(f"{t}\n")


def constant_trace(rate_bps: float, mtu: int = MTU_BYTES) -> LinkTrace:
    """Evenly spaced opportunities approximating a constant rate."""
    if rate_bps <= 0:
        raise ValueError("rate must be positive")
    spacing = max(1, round(mtu * 8 * 1000.0 / rate_bps))
    n = max(1, round(1000.0 / spacing))
    return LinkTrace(tuple(spacing * (i + 1) for i in range(n)))


def square_wave_trace(low_bps: float, high_bps: float, phase_ms: int,
                      mtu: int = MTU_BYTES) -> LinkTrace:
    """One full low/high square period (the trace then repeats)."""
    lo_spacing = max(1, round(mtu * 8 * 1000.0 / low_bps))
    hi_spacing = max(1, round(mtu * 8 * 1000.0 / high_bps))
    times = list(range(lo_spacing, phase_ms + 1, lo_spacing))
    t = phase_ms
    while t + hi_spacing <= 2 * phase_ms:
        t += hi_spacing
        times.append(t)
    if times[-1] != 2 * phase_ms:
        times.append(2 * phase_ms)
    return LinkTrace(tuple(times))


# ---------------------------------------------------------------------------
# Link model

@dataclass(frozen=True)
class Delivered:
    delivery_time: float
    # (time, bytes) pairs: when each slice of the packet finishes draining
    # through the bottleneck (propagation delay included). This is what a
    # receiver-side byte counter sees and what delivery-rate estimation is
    # fed with; the packet itself is only parseable at delivery_time.
    wire_events: tuple = ()


@dataclass(frozen=True)
class Dropped:
    reason: str  # "loss" or "queue"


class EmulatedLink:
    """One-directional link: trace-paced delivery, seeded Bernoulli loss,
    fixed propagation delay, bounded FIFO byte queue (tail drop)."""

    def __init__(self, trace: LinkTrace, loss_rate: float = 0.0, seed: int = 0,
                 prop_delay_ms: float = 20.0, queue_bytes: int = DEFAULT_QUEUE_BYTES,
                 mtu: int = MTU_BYTES):
        if not 0.0 <= loss_rate <= 0.30:
            raise ValueError(f"loss rate must be in [0, 0.30], got {loss_rate}")
        self.trace = trace
        self.loss_rate = loss_rate
        self.prop_delay_ms = prop_delay_ms
        self.queue_bytes = queue_bytes
        self.mtu = mtu
        self._rng = random.Random(seed)
        self._opp_index = 0
        self._opp_budget = 0          # unused bytes left in opportunity _opp_index - 1
        self._inflight: list = []     # (drain_completion_time, nbytes), FIFO

    def queued_bytes(self, now: float) -> int:
        self._inflight = [(t, b) for (t, b) in self._inflight if t > now]
        return sum(b for _, b in self._inflight)

    def transmit(self, nbytes: int, now: float):
        """Schedule one packet. Returns Delivered(time) or Dropped(reason);
        drops are outcomes, not errors."""
        if nbytes <= 0:
            raise ValueError("packet must contain at least one byte")
        if nbytes > MAX_PACKET_BYTES:
            raise ValueError(f"packet of {nbytes} bytes exceeds the 64 KiB limit")
        if self._rng.random() < self.loss_rate:
            return Dropped("loss")
        if self.queued_bytes(now) + nbytes > self.queue_bytes:
            return Dropped("queue")

        # If the partially used opportunity is in the past and the queue has
        # drained, its leftover budget is gone.
        if self._opp_budget > 0 and self.trace.time_of(self._opp_index - 1) < now:
            self._opp_budget = 0
        remaining = nbytes
        completion = now
        wire = []
        while remaining > 0:
            if self._opp_budget == 0:
                if self.trace.time_of(self._opp_index) < now:
                    self._opp_index = self.trace.first_index_at_or_after(now)
                completion = self.trace.time_of(self._opp_index)
                self._opp_budget = self.mtu
                self._opp_index += 1
            else:
                completion = self.trace.time_of(self._opp_index - 1)
            take = min(remaining, self._opp_budget)
            remaining -= take
            self._opp_budget -= take
            wire.append((completion + self.prop_delay_ms, take))
        self._inflight.append((completion, nbytes))
        return Delivered(completion + self.prop_delay_ms, tuple(wire))


# ---------------------------------------------------------------------------
# Event loop and log

class EventLog:
    """Append-only log of (time_ms, event, gop_id, kind, row, bytes) rows."""

    COLUMNS = ("time_ms", "event", "gop_id", "kind", "row", "bytes")

    def __init__(self):
        self.rows: list = []

    def add(self, time_ms: float, event: str, gop_id: int = -1, kind: str = "",
            row: int = -1, nbytes: int = 0) -> None:
        self.rows.append((time_ms, event, gop_id, kind, row, nbytes))

    def count(self, event: str) -> int:
        return sum(1 for r in self.rows if r[1] == event)

    def select(self, event: str) -> list:
        return [r for r in self.rows if r[1] == event]

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.COLUMNS)
            for t, event, gop_id, kind, row, nbytes in self.rows:
                writer.writerow([f"{t:.3f}", event, gop_id, kind, row, nbytes])


class EventLoop:
    """Deterministic single-threaded scheduler over a virtual ms clock."""

    def __init__(self):
        self._heap: list = []
        self._seq = 0
        self.now = 0.0

    def call_at(self, t: float, fn, *args) -> None:
        if t < self.now:
            raise ValueError(f"cannot schedule at {t} before now={self.now}")
        heapq.heappush(self._heap, (t, self._seq, fn, args))
        self._seq += 1

    def run_until(self, t_end: float) -> None:
        while self._heap and self._heap[0][0] <= t_end:
            t, _, fn, args = heapq.heappop(self._heap)
            self.now = t
            fn(*args)
        self.now = t_end


class NodeApi:
    """Per-endpoint handle: virtual clock, timers, and a lossy send path."""

    def __init__(self, loop: EventLoop, link: EmulatedLink, log: EventLog, peer_name: str):
        self._loop = loop
        self._link = link
        self._log = log
        self._peer = None
        self._peer_name = peer_name

    @property
    def now(self) -> float:
        return self._loop.now

    def call_at(self, t: float, fn, *args) -> None:
        self._loop.call_at(t, fn, *args)

    def log(self, event: str, gop_id: int = -1, kind: str = "", row: int = -1,
            nbytes: int = 0) -> None:
        self._log.add(self.now, event, gop_id, kind, row, nbytes)

    def send(self, data: bytes, gop_id: int = -1, kind: str = "", row: int = -1) -> None:
        """Transmit one packet toward the peer, logging the outcome."""
        now = self.now
        self._log.add(now, "send", gop_id, kind, row, len(data))
        outcome = self._link.transmit(len(data), now)
        if isinstance(outcome, Dropped):
            self._log.add(now, f"{outcome.reason}_drop", gop_id, kind, row, len(data))
            return
        # Wire byte arrivals feed rate estimation; they are scheduled before
        # the completion event so the estimate is fresh when the packet lands.
        for t, nbytes in outcome.wire_events:
            self._loop.call_at(t, self._peer.on_wire, nbytes, t)
        self._loop.call_at(outcome.delivery_time, self._deliver, data, gop_id, kind, row)

    def _deliver(self, data: bytes, gop_id: int, kind: str, row: int) -> None:
        self._log.add(self.now, "deliver", gop_id, kind, row, len(data))
        self._peer.on_packet(data, self.now)


def run_session(sender, receiver, link_fwd: EmulatedLink, link_rev: EmulatedLink,
                duration_ms: float, log: EventLog | None = None) -> EventLog:
    """Drive a sender/receiver pair over forward and reverse links.

    Both endpoints expose start(api) and on_packet(data, now) and do all
    their work through timers on the injected clock, which keeps the event
    log fully deterministic and replayable.
    """
    log = log if log is not None else EventLog()
    loop = EventLoop()
    sender_api = NodeApi(loop, link_fwd, log, "receiver")
    receiver_api = NodeApi(loop, link_rev, log, "sender")
    sender_api._peer = receiver
    receiver_api._peer = sender
    sender.start(sender_api)
    receiver.start(receiver_api)
    loop.run_until(duration_ms)
    return log

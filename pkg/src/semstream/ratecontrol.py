"""Anchor-based scalable bitrate control with hysteresis and the
receiver-driven windowed-max bandwidth estimator.

The controller picks one of three operating modes from the estimated
available bandwidth against two anchors (the full token-stream rates at 3x
and 2x downsampling):

    b < r_3x            ExtremeLow   scale 3, similarity-based token dropping
    r_3x <= b < r_2x    Low          scale 3, leftover bandwidth -> residuals
    b >= r_2x           Sufficient   scale 2, leftover bandwidth -> residuals

Mode transitions use asymmetric hysteresis (slow up, fast down) to avoid
oscillating on bandwidth jitter.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass

from .codec import CodecConfig, token_grid_shape
from .selection import drop_rate_for_bandwidth
from .transport import token_packet_wire_size
from .video import GOP_SIZE


class Mode(enum.IntEnum):
    EXTREME_LOW = 0
    LOW = 1
    SUFFICIENT = 2

    def __str__(self):
        return {0: "ExtremeLow", 1: "Low", 2: "Sufficient"}[int(self)]


@dataclass(frozen=True)
class RateAnchors:
    """Full token-stream bitrates at the two downsampling scales."""

    r_3x: float
    r_2x: float

    def __post_init__(self):
        if not 0.0 < self.r_3x < self.r_2x:
            raise ValueError(
                f"anchors must satisfy 0 < r_3x < r_2x, got {self.r_3x}, {self.r_2x}")


@dataclass(frozen=True)
class RateDecision:
    mode: Mode
    scale: int
    drop_rate: float
    residual_budget: float  # bits/s, 0 in ExtremeLow
    b_avail: float = 0.0

    def __post_init__(self):
        if self.mode == Mode.EXTREME_LOW and (self.scale != 3 or self.residual_budget != 0.0):
            raise ValueError("ExtremeLow implies scale 3 and no residual budget")
        if self.mode == Mode.LOW and (self.scale != 3 or self.drop_rate != 0.0):
            raise ValueError("Low implies scale 3 and no token dropping")
        if self.mode == Mode.SUFFICIENT and (self.scale != 2 or self.drop_rate != 0.0):
            raise ValueError("Sufficient implies scale 2 and no token dropping")


def gop_token_stream_bytes(width: int, height: int, scale: int, cfg: CodecConfig) -> int:
    """Serialized size of one GoP's I+P token packets at full masks."""
    work_h = -(-height // scale)
    work_w = -(-width // scale)
    h_tok, w_tok = token_grid_shape(work_h, work_w)
    return 2 * h_tok * token_packet_wire_size(w_tok, cfg.channels)


def compute_anchors(width: int, height: int, fps: float,
                    cfg: CodecConfig | None = None) -> RateAnchors:
    """Anchor rates from the actual wire sizes of a full-mask GoP."""
    if width <= 0 or height <= 0 or fps <= 0:
        raise ValueError("dimensions and fps must be positive")
    cfg = cfg or CodecConfig()
    r3 = gop_token_stream_bytes(width, height, 3, cfg) * 8.0 * fps / GOP_SIZE
    r2 = gop_token_stream_bytes(width, height, 2, cfg) * 8.0 * fps / GOP_SIZE
    return RateAnchors(r_3x=r3, r_2x=r2)


def raw_mode(b_avail: float, anchors: RateAnchors) -> Mode:
    """The three control branches, with no hysteresis."""
    if b_avail < anchors.r_3x:
        return Mode.EXTREME_LOW
    if b_avail < anchors.r_2x:
        return Mode.LOW
    return Mode.SUFFICIENT


@dataclass
class HysteresisConfig:
    delta_up: float = 0.10
    delta_down: float = 0.05
    k_up: int = 3
    enabled: bool = True


class RateController:
    """Single-writer mode state machine fed by bandwidth reports."""

    def __init__(self, anchors: RateAnchors, hysteresis: HysteresisConfig | None = None,
                 initial_mode: Mode = Mode.LOW):
        self.anchors = anchors
        self.hysteresis = hysteresis or HysteresisConfig()
        self.mode = initial_mode
        self._up_streak = 0
        self.last_decision = self._decision(initial_mode, anchors.r_3x)

    def _boundary(self, lower: Mode) -> float:
        """Anchor separating `lower` from the mode above it."""
        return self.anchors.r_3x if lower == Mode.EXTREME_LOW else self.anchors.r_2x

    def _decision(self, mode: Mode, b: float) -> RateDecision:
        if mode == Mode.EXTREME_LOW:
            return RateDecision(mode, scale=3,
                               drop_rate=drop_rate_for_bandwidth(b, self.anchors.r_3x),
                               residual_budget=0.0, b_avail=b)
        if mode == Mode.LOW:
            return RateDecision(mode, scale=3, drop_rate=0.0,
                               residual_budget=max(b - self.anchors.r_3x, 0.0), b_avail=b)
        return RateDecision(mode, scale=2, drop_rate=0.0,
                            residual_budget=max(b - self.anchors.r_2x, 0.0), b_avail=b)

    def update(self, b_avail: float) -> RateDecision:
        target = raw_mode(b_avail, self.anchors)
        if not self.hysteresis.enabled:
            self.mode = target
            self.last_decision = self._decision(target, b_avail)
            return self.last_decision

        h = self.hysteresis
        if target > self.mode:
            # Slow up: one level per streak of k qualifying reports.
            if b_avail > self._boundary(self.mode) * (1.0 + h.delta_up):
                self._up_streak += 1
                if self._up_streak >= h.k_up:
                    self.mode = Mode(self.mode + 1)
                    self._up_streak = 0
            else:
                self._up_streak = 0
        elif target < self.mode:
            # Fail fast down, possibly through several levels.
            self._up_streak = 0
            while (self.mode > target
                   and b_avail < self._boundary(Mode(self.mode - 1)) * (1.0 - h.delta_down)):
                self.mode = Mode(self.mode - 1)
        else:
            self._up_streak = 0
        self.last_decision = self._decision(self.mode, b_avail)
        return self.last_decision


# ---------------------------------------------------------------------------
# Bandwidth estimation

REPORT_INTERVAL_MS = 100.0
ESTIMATOR_WINDOW = 10


class BandwidthEstimator:
    """Windowed-max delivery-rate estimator, reported every 100 ms.

    Delivery-rate samples are pushed per delivery event (same-millisecond
    deliveries coalesce into one sample, so a burst draining at the
    bottleneck rate is measured at that rate); idle report ticks push zero
    samples. The estimate is the max over the last 10 samples, which is >=
    the mean delivery rate and <= the peak over the window.
    """

    def __init__(self, window: int = ESTIMATOR_WINDOW,
                 report_interval_ms: float = REPORT_INTERVAL_MS):
        self.samples: deque = deque(maxlen=window)
        self.report_interval_ms = report_interval_ms
        self.last_report: float | None = None
        self._last_sample_time: float | None = None    # newest ring sample
        self._last_delivery_time: float | None = None  # delivery interval clock
        self._fold_bytes = 0
        self._fold_interval = 0.0

    def update(self, delivered_bytes: int, interval_ms: float, now: float) -> None:
        """Push one delivery-rate sample over a positive interval."""
        if interval_ms <= 0:
            raise ValueError(f"interval must be positive, got {interval_ms}")
        rate = delivered_bytes * 8.0 * 1000.0 / interval_ms
        self.samples.append((now, rate))
        self._last_sample_time = now
        self._fold_bytes = delivered_bytes
        self._fold_interval = interval_ms

    def on_delivered(self, nbytes: int, now: float) -> None:
        """Fold wire byte arrivals into delivery-rate samples.

        Intervals are measured between delivery instants only (idle-tick zero
        samples never shorten them); same-instant arrivals merge into one
        sample so a burst draining at the bottleneck rate is measured at that
        rate.
        """
        if self._last_delivery_time is None:
            # First delivery has no baseline interval; it only seeds the clock.
            self._last_delivery_time = now
            return
        if now == self._last_delivery_time:
            if self._fold_interval > 0 and self.samples and self._last_sample_time == now:
                self._fold_bytes += nbytes
                t, _ = self.samples[-1]
                self.samples[-1] = (t, self._fold_bytes * 8000.0 / self._fold_interval)
            return
        interval = now - self._last_delivery_time
        self._last_delivery_time = now
        self.update(nbytes, interval, now)

    def on_tick(self, now: float) -> None:
        """Record a zero sample if nothing was delivered since the last one."""
        if self._last_sample_time is None or now <= self._last_sample_time:
            return
        if now - self._last_sample_time >= self.report_interval_ms:
            self.update(0, now - self._last_sample_time, now)

    def estimate(self) -> float:
        if not self.samples:
            return 0.0
        return max(rate for _, rate in self.samples)

    def maybe_report(self, now: float) -> float | None:
        """The estimate, when >= 100 ms elapsed since the last report."""
        if self.last_report is not None and now - self.last_report < self.report_interval_ms:
            return None
        self.last_report = now
        return self.estimate()

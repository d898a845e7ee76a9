"""Metrics CSV emission, bitrate-tracking statistics, and report figures.

Figures are rendered with the Agg backend straight to files next to the CSV
output; they are presentation artifacts, so only the CSVs and event logs are
held to byte-determinism.
"""

from __future__ import annotations

import csv
import os

import numpy as np

from .netem import EventLog, LinkTrace
from .session import SessionResult

METRICS_COLUMNS = ("time", "mode", "scale", "drop_rate", "sent_bps", "estimated_bps",
                   "rows_lost", "nacks", "psnr_db", "boundary_flicker",
                   "frame_delay_ms", "rendered_fps")

FORWARD_KINDS = ("I", "P", "R")


def metrics_rows(result: SessionResult) -> list:
    rows = []
    for r in result.records:
        rows.append([f"{r.time_ms:.3f}", r.mode, r.scale, f"{r.drop_rate:.4f}",
                     f"{r.sent_bps:.1f}", f"{r.estimated_bps:.1f}", r.rows_lost,
                     r.nacks, f"{r.psnr_db:.3f}", f"{r.boundary_flicker:.6f}",
                     f"{r.frame_delay_ms:.3f}", f"{r.rendered_fps:.3f}"])
    return rows


def write_metrics_csv(result: SessionResult, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        writer.writerows(metrics_rows(result))


# ---------------------------------------------------------------------------
# Windowed emission statistics (bitrate tracking discipline)

def emitted_bits_per_window(log: EventLog, window_ms: float, t_end: float,
                            gop_period_ms: float | None = None,
                            kinds=FORWARD_KINDS) -> np.ndarray:
    """Forward-path bits emitted per consecutive window (tokens, residuals
    and their retransmissions; feedback traffic excluded).

    The encoder emits one burst per GoP; its bitrate signal is the per-GoP
    rate, so each send is spread over the GoP period that produced it
    (impulse accounting would alias 300 ms bursts against 1 s windows).
    """
    n = int(np.ceil(t_end / window_ms))
    bits = np.zeros(n + 2)
    spread = gop_period_ms if gop_period_ms else window_ms
    for t, event, _gop, kind, _row, nbytes in log.rows:
        if event != "send" or kind not in kinds or t >= t_end:
            continue
        w0 = int(t // window_ms)
        cursor = t
        end = t + spread
        while cursor < end and w0 < len(bits):
            edge = min(end, (w0 + 1) * window_ms)
            bits[w0] += nbytes * 8.0 * (edge - cursor) / spread
            cursor = edge
            w0 += 1
    return bits[:n]


def estimate_series(log: EventLog) -> list:
    """(time_ms, bits/s) points from the sender's received bandwidth reports."""
    return [(t, nbytes) for t, event, _g, _k, _r, nbytes in log.rows
            if event == "bw_report"]


def mean_estimate_per_window(log: EventLog, window_ms: float, t_end: float) -> np.ndarray:
    """Window-mean of the estimator output, holding the last report between
    updates (zero before the first report)."""
    pts = estimate_series(log)
    n = int(np.ceil(t_end / window_ms))
    out = np.zeros(n)
    if not pts:
        return out
    times = np.array([p[0] for p in pts])
    values = np.array([p[1] for p in pts], dtype=np.float64)
    for w in range(n):
        t0, t1 = w * window_ms, (w + 1) * window_ms
        grid = np.linspace(t0, t1, 11)[:-1]
        idx = np.searchsorted(times, grid, side="right") - 1
        vals = np.where(idx >= 0, values[np.clip(idx, 0, None)], 0.0)
        out[w] = vals.mean()
    return out


def tracking_stats(result: SessionResult, trace: LinkTrace, window_ms: float = 1000.0,
                   t_start: float = 0.0, t_end: float | None = None,
                   tolerance: float = 0.10, estimator_memory_ms: float = 1000.0) -> dict:
    """Bitrate-tracking discipline over 1 s windows.

    - tracked fraction: windows where emitted bits are within +-tolerance of
      the window-mean estimator output;
    - overshoot: max ratio of emitted bits to the capacity bound, where the
      bound for a window is the largest trace capacity observed within the
      estimator's memory horizon before/through the window (what a
      receiver-driven controller can know).
    """
    if t_end is None:
        t_end = result.config.clip.gop_count * result.config.gop_period_ms
    emitted = emitted_bits_per_window(result.log, window_ms, t_end,
                                      gop_period_ms=result.config.gop_period_ms)
    estimates = mean_estimate_per_window(result.log, window_ms, t_end)
    w0 = int(t_start // window_ms)
    scale = 1000.0 / window_ms  # bits per window -> bits per second

    tracked = 0
    considered = 0
    worst_overshoot = 0.0
    for w in range(w0, len(emitted)):
        t_lo, t_hi = w * window_ms, (w + 1) * window_ms
        est = estimates[w]
        if est > 0.0:
            considered += 1
            if abs(emitted[w] * scale - est) <= tolerance * est:
                tracked += 1
        bound_bits = 0.0
        probe = t_lo - estimator_memory_ms
        while probe < t_hi - 1e-9:
            bound_bits = max(bound_bits, trace.capacity_bits(probe, probe + window_ms))
            probe += window_ms
        if bound_bits > 0.0:
            worst_overshoot = max(worst_overshoot, emitted[w] / bound_bits)
    return {
        "windows": considered,
        "tracked_fraction": tracked / considered if considered else 0.0,
        "worst_overshoot": worst_overshoot,
        "emitted_bps": emitted * scale,
        "estimate_bps": estimates,
    }


# ---------------------------------------------------------------------------
# Figures

def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def render_bitrate_figure(result: SessionResult, trace: LinkTrace, path: str,
                          window_ms: float = 1000.0) -> str:
    plt = _pyplot()
    t_end = result.config.clip.gop_count * result.config.gop_period_ms
    emitted = emitted_bits_per_window(result.log, window_ms, t_end,
                                      gop_period_ms=result.config.gop_period_ms) * (1000.0 / window_ms)
    est = mean_estimate_per_window(result.log, window_ms, t_end)
    t = (np.arange(len(emitted)) + 0.5) * window_ms / 1000.0
    capacity = [trace.capacity_bits(w * window_ms, (w + 1) * window_ms)
                * (1000.0 / window_ms) for w in range(len(emitted))]

    fig, ax = plt.subplots(figsize=(8, 4))
    ax.step(t, np.array(capacity) / 1e3, where="mid", label="trace capacity", color="0.6")
    ax.plot(t, est / 1e3, label="estimator output", color="tab:blue")
    ax.plot(t, emitted / 1e3, label="emitted", color="tab:red")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("kbit/s")
    ax.legend(loc="best", fontsize=8)
    ax.set_title("Bitrate tracking")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def render_quality_figure(result: SessionResult, path: str) -> str:
    plt = _pyplot()
    recs = result.records
    t = [r.time_ms / 1000.0 for r in recs]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(8, 5), sharex=True)
    ax1.plot(t, [r.psnr_db for r in recs], color="tab:green", label="PSNR")
    ax1.set_ylabel("PSNR (dB)")
    ax1.legend(loc="best", fontsize=8)
    ax2.plot(t, [r.frame_delay_ms for r in recs], color="tab:orange", label="frame delay")
    ax2.axhline(150, color="0.7", linestyle="--", linewidth=0.8)
    ax2.set_ylabel("delay (ms)")
    ax2.set_xlabel("time (s)")
    ax2.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def render_ablation_figure(rows: list, path: str) -> str:
    """Bar chart for ablation comparisons: rows of (label, value)."""
    plt = _pyplot()
    labels = [r[0] for r in rows]
    values = [r[1] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(labels, values, color=["tab:blue", "tab:red", "tab:green", "tab:orange"][:len(rows)])
    ax.set_ylabel("value")
    ax.set_title("Ablation")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def write_session_outputs(result: SessionResult, out_dir: str,
                          figures: bool = True) -> dict:
    """Write metrics.csv, events.csv and (optionally) figures into out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "metrics": os.path.join(out_dir, "metrics.csv"),
        "events": os.path.join(out_dir, "events.csv"),
    }
    write_metrics_csv(result, paths["metrics"])
    result.log.to_csv(paths["events"])
    if figures:
        paths["bitrate_png"] = render_bitrate_figure(
            result, result.config.trace, os.path.join(out_dir, "bitrate.png"))
        paths["quality_png"] = render_quality_figure(
            result, os.path.join(out_dir, "quality.png"))
    return paths

"""Sparse pixel-residual pipeline: compute against the proxy decode, average
over a temporal window, threshold, quantize, entropy-code, and apply."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rangecoder
from .video import GOP_SIZE, Frame, GoP

DEFAULT_THETA = 0.02
DEFAULT_QUANT_STEP = 1.0 / 127.0
DEFAULT_WINDOW = GOP_SIZE


@dataclass(frozen=True)
class SparseResidual:
    """Temporally averaged, thresholded, quantized residual for one window.

    Entries are (flattened pixel index, signed quantized value) in strictly
    increasing index order; every entry dequantizes to magnitude >= theta.
    """

    gop_id: int
    dims: tuple
    theta: float
    quant_step: float
    window_length: int
    indices: np.ndarray
    qvalues: np.ndarray

    def __post_init__(self):
        indices = np.asarray(self.indices, dtype=np.int64)
        qvalues = np.asarray(self.qvalues, dtype=np.int16)
        if indices.shape != qvalues.shape or indices.ndim != 1:
            raise ValueError("indices and qvalues must be matching 1-D arrays")
        if indices.size:
            if np.any(np.diff(indices) <= 0):
                raise ValueError("pixel indices must be strictly increasing")
            if indices[0] < 0 or indices[-1] >= int(np.prod(self.dims)):
                raise ValueError("pixel index out of range for dims")
            if np.any(qvalues == 0) or np.any(np.abs(qvalues) > 127):
                raise ValueError("qvalues must be nonzero in [-127, 127]")
        if self.theta < 0.0 or self.quant_step <= 0.0 or self.window_length < 1:
            raise ValueError("invalid residual parameters")
        object.__setattr__(self, "dims", tuple(self.dims))
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "qvalues", qvalues)

    @property
    def entry_count(self) -> int:
        return int(self.indices.size)

    def dense(self) -> np.ndarray:
        out = np.zeros(int(np.prod(self.dims)), dtype=np.float64)
        out[self.indices] = self.qvalues.astype(np.float64) * self.quant_step
        return out.reshape(self.dims)


def compute_residual(gop: GoP, recon: GoP) -> np.ndarray:
    """Per-frame residual r(t) = x(t) - x_hat(t) as a (9, h, w, 3) array.

    The reconstruction must come from the same deterministic proxy decode the
    receiver runs, so encoder and decoder agree on what is being corrected.
    """
    if (gop.height, gop.width) != (recon.height, recon.width):
        raise ValueError(
            f"dimension mismatch: {(gop.height, gop.width)} vs {(recon.height, recon.width)}")
    x = gop.stacked().astype(np.float64)
    xhat = recon.stacked().astype(np.float64)
    return x - xhat


def aggregate_residual(residuals: np.ndarray) -> np.ndarray:
    """Average residuals over the temporal window (random noise shrinks as
    1/T under the mean); the result is distributed back to every frame of
    the window at decode time."""
    residuals = np.asarray(residuals, dtype=np.float64)
    if residuals.ndim < 1 or residuals.shape[0] < 1:
        raise ValueError("window must contain at least one residual frame")
    return residuals.mean(axis=0)


def sparsify_quantize(avg: np.ndarray, theta: float = DEFAULT_THETA,
                      quant_step: float = DEFAULT_QUANT_STEP, gop_id: int = 0,
                      window_length: int = DEFAULT_WINDOW) -> SparseResidual:
    """Threshold at |value| >= theta, then quantize to a signed 8-bit grid.

    Entries that quantize to zero, or whose dequantized magnitude falls below
    theta, are omitted entirely.
    """
    if theta < 0.0:
        raise ValueError(f"theta must be non-negative, got {theta}")
    if quant_step <= 0.0:
        raise ValueError(f"quantization step must be positive, got {quant_step}")
    avg = np.asarray(avg, dtype=np.float64)
    flat = avg.ravel()
    qv = np.clip(np.rint(flat / quant_step), -127, 127).astype(np.int16)
    keep = (np.abs(flat) >= theta) & (qv != 0) & (np.abs(qv) * quant_step >= theta)
    indices = np.flatnonzero(keep)
    return SparseResidual(gop_id=gop_id, dims=avg.shape, theta=theta,
                          quant_step=quant_step, window_length=window_length,
                          indices=indices, qvalues=qv[indices])


def apply_residual(recon: GoP, sr: SparseResidual | None) -> GoP:
    """Add the dequantized residual to every frame of the window, clamped to
    [0, 1]. A missing residual (lost packet) leaves the reconstruction
    unchanged rather than stalling."""
    if sr is None or sr.entry_count == 0:
        return recon
    if tuple(sr.dims) != (recon.height, recon.width, 3):
        raise ValueError(f"residual dims {sr.dims} do not match GoP "
                         f"{(recon.height, recon.width, 3)}")
    delta = sr.dense()
    cache: dict = {}  # frames sharing a sample buffer stay shared
    frames = []
    for f in recon.frames:
        key = id(f.samples)
        mixed = cache.get(key)
        if mixed is None:
            mixed = np.clip(f.samples.astype(np.float64) + delta, 0.0, 1.0).astype(np.float32)
            cache[key] = mixed
        frames.append(Frame(mixed, timestamp_index=f.timestamp_index))
    return GoP(gop_id=recon.gop_id, frames=tuple(frames), scale=recon.scale)


def raw_residual_rate(width: int, height: int, fps: float, channels: int = 3,
                      bit_depth: int = 8) -> float:
    """Bits per second of an uncompressed residual stream."""
    for name, v in (("width", width), ("height", height), ("fps", fps),
                    ("channels", channels), ("bit_depth", bit_depth)):
        if v <= 0:
            raise ValueError(f"{name} must be positive, got {v}")
    return float(width) * height * channels * bit_depth * fps


# ---------------------------------------------------------------------------
# Serialization and budget fitting

def encode_payload(sr: SparseResidual) -> bytes:
    """Entropy-code the residual's dense quantized scan."""
    dense = np.zeros(int(np.prod(sr.dims)), dtype=np.int16)
    dense[sr.indices] = sr.qvalues
    return rangecoder.encode_scan(dense)


def decode_payload(data: bytes, dims, theta: float, quant_step: float,
                   window_length: int, gop_id: int = 0) -> SparseResidual:
    dense = rangecoder.decode_scan(data, int(np.prod(dims)))
    indices = np.flatnonzero(dense)
    return SparseResidual(gop_id=gop_id, dims=tuple(dims), theta=theta,
                          quant_step=quant_step, window_length=window_length,
                          indices=indices, qvalues=dense[indices])


def fit_to_budget(avg: np.ndarray, budget_bytes: int,
                  quant_step: float = DEFAULT_QUANT_STEP,
                  theta_floor: float = DEFAULT_THETA, gop_id: int = 0,
                  window_length: int = DEFAULT_WINDOW, max_trials: int = 6):
    """Pick the smallest threshold whose encoded payload fits the byte budget.

    The candidate thresholds are the magnitude order statistics of the
    averaged residual (keeping the k largest entries is the same as a
    threshold at the k-th magnitude), searched by encode-and-measure.

    Returns (SparseResidual, payload bytes, theta) or (None, b"", theta)
    when even an empty residual would not fit.
    """
    if budget_bytes <= 0:
        return None, b"", float("inf")
    avg = np.asarray(avg, dtype=np.float64)
    base = sparsify_quantize(avg, theta_floor, quant_step, gop_id, window_length)
    if base.entry_count == 0:
        return None, b"", theta_floor
    mags = np.abs(avg.ravel()[base.indices])
    order = np.argsort(-mags, kind="stable")
    lookup = np.zeros(int(np.prod(base.dims)), dtype=np.int16)
    lookup[base.indices] = base.qvalues
    full_k = base.entry_count

    def build(k: int):
        if k >= full_k:
            return base, theta_floor
        chosen = np.sort(base.indices[order[:k]])
        # Report the effective threshold actually honored by the kept entries.
        theta = float(np.min(np.abs(lookup[chosen])) * quant_step)
        return SparseResidual(gop_id=gop_id, dims=base.dims, theta=theta,
                              quant_step=quant_step, window_length=window_length,
                              indices=chosen, qvalues=lookup[chosen]), theta

    # Entropy-coded entries land near one byte each; measuring the full set
    # is only worth it when it has a chance of fitting.
    k = full_k if full_k <= 2 * budget_bytes else int(budget_bytes)
    best = None
    for _ in range(max_trials):
        k = max(1, min(k, full_k))
        sr, theta = build(k)
        payload = encode_payload(sr)
        if len(payload) <= budget_bytes:
            best = (sr, payload, theta)
            if k >= full_k or len(payload) >= 0.80 * budget_bytes:
                return best
            grown = int(k * budget_bytes / max(len(payload), 1) * 0.95)
            if grown <= k:
                return best
            k = grown
        else:
            shrunk = int(k * budget_bytes / len(payload) * 0.92)
            if shrunk < 1 or (best is not None and shrunk <= best[0].entry_count):
                break
            k = shrunk
    if best is not None:
        return best
    return None, b"", float("inf")

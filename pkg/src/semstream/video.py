"""Raw video I/O, the 9-frame GoP data model, and pixel-domain quality metrics."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

GOP_SIZE = 9
PSNR_CAP_DB = 99.0


class VideoFormatError(ValueError):
    """Malformed or unsupported video container data."""


@dataclass(frozen=True)
class Frame:
    """One RGB frame; samples are (h, w, 3) float32 in [0, 1], row-major.

    Frames are treated as immutable once constructed and are safe to share
    between concurrent tasks.
    """

    samples: np.ndarray
    timestamp_index: int = 0

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"frame samples must be (h, w, 3), got {arr.shape}")
        if arr.shape[0] <= 0 or arr.shape[1] <= 0:
            raise ValueError("frame dimensions must be positive")
        if not np.isfinite(arr).all():
            raise ValueError("frame samples must be finite")
        lo, hi = float(arr.min()), float(arr.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"frame samples outside [0, 1]: min={lo}, max={hi}")
        object.__setattr__(self, "samples", arr)

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    @property
    def channels(self) -> int:
        return 3


@dataclass(frozen=True)
class GoP:
    """Group of pictures: one I frame followed by eight P frames."""

    gop_id: int
    frames: tuple
    scale: int = 1

    def __post_init__(self):
        frames = tuple(self.frames)
        if len(frames) != GOP_SIZE:
            raise ValueError(f"a GoP holds exactly {GOP_SIZE} frames, got {len(frames)}")
        dims = {(f.height, f.width) for f in frames}
        if len(dims) != 1:
            raise ValueError(f"mixed frame dimensions in GoP: {sorted(dims)}")
        if self.scale not in (1, 2, 3):
            raise ValueError(f"scale must be 1, 2 or 3, got {self.scale}")
        object.__setattr__(self, "frames", frames)

    @property
    def height(self) -> int:
        return self.frames[0].height

    @property
    def width(self) -> int:
        return self.frames[0].width

    def stacked(self) -> np.ndarray:
        """All frames as one (9, h, w, 3) array."""
        return np.stack([f.samples for f in self.frames])


@dataclass(frozen=True)
class QualityReport:
    psnr_db: float
    mse: float
    boundary_flicker: float
    consistency_delta: float

    def __post_init__(self):
        for name in ("psnr_db", "mse", "boundary_flicker", "consistency_delta"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be non-negative")


# ---------------------------------------------------------------------------
# I/O

def load_raw_video(path: str, width: int | None = None, height: int | None = None,
                   fmt: str = "raw-rgb24") -> list[Frame]:
    """Load a video file into display-order frames normalized to [0, 1].

    raw-rgb24: width*height*3 bytes per frame, frames concatenated; 8-bit
    values are divided by 255. y4m: YUV4MPEG2 with C420* or C444 colorspace,
    converted to RGB with the full-range BT.601 matrix.
    """
    if fmt == "raw-rgb24":
        if width is None or height is None:
            raise ValueError("raw-rgb24 requires explicit width and height")
        return _load_rgb24(path, width, height)
    if fmt == "y4m":
        return _load_y4m(path)
    raise ValueError(f"unsupported format {fmt!r}")


def _load_rgb24(path: str, width: int, height: int) -> list[Frame]:
    data = open(path, "rb").read()
    frame_size = width * height * 3
    if len(data) % frame_size != 0:
        offset = (len(data) // frame_size) * frame_size
        raise VideoFormatError(
            f"{path}: truncated raw-rgb24 file, {len(data)} bytes is not a "
            f"multiple of {frame_size}; trailing partial frame starts at byte offset {offset}")
    n = len(data) // frame_size
    frames = []
    arr = np.frombuffer(data, dtype=np.uint8)
    for i in range(n):
        plane = arr[i * frame_size:(i + 1) * frame_size].reshape(height, width, 3)
        frames.append(Frame(plane.astype(np.float32) / 255.0, timestamp_index=i))
    return frames


def write_raw_video(path: str, frames) -> None:
    """Write frames as concatenated raw-rgb24 (values quantized to 8 bit)."""
    with open(path, "wb") as fh:
        for f in frames:
            fh.write(np.rint(f.samples * 255.0).astype(np.uint8).tobytes())


# Full-range BT.601 (JPEG) YCbCr -> RGB.
_BT601 = np.array([[1.0, 0.0, 1.402],
                   [1.0, -0.344136, -0.714136],
                   [1.0, 1.772, 0.0]], dtype=np.float64)


def _ycbcr_to_rgb(y: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    ycc = np.stack([y, u - 128.0, v - 128.0], axis=-1)
    rgb = ycc @ _BT601.T
    return np.clip(rgb / 255.0, 0.0, 1.0).astype(np.float32)


def _load_y4m(path: str) -> list[Frame]:
    data = open(path, "rb").read()
    nl = data.find(b"\n")
    if nl < 0:
        raise VideoFormatError(f"{path}: missing y4m header line")
    header = data[:nl].decode("ascii", errors="replace").split(" ")
    if header[0] != "YUV4MPEG2":
        raise VideoFormatError(f"{path}: not a YUV4MPEG2 stream")
    width = height = None
    colorspace = "420"
    for tok in header[1:]:
        if not tok:
            continue
        key, val = tok[0], tok[1:]
        if key == "W":
            width = int(val)
        elif key == "H":
            height = int(val)
        elif key == "C":
            colorspace = val
    if width is None or height is None:
        raise VideoFormatError(f"{path}: y4m header lacks W or H")
    if colorspace.startswith("420"):
        subsample = 2
    elif colorspace == "444":
        subsample = 1
    else:
        raise VideoFormatError(f"{path}: unsupported y4m colorspace C{colorspace}")
    if subsample == 2 and (width % 2 or height % 2):
        raise VideoFormatError(f"{path}: C420 requires even dimensions, got {width}x{height}")

    y_size = width * height
    c_size = (width // subsample) * (height // subsample)
    frame_bytes = y_size + 2 * c_size
    pos = nl + 1
    frames: list[Frame] = []
    idx = 0
    while pos < len(data):
        fnl = data.find(b"\n", pos)
        if fnl < 0 or not data[pos:fnl].startswith(b"FRAME"):
            raise VideoFormatError(f"{path}: bad FRAME marker at byte offset {pos}")
        pos = fnl + 1
        if pos + frame_bytes > len(data):
            raise VideoFormatError(
                f"{path}: truncated frame {idx} at byte offset {pos} "
                f"(need {frame_bytes} bytes, have {len(data) - pos})")
        raw = np.frombuffer(data[pos:pos + frame_bytes], dtype=np.uint8).astype(np.float64)
        y = raw[:y_size].reshape(height, width)
        u = raw[y_size:y_size + c_size].reshape(height // subsample, width // subsample)
        v = raw[y_size + c_size:].reshape(height // subsample, width // subsample)
        if subsample == 2:
            u = np.repeat(np.repeat(u, 2, axis=0), 2, axis=1)
            v = np.repeat(np.repeat(v, 2, axis=0), 2, axis=1)
        frames.append(Frame(_ycbcr_to_rgb(y, u, v), timestamp_index=idx))
        pos += frame_bytes
        idx += 1
    return frames


def write_metadata(path: str, width: int, height: int, fps: float, frame_count: int,
                   scale: int, extra: dict | None = None) -> None:
    """Write the stream metadata sidecar (JSON)."""
    meta = {"width": width, "height": height, "fps": fps,
            "frame_count": frame_count, "scale": scale}
    if extra:
        meta["codec"] = dict(extra)
    with open(path, "w") as fh:
        json.dump(meta, fh, sort_keys=True, separators=(",", ":"))


def read_metadata(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# GoP segmentation

def segment_gops(frames, start_gop_id: int = 0) -> list[GoP]:
    """Split frames into consecutive 9-frame GoPs, repeating the last frame
    to pad the tail (the decoder discards padding via the metadata frame count)."""
    frames = list(frames)
    if not frames:
        raise ValueError("cannot segment an empty frame sequence")
    dims = {(f.height, f.width) for f in frames}
    if len(dims) != 1:
        raise ValueError(f"mixed frame dimensions: {sorted(dims)}")
    gops = []
    for k in range(0, len(frames), GOP_SIZE):
        chunk = frames[k:k + GOP_SIZE]
        while len(chunk) < GOP_SIZE:
            chunk.append(chunk[-1])
        gops.append(GoP(gop_id=start_gop_id + k // GOP_SIZE, frames=tuple(chunk)))
    return gops


def concat_gops(gops, frame_count: int | None = None) -> list[Frame]:
    """Inverse of segment_gops: concatenate GoPs, dropping tail padding."""
    frames = [f for g in gops for f in g.frames]
    if frame_count is not None:
        frames = frames[:frame_count]
    return frames


# ---------------------------------------------------------------------------
# Metrics

def mse(reference: Frame, test: Frame) -> float:
    if reference.samples.shape != test.samples.shape:
        raise ValueError(
            f"dimension mismatch: {reference.samples.shape} vs {test.samples.shape}")
    diff = reference.samples.astype(np.float64) - test.samples.astype(np.float64)
    return float(np.mean(diff * diff))


def psnr(reference: Frame, test: Frame) -> float:
    """Peak signal-to-noise ratio in dB against a unit peak; 99 dB cap is the
    +infinity sentinel for a zero-error reconstruction."""
    return psnr_from_mse(mse(reference, test))


def psnr_from_mse(err: float) -> float:
    if err <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / err))


def boundary_flicker(prev_gop_recon: GoP, curr_gop_recon: GoP, n: int,
                     norm: str = "l1") -> float:
    """Mean per-pixel difference between the first n frames of the current GoP
    and the last n frames of the previous one (frame i pairs with frame
    T-n+i). Zero iff the boundary frames match exactly."""
    if not 1 <= n <= GOP_SIZE:
        raise ValueError(f"blend width n must be in [1, {GOP_SIZE}], got {n}")
    if (prev_gop_recon.height, prev_gop_recon.width) != (curr_gop_recon.height, curr_gop_recon.width):
        raise ValueError("GoP dimension mismatch")
    total = 0.0
    for i in range(1, n + 1):
        a = curr_gop_recon.frames[i - 1].samples.astype(np.float64)
        b = prev_gop_recon.frames[GOP_SIZE - n + i - 1].samples.astype(np.float64)
        if norm == "l1":
            total += float(np.mean(np.abs(a - b)))
        elif norm == "l2":
            total += float(np.sqrt(np.mean((a - b) ** 2)))
        else:
            raise ValueError(f"unknown norm {norm!r}")
    return total / n


def inter_frame_consistency(frames) -> float:
    """Mean absolute inter-frame pixel difference, averaged over transitions."""
    frames = list(frames)
    if len(frames) < 2:
        return 0.0
    deltas = [float(np.mean(np.abs(frames[i + 1].samples.astype(np.float64)
                                   - frames[i].samples.astype(np.float64))))
              for i in range(len(frames) - 1)]
    return float(np.mean(deltas))


def gop_psnr(reference: GoP, test: GoP) -> tuple[float, float]:
    """(psnr_db, mse) pooled over all frames of a GoP."""
    errs = [mse(r, t) for r, t in zip(reference.frames, test.frames)]
    pooled = float(np.mean(errs))
    return psnr_from_mse(pooled), pooled


def quality_report(reference: GoP, test: GoP, prev_recon: GoP | None = None,
                   blend_width: int = 2) -> QualityReport:
    psnr_db, pooled = gop_psnr(reference, test)
    flicker = 0.0
    if prev_recon is not None:
        flicker = boundary_flicker(prev_recon, test, blend_width)
    return QualityReport(psnr_db=psnr_db, mse=pooled, boundary_flicker=flicker,
                         consistency_delta=inter_frame_consistency(test.frames))

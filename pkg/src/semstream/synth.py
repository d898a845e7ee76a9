"""Seeded synthetic test clips: acceptance and experiments must not depend on
downloaded datasets."""

from __future__ import annotations

import numpy as np

from .codec import bilinear_upscale
from .video import GOP_SIZE, Frame, GoP


class SyntheticClip:
    """Deterministic frame source addressable by frame or GoP index."""

    GOP_CACHE = 4  # sender, receiver metrics and ablations share regenerations

    def __init__(self, name: str, width: int, height: int, frame_count: int,
                 seed: int = 0):
        if frame_count <= 0:
            raise ValueError("frame_count must be positive")
        self.name = name
        self.width = width
        self.height = height
        self.frame_count = frame_count
        self.seed = seed
        self._gop_cache: dict = {}

    @property
    def gop_count(self) -> int:
        return -(-self.frame_count // GOP_SIZE)

    def frame_array(self, index: int) -> np.ndarray:
        raise NotImplementedError

    def frame(self, index: int) -> Frame:
        index = min(index, self.frame_count - 1)  # tail padding repeats the last frame
        return Frame(self.frame_array(index).astype(np.float32), timestamp_index=index)

    def gop(self, k: int) -> GoP:
        if not 0 <= k < self.gop_count:
            raise ValueError(f"gop index {k} out of range [0, {self.gop_count})")
        cached = self._gop_cache.get(k)
        if cached is not None:
            return cached
        frames = tuple(self.frame(k * GOP_SIZE + i) for i in range(GOP_SIZE))
        gop = GoP(gop_id=k, frames=frames)
        self._gop_cache[k] = gop
        for old in [g for g in self._gop_cache if g <= k - self.GOP_CACHE]:
            del self._gop_cache[old]
        return gop

    def frames(self):
        return [self.frame(i) for i in range(self.frame_count)]


def _gradient(width: int, height: int, phase: float = 0.0) -> np.ndarray:
    x = np.linspace(0.0, 1.0, width)[None, :]
    y = np.linspace(0.0, 1.0, height)[:, None]
    r = np.broadcast_to(0.25 + 0.5 * x, (height, width))
    g = np.broadcast_to(0.25 + 0.5 * y, (height, width))
    b = np.full((height, width), 0.4 + 0.2 * np.sin(phase))
    return np.clip(np.stack([r, g, b], axis=2), 0.0, 1.0)


class StaticGradientClip(SyntheticClip):
    """One gradient image repeated: the all-static baseline."""

    def __init__(self, width=640, height=480, frame_count=90, seed=0):
        super().__init__("static-gradient", width, height, frame_count, seed)
        self._image = _gradient(width, height)

    def frame_array(self, index: int) -> np.ndarray:
        return self._image


class MovingSquareClip(SyntheticClip):
    """A textured square translating over a static gradient background."""

    def __init__(self, width=640, height=480, frame_count=90, seed=0,
                 square_frac=0.25, speed=4):
        super().__init__("moving-square", width, height, frame_count, seed)
        self._background = _gradient(width, height)
        self.side = max(8, int(min(width, height) * square_frac))
        self.speed = speed
        rng = np.random.default_rng(seed)
        # High-contrast blocky texture so the square is spectrally busy.
        tex = rng.random((self.side // 4 + 1, self.side // 4 + 1, 3))
        self._texture = np.repeat(np.repeat(tex, 4, axis=0), 4, axis=1)[:self.side, :self.side]

    def frame_array(self, index: int) -> np.ndarray:
        img = self._background.copy()
        max_x = self.width - self.side
        max_y = self.height - self.side
        x = (self.speed * index) % max(max_x, 1)
        y = (self.speed * index // 2) % max(max_y, 1)
        img[y:y + self.side, x:x + self.side] = self._texture
        return img


class NoiseFieldClip(SyntheticClip):
    """Per-frame uniform noise mixed over a gradient: residual-dense content."""

    def __init__(self, width=320, height=240, frame_count=90, seed=0, amplitude=0.5):
        super().__init__("noise-field", width, height, frame_count, seed)
        self._background = _gradient(width, height)
        self.amplitude = amplitude

    def frame_array(self, index: int) -> np.ndarray:
        rng = np.random.default_rng((self.seed, index))
        noise = rng.random((self.height, self.width, 3)) - 0.5
        return np.clip(self._background + self.amplitude * noise, 0.0, 1.0)


class NoisyMotionClip(SyntheticClip):
    """Moving square over a static noise texture plus per-frame noise; keeps
    the residual supply dense enough to fill any reasonable byte budget."""

    def __init__(self, width=320, height=240, frame_count=90, seed=0,
                 static_noise=0.3, frame_noise=0.15, speed=6):
        super().__init__("noisy-motion", width, height, frame_count, seed)
        rng = np.random.default_rng(seed)
        base = _gradient(width, height)
        self._background = np.clip(
            base + static_noise * (rng.random((height, width, 3)) - 0.5), 0.0, 1.0)
        self.frame_noise = frame_noise
        self.side = max(8, min(width, height) // 4)
        self.speed = speed

    def frame_array(self, index: int) -> np.ndarray:
        img = self._background.copy()
        x = (self.speed * index) % max(self.width - self.side, 1)
        y = (self.speed * index // 2) % max(self.height - self.side, 1)
        img[y:y + self.side, x:x + self.side] = 1.0 - img[y:y + self.side, x:x + self.side]
        rng = np.random.default_rng((self.seed, 7919, index))
        noise = rng.random((self.height, self.width, 3)) - 0.5
        return np.clip(img + self.frame_noise * noise, 0.0, 1.0)


class StaticDetailClip(SyntheticClip):
    """Static clip with sharp working-resolution detail.

    The image is built at 1/scale resolution (sharp rectangles over a
    gradient) and bilinearly upsampled, so the down-code-up path is exactly
    what the residual stream has to correct.
    """

    def __init__(self, width=640, height=480, frame_count=27, seed=0, scale=2):
        super().__init__("static-detail", width, height, frame_count, seed)
        wh, ww = -(-height // scale), -(-width // scale)
        rng = np.random.default_rng(seed)
        img = _gradient(ww, wh)
        for _ in range(40):
            rw = int(rng.integers(4, ww // 4))
            rh = int(rng.integers(4, wh // 4))
            x0 = int(rng.integers(0, ww - rw))
            y0 = int(rng.integers(0, wh - rh))
            img[y0:y0 + rh, x0:x0 + rw] = rng.random(3)
        up = bilinear_upscale(img, scale)[:height, :width]
        self._image = np.clip(up, 0.0, 1.0)

    def frame_array(self, index: int) -> np.ndarray:
        return self._image


_GENERATORS = {
    "static-gradient": StaticGradientClip,
    "moving-square": MovingSquareClip,
    "noise-field": NoiseFieldClip,
    "noisy-motion": NoisyMotionClip,
    "static-detail": StaticDetailClip,
}


def make_clip(name: str, width: int, height: int, frame_count: int,
              seed: int = 0) -> SyntheticClip:
    if name not in _GENERATORS:
        raise ValueError(f"unknown synthetic clip {name!r}; "
                         f"choose from {sorted(_GENERATORS)}")
    return _GENERATORS[name](width=width, height=height, frame_count=frame_count,
                             seed=seed)


def parse_clip_spec(spec: str) -> SyntheticClip:
    """Parse 'synth:<name>:<W>x<H>:<frames>[:seed=N]' into a clip."""
    parts = spec.split(":")
    if parts[0] != "synth" or len(parts) < 4:
        raise ValueError(f"bad synthetic clip spec {spec!r} "
                         "(expected synth:<name>:<W>x<H>:<frames>[:seed=N])")
    name = parts[1]
    w, h = (int(v) for v in parts[2].split("x"))
    frames = int(parts[3])
    seed = 0
    for extra in parts[4:]:
        key, _, val = extra.partition("=")
        if key == "seed":
            seed = int(val)
        else:
            raise ValueError(f"unknown clip option {extra!r}")
    return make_clip(name, w, h, frames, seed)


class FramesClip(SyntheticClip):
    """Adapter exposing a loaded frame list through the clip interface."""

    def __init__(self, frames, name: str = "file"):
        frames = list(frames)
        if not frames:
            raise ValueError("empty frame sequence")
        super().__init__(name, frames[0].width, frames[0].height, len(frames))
        self._frames = frames

    def frame_array(self, index: int) -> np.ndarray:
        return self._frames[index].samples

"""Deterministic block-DCT tokenizer behind the pluggable codec interface,
plus resolution scaling and GoP boundary blending.

The tokenizer keeps the transmitted shape contract of a learned model: each
GoP becomes two H'xW'xC token matrices (one spatial-only reference layer from
frame 0, one spatiotemporally compressed layer from the temporal mean of
frames 1..8). Per 8x8 spatial block and RGB channel it keeps the 4
lowest-zigzag orthonormal DCT-II coefficients, so C = 3*4 = 12 by default.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.fft import dctn, idctn

from .video import GOP_SIZE, Frame, GoP

BLOCK = 8
# Lowest four positions of the standard 8x8 zigzag scan: DC plus 3 AC.
COEFF_POSITIONS = ((0, 0), (0, 1), (1, 0), (2, 0))
COEFFS_PER_CHANNEL = len(COEFF_POSITIONS)


@dataclass(frozen=True)
class CodecConfig:
    """Asymmetric compression settings: 8x8 spatial and 8x temporal."""

    spatial_factor: int = 8
    temporal_factor: int = 8
    channels: int = 3 * COEFFS_PER_CHANNEL
    scale: int = 3
    blend_width: int = 2

    def __post_init__(self):
        if self.spatial_factor != 8 or self.temporal_factor != 8:
            raise ValueError("spatial and temporal compression factors are fixed at 8")
        if self.scale not in (2, 3):
            raise ValueError(f"scale must be 2 or 3, got {self.scale}")
        if not 1 <= self.blend_width <= 8:
            raise ValueError(f"blend width must be in [1, 8], got {self.blend_width}")
        if self.channels != 3 * COEFFS_PER_CHANNEL:
            raise ValueError(
                f"reference tokenizer emits {3 * COEFFS_PER_CHANNEL} channels, "
                f"got {self.channels}")


@dataclass(frozen=True)
class TokenMatrix:
    """H'xW'xC latent grid with a validity mask (True = token present).

    Masked-out positions hold exact zeros; `frame_shape` is the working-
    resolution (height, width) the matrix decodes back to.
    """

    kind: str
    values: np.ndarray
    mask: np.ndarray
    gop_id: int = 0
    frame_shape: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("I", "P"):
            raise ValueError(f"token matrix kind must be 'I' or 'P', got {self.kind!r}")
        values = np.asarray(self.values, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        if values.ndim != 3:
            raise ValueError(f"token values must be (H', W', C), got {values.shape}")
        if mask.shape != values.shape[:2]:
            raise ValueError(f"mask shape {mask.shape} does not match {values.shape[:2]}")
        if not np.isfinite(values).all():
            raise ValueError("token values must be finite")
        if np.any(values[~mask] != 0.0):
            raise ValueError("masked-out token positions must be exactly zero")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        if self.frame_shape is not None:
            object.__setattr__(self, "frame_shape", tuple(self.frame_shape))

    @property
    def height_tokens(self) -> int:
        return self.values.shape[0]

    @property
    def width_tokens(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


def token_grid_shape(height: int, width: int) -> tuple[int, int]:
    """(H', W') for a frame at working resolution."""
    return (-(-height // BLOCK), -(-width // BLOCK))


def _pad_to_block(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    ph = (-h) % BLOCK
    pw = (-w) % BLOCK
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="edge")
    return img


def _blockify(img: np.ndarray) -> np.ndarray:
    """(h, w, 3) -> (H', W', 3, 8, 8) blocks."""
    h, w = img.shape[:2]
    hb, wb = h // BLOCK, w // BLOCK
    return img.reshape(hb, BLOCK, wb, BLOCK, 3).transpose(0, 2, 4, 1, 3)


def _unblockify(blocks: np.ndarray) -> np.ndarray:
    hb, wb = blocks.shape[:2]
    return blocks.transpose(0, 3, 1, 4, 2).reshape(hb * BLOCK, wb * BLOCK, 3)


def _tokenize_image(img: np.ndarray) -> np.ndarray:
    """Forward transform of one working-resolution image into (H', W', C)."""
    blocks = _blockify(_pad_to_block(np.asarray(img, dtype=np.float64)))
    coeffs = dctn(blocks, type=2, norm="ortho", axes=(-2, -1))
    parts = [coeffs[..., y, x] for (y, x) in COEFF_POSITIONS]
    # Channel layout: [R:dc,a1,a2,a3, G:..., B:...]
    stacked = np.stack(parts, axis=-1)  # (H', W', 3, 4)
    hb, wb = stacked.shape[:2]
    return stacked.reshape(hb, wb, 3 * COEFFS_PER_CHANNEL)


def _detokenize(values: np.ndarray, frame_shape: tuple) -> np.ndarray:
    """Inverse transform back to a working-resolution image, clamped to [0,1]."""
    hb, wb, _ = values.shape
    coeffs = np.zeros((hb, wb, 3, BLOCK, BLOCK), dtype=np.float64)
    per_ch = values.reshape(hb, wb, 3, COEFFS_PER_CHANNEL)
    for k, (y, x) in enumerate(COEFF_POSITIONS):
        coeffs[..., y, x] = per_ch[..., k]
    img = _unblockify(idctn(coeffs, type=2, norm="ortho", axes=(-2, -1)))
    h, w = frame_shape
    return np.clip(img[:h, :w], 0.0, 1.0)


def encode_gop(gop: GoP, cfg: CodecConfig) -> tuple[TokenMatrix, TokenMatrix]:
    """Tokenize a working-resolution GoP: I tokens from frame 0 alone, P
    tokens from the per-pixel temporal mean of frames 1..8 (8x temporal
    compression). Both matrices share H'xW'xC and start fully valid."""
    if len(gop.frames) != GOP_SIZE:
        raise ValueError(f"GoP must hold {GOP_SIZE} frames")
    shape = (gop.height, gop.width)
    i_values = _tokenize_image(gop.frames[0].samples)
    p_source = np.mean(np.stack([f.samples for f in gop.frames[1:]], axis=0,
                                dtype=np.float64), axis=0)
    p_values = _tokenize_image(p_source)
    full = np.ones(i_values.shape[:2], dtype=bool)
    i_tokens = TokenMatrix("I", i_values, full, gop_id=gop.gop_id, frame_shape=shape)
    p_tokens = TokenMatrix("P", p_values, full.copy(), gop_id=gop.gop_id, frame_shape=shape)
    return i_tokens, p_tokens


def decode_gop(i_tokens: TokenMatrix, p_tokens: TokenMatrix, cfg: CodecConfig) -> GoP:
    """Reconstruct a GoP from its token matrices.

    Frame 0 comes from the I layer; frames 1..8 are copies of the P layer's
    reconstruction, except that blocks whose P token is masked invalid are
    concealed with the co-located decoded I block (temporal-reference
    concealment). Outputs are clamped to [0, 1].
    """
    if i_tokens.values.shape != p_tokens.values.shape:
        raise ValueError(
            f"token shape mismatch: {i_tokens.values.shape} vs {p_tokens.values.shape}")
    shape = i_tokens.frame_shape or (i_tokens.height_tokens * BLOCK,
                                     i_tokens.width_tokens * BLOCK)
    i_img = _detokenize(i_tokens.values, shape)
    p_img = _detokenize(p_tokens.values, shape)

    concealed = ~p_tokens.mask
    if concealed.any():
        pix_mask = np.repeat(np.repeat(concealed, BLOCK, axis=0), BLOCK, axis=1)
        pix_mask = pix_mask[:shape[0], :shape[1]]
        p_img = np.where(pix_mask[..., None], i_img, p_img)

    frames = [Frame(i_img.astype(np.float32), timestamp_index=0)]
    p_frame = p_img.astype(np.float32)
    for t in range(1, GOP_SIZE):
        frames.append(Frame(p_frame, timestamp_index=t))
    return GoP(gop_id=i_tokens.gop_id, frames=tuple(frames))


def apply_token_mask(matrix: TokenMatrix, drop_mask: np.ndarray) -> TokenMatrix:
    """Zero out and invalidate dropped positions (True in drop_mask = drop)."""
    drop = np.asarray(drop_mask, dtype=bool)
    if drop.shape != matrix.mask.shape:
        raise ValueError(f"drop mask shape {drop.shape} != {matrix.mask.shape}")
    new_mask = matrix.mask & ~drop
    new_values = np.where(new_mask[..., None], matrix.values, 0.0)
    return replace(matrix, values=new_values, mask=new_mask)


# ---------------------------------------------------------------------------
# Resolution scaling

def downscale_frame(frame: Frame, s: int) -> Frame:
    """s x s box-filter mean; dimensions not divisible by s are padded by edge
    replication first, so the output is ceil(dim/s)."""
    if s not in (2, 3):
        raise ValueError(f"scale factor must be 2 or 3, got {s}")
    img = frame.samples.astype(np.float64)
    h, w = img.shape[:2]
    ph, pw = (-h) % s, (-w) % s
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="edge")
    hh, ww = img.shape[0] // s, img.shape[1] // s
    out = img.reshape(hh, s, ww, s, 3).mean(axis=(1, 3))
    return Frame(out.astype(np.float32), timestamp_index=frame.timestamp_index)


def bilinear_upscale(img: np.ndarray, s: int) -> np.ndarray:
    """Bilinear interpolation to s times the input size (half-pixel centers)."""
    h, w = img.shape[:2]
    out_h, out_w = h * s, w * s

    def _axis(n_out, n_in):
        coords = (np.arange(n_out) + 0.5) / s - 0.5
        coords = np.clip(coords, 0.0, n_in - 1.0)
        lo = np.floor(coords).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = coords - lo
        return lo, hi, frac

    y0, y1, fy = _axis(out_h, h)
    x0, x1, fx = _axis(out_w, w)
    img = np.asarray(img, dtype=np.float64)
    top = img[y0][:, x0] * (1 - fx)[None, :, None] + img[y0][:, x1] * fx[None, :, None]
    bot = img[y1][:, x0] * (1 - fx)[None, :, None] + img[y1][:, x1] * fx[None, :, None]
    return top * (1 - fy)[:, None, None] + bot * fy[:, None, None]


def upscale_frame(frame: Frame, s: int, upscaler=None) -> Frame:
    """Upscale by s. The upscaler is pluggable: any callable
    (ndarray, s) -> ndarray with s-times output dims; default is bilinear."""
    if s not in (2, 3):
        raise ValueError(f"scale factor must be 2 or 3, got {s}")
    fn = upscaler or bilinear_upscale
    out = np.clip(fn(frame.samples, s), 0.0, 1.0)
    return Frame(np.asarray(out, dtype=np.float32), timestamp_index=frame.timestamp_index)


def scale_gop(gop: GoP, s: int, direction: str, upscaler=None,
              crop: tuple | None = None) -> GoP:
    """Scale every frame of a GoP ('down' or 'up'); optionally crop after
    upscaling to undo earlier edge padding."""
    if direction == "down":
        frames = [downscale_frame(f, s) for f in gop.frames]
        scale = s
    elif direction == "up":
        # Frames sharing one sample buffer (the replicated P reconstruction)
        # are upscaled once.
        cache: dict = {}
        frames = []
        for f in gop.frames:
            key = id(f.samples)
            out = cache.get(key)
            if out is None:
                out = upscale_frame(f, s, upscaler).samples
                if crop is not None:
                    out = out[:crop[0], :crop[1]]
                cache[key] = out
            frames.append(Frame(out, timestamp_index=f.timestamp_index))
        scale = 1
    else:
        raise ValueError(f"direction must be 'down' or 'up', got {direction!r}")
    return GoP(gop_id=gop.gop_id, frames=tuple(frames), scale=scale)


# ---------------------------------------------------------------------------
# Boundary blending

def blend_boundary(prev_recon: GoP, curr_recon: GoP, n: int) -> GoP:
    """Replace the first n frames of the current GoP with linear mixes of the
    previous GoP's tail: frame i (1-indexed) becomes
    alpha_i*prev[T-n+i] + (1-alpha_i)*curr[i] with alpha_i = (n-i)/n."""
    if n > GOP_SIZE:
        raise ValueError(f"blend width {n} exceeds GoP size {GOP_SIZE}")
    if n < 1:
        raise ValueError("blend width must be >= 1")
    if (prev_recon.height, prev_recon.width) != (curr_recon.height, curr_recon.width):
        raise ValueError("GoP dimension mismatch")
    frames = list(curr_recon.frames)
    for i in range(1, n + 1):
        alpha = (n - i) / n
        prev_tail = prev_recon.frames[GOP_SIZE - n + i - 1].samples.astype(np.float64)
        curr = curr_recon.frames[i - 1].samples.astype(np.float64)
        mixed = np.clip(alpha * prev_tail + (1.0 - alpha) * curr, 0.0, 1.0)
        frames[i - 1] = Frame(mixed.astype(np.float32),
                              timestamp_index=curr_recon.frames[i - 1].timestamp_index)
    return GoP(gop_id=curr_recon.gop_id, frames=tuple(frames), scale=curr_recon.scale)

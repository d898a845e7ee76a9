import math

import numpy as np
import pytest

from semstream.codec import (BLOCK, COEFF_POSITIONS, CodecConfig, TokenMatrix,
                             apply_token_mask, bilinear_upscale, blend_boundary,
                             decode_gop, downscale_frame, encode_gop, scale_gop,
                             token_grid_shape, upscale_frame)
from semstream.video import GOP_SIZE, Frame, GoP, boundary_flicker, gop_psnr

from conftest import constant_gop, random_frame, random_gop


# ---------------------------------------------------------------------------
# independent DCT oracle: explicit orthonormal basis matrices

def _dct_matrix(n=BLOCK):
    m = np.zeros((n, n))
    for k in range(n):
        c = math.sqrt(1.0 / n) if k == 0 else math.sqrt(2.0 / n)
        for i in range(n):
            m[k, i] = c * math.cos(math.pi * (2 * i + 1) * k / (2 * n))
    return m


_DCT = _dct_matrix()


def oracle_truncate_block(block):
    """Forward DCT, keep the 4 lowest-zigzag coefficients, inverse DCT."""
    coeffs = _DCT @ block @ _DCT.T
    kept = np.zeros_like(coeffs)
    for (y, x) in COEFF_POSITIONS:
        kept[y, x] = coeffs[y, x]
    return _DCT.T @ kept @ _DCT


def test_constant_gray_dc_coefficient():
    gop = constant_gop(0.5)
    i_tokens, p_tokens = encode_gop(gop, CodecConfig())
    # Orthonormal 8x8 DCT-II of a constant 0.5 block: DC = 8*0.5 = 4.
    dc = i_tokens.values[:, :, 0::4]
    ac = np.delete(i_tokens.values, np.s_[0::4], axis=2)
    assert np.allclose(dc, 4.0, atol=1e-9)
    assert np.abs(ac).max() < 1e-9
    assert np.allclose(p_tokens.values[:, :, 0::4], 4.0, atol=1e-9)


def test_token_shape_contract():
    gop = constant_gop(0.5, h=64, w=64)
    i_tokens, p_tokens = encode_gop(gop, CodecConfig())
    assert i_tokens.values.shape == (8, 8, 12)
    assert p_tokens.values.shape == (8, 8, 12)
    assert token_grid_shape(60, 50) == (8, 7)  # ceil division


def test_encode_determinism(rng):
    gop = random_gop(rng, h=24, w=24)
    a = encode_gop(gop, CodecConfig())
    b = encode_gop(gop, CodecConfig())
    assert np.array_equal(a[0].values, b[0].values)
    assert np.array_equal(a[1].values, b[1].values)


def test_identical_p_frames_give_identical_p_tokens(rng):
    # Two GoPs sharing frames 1..8 but differing in the I frame produce the
    # same P token matrix (the P layer depends only on frames 1..8).
    shared = [random_frame(rng, 16, 16, i) for i in range(1, GOP_SIZE)]
    gop_a = GoP(0, tuple([random_frame(rng, 16, 16, 0)] + shared))
    gop_b = GoP(1, tuple([random_frame(rng, 16, 16, 0)] + shared))
    _, p_a = encode_gop(gop_a, CodecConfig())
    _, p_b = encode_gop(gop_b, CodecConfig())
    assert np.array_equal(p_a.values, p_b.values)


def test_decode_constant_gray_exact():
    gop = constant_gop(0.5)
    cfg = CodecConfig()
    recon = decode_gop(*encode_gop(gop, cfg), cfg)
    assert gop_psnr(gop, recon)[0] == 99.0


def test_decode_matches_truncation_oracle(rng):
    gop = random_gop(rng, h=16, w=16, dyadic=True)
    cfg = CodecConfig()
    recon = decode_gop(*encode_gop(gop, cfg), cfg)
    # Frame 0 must equal the per-block 4-coefficient truncation of frame 0.
    src = gop.frames[0].samples.astype(np.float64)
    expect = np.empty_like(src)
    for by in range(2):
        for bx in range(2):
            for c in range(3):
                blk = src[by * 8:(by + 1) * 8, bx * 8:(bx + 1) * 8, c]
                expect[by * 8:(by + 1) * 8, bx * 8:(bx + 1) * 8, c] = \
                    oracle_truncate_block(blk)
    expect = np.clip(expect, 0.0, 1.0)
    assert np.abs(recon.frames[0].samples - expect).max() < 1e-6
    # Frames 1..8 likewise for the temporal mean of frames 1..8.
    mean = np.mean([f.samples for f in gop.frames[1:]], axis=0).astype(np.float64)
    expect_p = np.empty_like(mean)
    for by in range(2):
        for bx in range(2):
            for c in range(3):
                blk = mean[by * 8:(by + 1) * 8, bx * 8:(bx + 1) * 8, c]
                expect_p[by * 8:(by + 1) * 8, bx * 8:(bx + 1) * 8, c] = \
                    oracle_truncate_block(blk)
    expect_p = np.clip(expect_p, 0.0, 1.0)
    for t in range(1, GOP_SIZE):
        assert np.abs(recon.frames[t].samples - expect_p).max() < 1e-6


def test_decode_conceals_masked_p_tokens_with_i_blocks(rng):
    gop = random_gop(rng, h=16, w=16)
    cfg = CodecConfig()
    i_tokens, p_tokens = encode_gop(gop, cfg)
    all_invalid = apply_token_mask(p_tokens, np.ones((2, 2), dtype=bool))
    recon = decode_gop(i_tokens, all_invalid, cfg)
    for t in range(1, GOP_SIZE):
        assert np.array_equal(recon.frames[t].samples, recon.frames[0].samples)


def test_decode_partial_concealment(rng):
    gop = random_gop(rng, h=16, w=16)
    cfg = CodecConfig()
    i_tokens, p_tokens = encode_gop(gop, cfg)
    drop = np.zeros((2, 2), dtype=bool)
    drop[0, 0] = True
    recon = decode_gop(i_tokens, apply_token_mask(p_tokens, drop), cfg)
    full = decode_gop(i_tokens, p_tokens, cfg)
    # Dropped block copies the I frame; the rest matches the unmasked decode.
    assert np.array_equal(recon.frames[1].samples[:8, :8],
                          recon.frames[0].samples[:8, :8])
    assert np.array_equal(recon.frames[1].samples[8:, 8:],
                          full.frames[1].samples[8:, 8:])


def test_concealment_idempotent(rng):
    gop = random_gop(rng, h=16, w=16)
    cfg = CodecConfig()
    i_tokens, p_tokens = encode_gop(gop, cfg)
    once = decode_gop(i_tokens, p_tokens, cfg)
    again = decode_gop(i_tokens, apply_token_mask(p_tokens, np.zeros((2, 2), bool)), cfg)
    for a, b in zip(once.frames, again.frames):
        assert np.array_equal(a.samples, b.samples)


def test_decode_outputs_stay_in_range(rng):
    for _ in range(5):
        gop = random_gop(rng, h=16, w=16)
        cfg = CodecConfig()
        recon = decode_gop(*encode_gop(gop, cfg), cfg)
        for f in recon.frames:
            assert f.samples.min() >= 0.0 and f.samples.max() <= 1.0


def test_decode_shape_mismatch_rejected(rng):
    gop = random_gop(rng, h=16, w=16)
    big = random_gop(rng, h=24, w=24)
    cfg = CodecConfig()
    i_small, _ = encode_gop(gop, cfg)
    _, p_big = encode_gop(big, cfg)
    with pytest.raises(ValueError):
        decode_gop(i_small, p_big, cfg)


def test_masked_positions_must_be_zero():
    values = np.ones((2, 2, 12))
    mask = np.zeros((2, 2), dtype=bool)
    with pytest.raises(ValueError):
        TokenMatrix("P", values, mask)


# ---------------------------------------------------------------------------
# resolution scaling

def test_scaling_preserves_constants():
    f = Frame(np.full((12, 12, 3), 0.7, dtype=np.float32))
    for s in (2, 3):
        down = downscale_frame(f, s)
        assert np.allclose(down.samples, 0.7, atol=1e-6)
        up = upscale_frame(down, s)
        assert np.allclose(up.samples, 0.7, atol=1e-6)


def test_downscale_2x2_mean():
    arr = np.zeros((2, 2, 3), dtype=np.float32)
    arr[0, 1] = 1.0
    arr[1, 1] = 1.0
    down = downscale_frame(Frame(arr), 2)
    assert down.samples.shape == (1, 1, 3)
    assert np.allclose(down.samples, 0.5)


def test_checkerboard_down_up_uniform(rng):
    yy, xx = np.meshgrid(np.arange(64), np.arange(64), indexing="ij")
    checker = ((yy + xx) % 2).astype(np.float32)
    f = Frame(np.repeat(checker[:, :, None], 3, axis=2))
    down = downscale_frame(f, 2)
    assert np.allclose(down.samples, 0.5, atol=1e-6)
    up = upscale_frame(down, 2)
    assert np.allclose(up.samples, 0.5, atol=1e-6)


def test_downscale_pads_by_edge_replication():
    arr = np.zeros((5, 5, 3), dtype=np.float32)
    arr[:, 4] = 1.0
    down = downscale_frame(Frame(arr), 3)
    assert down.samples.shape == (2, 2, 3)
    # Right column padded with the edge value 1.0: mean of 3 ones in each row
    # block times replication.
    assert down.samples[0, 1, 0] > 0.5


def test_bilinear_upscale_matches_loop_oracle(rng):
    img = rng.random((6, 5, 3))
    for s in (2, 3):
        fast = bilinear_upscale(img, s)
        slow = _bilinear_oracle(img, s)
        assert np.abs(fast - slow).max() < 1e-12


def _bilinear_oracle(img, s):
    h, w = img.shape[:2]
    out = np.zeros((h * s, w * s, 3))
    for oy in range(h * s):
        for ox in range(w * s):
            sy = min(max((oy + 0.5) / s - 0.5, 0.0), h - 1.0)
            sx = min(max((ox + 0.5) / s - 0.5, 0.0), w - 1.0)
            y0, x0 = int(math.floor(sy)), int(math.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            for c in range(3):
                top = img[y0, x0, c] * (1 - fx) + img[y0, x1, c] * fx
                bot = img[y1, x0, c] * (1 - fx) + img[y1, x1, c] * fx
                out[oy, ox, c] = top * (1 - fy) + bot * fy
    return out


def test_scale_factor_validation(rng):
    f = random_frame(rng, 8, 8)
    for s in (1, 4):
        with pytest.raises(ValueError):
            downscale_frame(f, s)
        with pytest.raises(ValueError):
            upscale_frame(f, s)


def test_pluggable_upscaler():
    f = Frame(np.full((4, 4, 3), 0.25, dtype=np.float32))
    def nearest(img, s):
        return np.repeat(np.repeat(img, s, axis=0), s, axis=1)
    up = upscale_frame(f, 2, upscaler=nearest)
    assert up.samples.shape == (8, 8, 3)
    assert np.allclose(up.samples, 0.25)


# ---------------------------------------------------------------------------
# boundary blending

def test_blend_weights_midpoint():
    zeros = constant_gop(0.0)
    ones = constant_gop(1.0, gop_id=1)
    blended = blend_boundary(zeros, ones, 2)
    # i=1: alpha=(2-1)/2=0.5 -> equal mix; i=2: alpha=0 -> current frame.
    assert np.allclose(blended.frames[0].samples, 0.5)
    assert np.allclose(blended.frames[1].samples, 1.0)
    assert np.allclose(blended.frames[2].samples, 1.0)


def test_blend_identity_when_boundary_matches(rng):
    prev = random_gop(rng, gop_id=0)
    curr = GoP(gop_id=1, frames=prev.frames)
    blended = blend_boundary(prev, curr, 2)
    head = [f.samples for f in blended.frames[:2]]
    # prev tail frames mixed with identical content stay within fp error of
    # the originals only when tail == head; here tail != head, so instead
    # check the true identity case: a GoP whose head equals prev's tail.
    frames = list(curr.frames)
    frames[0] = prev.frames[7]
    frames[1] = prev.frames[8]
    aligned = GoP(gop_id=1, frames=tuple(frames))
    blended = blend_boundary(prev, aligned, 2)
    assert np.abs(blended.frames[0].samples - prev.frames[7].samples).max() < 1e-7
    assert np.abs(blended.frames[1].samples - prev.frames[8].samples).max() < 1e-7
    assert boundary_flicker(prev, blended, 2) < 1e-7


def test_blend_reduces_flicker_on_random_gops(rng):
    for _ in range(20):
        prev = random_gop(rng, gop_id=0)
        curr = random_gop(rng, gop_id=1)
        before = boundary_flicker(prev, curr, 2)
        after = boundary_flicker(prev, blend_boundary(prev, curr, 2), 2)
        assert after < before


def test_blend_rejects_oversized_n(rng):
    gop = random_gop(rng)
    with pytest.raises(ValueError):
        blend_boundary(gop, gop, 10)


def test_scale_gop_roundtrip_shapes(rng):
    gop = random_gop(rng, h=30, w=30)
    down = scale_gop(gop, 3, "down")
    assert (down.height, down.width) == (10, 10)
    up = scale_gop(down, 3, "up", crop=(30, 30))
    assert (up.height, up.width) == (30, 30)

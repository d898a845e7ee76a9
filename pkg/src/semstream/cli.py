"""Command-line driver: encode/decode stream files, run emulated streaming
sessions, ablation comparisons, and micro-benchmarks.

Inputs are either video files (raw-rgb24 or y4m) or built-in synthetic clips
addressed as synth:<name>:<W>x<H>:<frames>[:seed=N]. All commands are
deterministic given their seeds; failures exit nonzero with a single
machine-readable error line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import struct
import sys
import time

import numpy as np

from . import __version__
from . import residual as residual_mod
from .codec import CodecConfig, apply_token_mask, blend_boundary, decode_gop, encode_gop, scale_gop
from .netem import load_trace
from .ratecontrol import HysteresisConfig
from .selection import build_drop_mask, token_similarity, top_k_drop_mask
from .session import SessionConfig, run_streaming_session
from .synth import FramesClip, parse_clip_spec
from .transport import ResidualPacket, packetize_tokens, parse_packet, reassemble
from .video import (GOP_SIZE, gop_psnr, load_raw_video, read_metadata, segment_gops,
                    write_metadata, write_raw_video, boundary_flicker)

STREAM_MAGIC = b"SMST"
STREAM_VERSION = 1

log = logging.getLogger("semstream")


def _configure_logging() -> None:
    """SEMSTREAM_LOG selects verbosity: debug, info, warning (default), quiet."""
    level_name = os.environ.get("SEMSTREAM_LOG", "warning").lower()
    levels = {"debug": logging.DEBUG, "info": logging.INFO,
              "warning": logging.WARNING, "quiet": logging.CRITICAL}
    logging.basicConfig(level=levels.get(level_name, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


class CliError(Exception):
    pass


def _load_clip(spec: str, width: int | None, height: int | None, fmt: str):
    if spec.startswith("synth:"):
        return parse_clip_spec(spec)
    if not os.path.exists(spec):
        raise CliError(f"input not found: {spec}")
    frames = load_raw_video(spec, width, height, fmt)
    if not frames:
        raise CliError(f"input {spec} holds no frames")
    return FramesClip(frames, name=os.path.basename(spec))


# ---------------------------------------------------------------------------
# encode / decode

def _write_packets(fh, packets) -> int:
    total = 0
    for pkt in packets:
        data = pkt.to_bytes()
        fh.write(struct.pack(">I", len(data)))
        fh.write(data)
        total += 4 + len(data)
    return total


def cmd_encode(args) -> int:
    clip = _load_clip(args.input, args.width, args.height, args.format)
    cfg = CodecConfig(scale=args.scale, blend_width=args.blend_width)
    out_path = args.output
    meta_path = out_path + ".meta.json"
    theta = args.theta
    write_metadata(meta_path, clip.width, clip.height, args.fps, clip.frame_count,
                   args.scale, extra={"channels": cfg.channels, "theta": theta,
                                      "quant_step": residual_mod.DEFAULT_QUANT_STEP,
                                      "blend_width": args.blend_width,
                                      "drop_rate": args.drop_rate})
    log.info("encoding %d frames at scale %d", clip.frame_count, args.scale)
    total = 0
    with open(out_path, "wb") as fh:
        fh.write(STREAM_MAGIC + bytes([STREAM_VERSION]))
        for k in range(clip.gop_count):
            working = scale_gop(clip.gop(k), args.scale, "down")
            i_tokens, p_tokens = encode_gop(working, cfg)
            if args.drop_rate > 0.0:
                sim = token_similarity(p_tokens, i_tokens)
                p_tokens = apply_token_mask(p_tokens, build_drop_mask(sim, args.drop_rate))
            packets_i = packetize_tokens(i_tokens, scale=args.scale)
            packets_p = packetize_tokens(p_tokens, scale=args.scale)
            total += _write_packets(fh, packets_i + packets_p)
            if not args.no_residual:
                shape = i_tokens.values.shape
                i_quant = reassemble(packets_i, shape, "I", gop_id=k,
                                     frame_shape=i_tokens.frame_shape)
                p_quant = reassemble(packets_p, shape, "P", gop_id=k,
                                     frame_shape=i_tokens.frame_shape)
                recon = decode_gop(i_quant, p_quant, cfg)
                r = residual_mod.compute_residual(working, recon)
                sr = residual_mod.sparsify_quantize(
                    residual_mod.aggregate_residual(r), theta=theta, gop_id=k)
                if sr.entry_count:
                    payload = residual_mod.encode_payload(sr)
                    pkt = ResidualPacket(gop_id=k, theta=theta,
                                         quant_step=sr.quant_step,
                                         window_length=GOP_SIZE, payload=payload)
                    total += _write_packets(fh, [pkt])
    raw_bits = clip.width * clip.height * 3 * 8 * clip.frame_count
    print(f"encoded {clip.frame_count} frames ({clip.gop_count} GoPs) -> {out_path} "
          f"({total} bytes, {raw_bits / max(total * 8, 1):.1f}x vs raw)")
    return 0


def _read_stream(path: str):
    data = open(path, "rb").read()
    if data[:5] != STREAM_MAGIC + bytes([STREAM_VERSION]):
        raise CliError(f"{path}: not a semstream stream file")
    pos = 5
    packets = []
    while pos < len(data):
        if pos + 4 > len(data):
            raise CliError(f"{path}: truncated packet length at byte {pos}")
        (n,) = struct.unpack(">I", data[pos:pos + 4])
        pos += 4
        if pos + n > len(data):
            raise CliError(f"{path}: truncated packet at byte {pos}")
        packets.append(parse_packet(data[pos:pos + n]))
        pos += n
    return packets


def cmd_decode(args) -> int:
    meta = read_metadata(args.input + ".meta.json")
    packets = _read_stream(args.input)
    cfg = CodecConfig(scale=meta["scale"],
                      blend_width=meta.get("codec", {}).get("blend_width", 2))
    scale = meta["scale"]
    work_h, work_w = -(-meta["height"] // scale), -(-meta["width"] // scale)
    from .codec import token_grid_shape
    h_tok, w_tok = token_grid_shape(work_h, work_w)
    channels = meta.get("codec", {}).get("channels", cfg.channels)

    by_gop: dict = {}
    for pkt in packets:
        by_gop.setdefault(pkt.gop_id, []).append(pkt)

    frames_out = []
    prev = None
    for k in sorted(by_gop):
        group = by_gop[k]
        i_pkts = [p for p in group if getattr(p, "kind", "") == "I"]
        p_pkts = [p for p in group if getattr(p, "kind", "") == "P"]
        residual_pkts = [p for p in group if isinstance(p, ResidualPacket)]
        i_tokens = reassemble(i_pkts, (h_tok, w_tok, channels), "I", gop_id=k,
                              frame_shape=(work_h, work_w))
        p_tokens = reassemble(p_pkts, (h_tok, w_tok, channels), "P", gop_id=k,
                              frame_shape=(work_h, work_w))
        recon = decode_gop(i_tokens, p_tokens, cfg)
        if residual_pkts:
            rp = residual_pkts[0]
            sr = residual_mod.decode_payload(rp.payload, (work_h, work_w, 3),
                                             rp.theta, rp.quant_step,
                                             rp.window_length, gop_id=k)
            recon = residual_mod.apply_residual(recon, sr)
        recon = scale_gop(recon, scale, "up", crop=(meta["height"], meta["width"]))
        if prev is not None:
            recon = blend_boundary(prev, recon, cfg.blend_width)
        prev = recon
        frames_out.extend(recon.frames)

    frames_out = frames_out[:meta["frame_count"]]
    write_raw_video(args.output, frames_out)
    print(f"decoded {len(frames_out)} frames -> {args.output}")

    if args.reference:
        ref = _load_clip(args.reference, meta["width"], meta["height"], args.format)
        gops_ref = [ref.gop(k) for k in range(ref.gop_count)]
        gops_out = segment_gops(frames_out)
        vals = [gop_psnr(rg, og)[0] for rg, og in zip(gops_ref, gops_out)]
        print(f"psnr_db mean {np.mean(vals):.3f} min {np.min(vals):.3f}")
    return 0


# ---------------------------------------------------------------------------
# stream / ablate / bench

def cmd_stream(args) -> int:
    from . import report
    clip = _load_clip(args.input, args.width, args.height, args.format)
    trace = load_trace(args.trace)
    hyst = HysteresisConfig(enabled=not args.no_hysteresis)
    cfg = SessionConfig(clip=clip, trace=trace, fps=args.fps,
                        loss_rate=args.loss_rate, seed=args.seed,
                        prop_delay_ms=args.prop_delay,
                        playout_offset_ms=args.playout_offset,
                        theta=args.theta, hysteresis=hyst,
                        duration_ms=args.duration * 1000.0 if args.duration else None)
    log.info("streaming %s over %s (loss %.2f, seed %d)", args.input, args.trace,
             args.loss_rate, args.seed)
    result = run_streaming_session(cfg)
    paths = report.write_session_outputs(result, args.out_dir,
                                         figures=not args.no_figures)
    stats = report.tracking_stats(result, trace)
    summary = {
        "gops_decoded": len(result.records),
        "rendered_fps": round(result.rendered_fps, 3),
        "delay_within_150ms": round(result.delay_fraction_within(150.0), 4),
        "mean_psnr_db": round(float(np.mean([r.psnr_db for r in result.records])), 3)
        if result.records else 0.0,
        "nacks": result.log.count("nack"),
        "tracked_fraction": round(stats["tracked_fraction"], 4),
        "outputs": paths,
    }
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    import csv
    from . import report
    clip = _load_clip(args.input, args.width, args.height, args.format)
    cfg = CodecConfig(scale=args.scale)
    rng_seeds = range(args.seeds)
    drop_fraction = args.drop_fraction
    rows = []
    mse_sim_all, mse_rand_all = [], []
    flicker_on, flicker_off = [], []
    prev_blend, prev_raw = None, None
    for k in range(clip.gop_count):
        gop = clip.gop(k)
        working = scale_gop(gop, args.scale, "down")
        i_tokens, p_tokens = encode_gop(working, cfg)
        sim = token_similarity(p_tokens, i_tokens)
        n_drop = int(round(drop_fraction * sim.values.size))
        sim_mask = top_k_drop_mask(sim, n_drop)
        recon_sim = decode_gop(i_tokens, apply_token_mask(p_tokens, sim_mask), cfg)
        up_sim = scale_gop(recon_sim, args.scale, "up", crop=(clip.height, clip.width))
        _, mse_sim = gop_psnr(gop, up_sim)
        mse_sim_all.append(mse_sim)

        rand_mses = []
        for s in rng_seeds:
            rng = np.random.default_rng((args.seed, k, s))
            flat = np.zeros(sim.values.size, dtype=bool)
            flat[rng.choice(sim.values.size, size=n_drop, replace=False)] = True
            recon_rand = decode_gop(i_tokens,
                                    apply_token_mask(p_tokens, flat.reshape(sim.values.shape)),
                                    cfg)
            up_rand = scale_gop(recon_rand, args.scale, "up",
                                crop=(clip.height, clip.width))
            rand_mses.append(gop_psnr(gop, up_rand)[1])
        mse_rand_all.append(float(np.mean(rand_mses)))

        # blend on/off comparison on the undropped reconstruction
        recon_full = scale_gop(decode_gop(i_tokens, p_tokens, cfg), args.scale, "up",
                               crop=(clip.height, clip.width))
        if prev_raw is not None:
            flicker_off.append(boundary_flicker(prev_raw, recon_full, cfg.blend_width))
            blended = blend_boundary(prev_blend, recon_full, cfg.blend_width)
            flicker_on.append(boundary_flicker(prev_blend, blended, cfg.blend_width))
        else:
            blended = recon_full
        prev_raw = recon_full
        prev_blend = blended
        rows.append([k, f"{mse_sim:.8f}", f"{mse_rand_all[-1]:.8f}",
                     f"{flicker_off[-1]:.8f}" if k else "",
                     f"{flicker_on[-1]:.8f}" if k else ""])

    os.makedirs(args.out_dir, exist_ok=True)
    csv_path = os.path.join(args.out_dir, "ablation.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["gop_id", "mse_similarity_drop", "mse_random_drop",
                         "boundary_flicker_raw", "boundary_flicker_blended"])
        writer.writerows(rows)
    summary = {
        "drop_fraction": drop_fraction,
        "mean_mse_similarity": float(np.mean(mse_sim_all)),
        "mean_mse_random": float(np.mean(mse_rand_all)),
        "mean_flicker_raw": float(np.mean(flicker_off)) if flicker_off else 0.0,
        "mean_flicker_blended": float(np.mean(flicker_on)) if flicker_on else 0.0,
        "csv": csv_path,
    }
    if not args.no_figures:
        from .report import render_ablation_figure
        summary["figure"] = render_ablation_figure(
            [("similarity drop", summary["mean_mse_similarity"]),
             ("random drop", summary["mean_mse_random"])],
            os.path.join(args.out_dir, "ablation.png"))
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_bench(args) -> int:
    from . import rangecoder
    clip = parse_clip_spec(f"synth:moving-square:{args.width}x{args.height}:9:seed=1")
    gop = clip.gop(0)
    cfg = CodecConfig()
    working = scale_gop(gop, 3, "down")
    n = args.iterations

    t0 = time.perf_counter()
    for _ in range(n):
        i_tokens, p_tokens = encode_gop(working, cfg)
    t_enc = (time.perf_counter() - t0) / n
    t0 = time.perf_counter()
    for _ in range(n):
        decode_gop(i_tokens, p_tokens, cfg)
    t_dec = (time.perf_counter() - t0) / n

    rng = np.random.default_rng(0)
    dense = rng.integers(-30, 31, size=100_000).astype(np.int16)
    dense[rng.random(100_000) < 0.9] = 0
    t0 = time.perf_counter()
    payload = rangecoder.encode_scan(dense)
    t_coder = time.perf_counter() - t0

    print(f"encode_gop: {t_enc * 1000:.1f} ms/GoP ({GOP_SIZE / t_enc:.0f} fps)")
    print(f"decode_gop: {t_dec * 1000:.1f} ms/GoP ({GOP_SIZE / t_dec:.0f} fps)")
    print(f"range coder: {len(payload)} bytes from 100k symbols scan in {t_coder:.2f} s")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semstream",
                                     description="Loss-resilient semantic-token video streaming")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_input(p):
        p.add_argument("input", help="video path or synth:<name>:<W>x<H>:<frames>[:seed=N]")
        p.add_argument("--format", default="raw-rgb24", choices=["raw-rgb24", "y4m"])
        p.add_argument("--width", type=int, default=None)
        p.add_argument("--height", type=int, default=None)

    p = sub.add_parser("encode", help="encode a video into a token+residual stream file")
    add_input(p)
    p.add_argument("output")
    p.add_argument("--scale", type=int, default=2, choices=[2, 3])
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--theta", type=float, default=residual_mod.DEFAULT_THETA)
    p.add_argument("--drop-rate", type=float, default=0.0)
    p.add_argument("--blend-width", type=int, default=2)
    p.add_argument("--no-residual", action="store_true")
    p.set_defaults(fn=cmd_encode)

    p = sub.add_parser("decode", help="decode a stream file back to raw-rgb24")
    p.add_argument("input", help="stream file (expects <input>.meta.json sidecar)")
    p.add_argument("output")
    p.add_argument("--reference", default=None, help="original video for PSNR")
    p.add_argument("--format", default="raw-rgb24", choices=["raw-rgb24", "y4m"])
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("stream", help="run an emulated streaming session")
    add_input(p)
    p.add_argument("--trace", required=True, help="mahimahi trace file")
    p.add_argument("--out-dir", default="stream-out")
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--loss-rate", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prop-delay", type=float, default=20.0)
    p.add_argument("--playout-offset", type=float, default=120.0)
    p.add_argument("--theta", type=float, default=residual_mod.DEFAULT_THETA)
    p.add_argument("--duration", type=float, default=None, help="seconds")
    p.add_argument("--no-hysteresis", action="store_true")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(fn=cmd_stream)

    p = sub.add_parser("ablate", help="similarity-vs-random dropping and blending ablation")
    add_input(p)
    p.add_argument("--out-dir", default="ablate-out")
    p.add_argument("--scale", type=int, default=2, choices=[2, 3])
    p.add_argument("--drop-fraction", type=float, default=0.5)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("bench", help="encode/decode and coder micro-benchmarks")
    p.add_argument("--width", type=int, default=640)
    p.add_argument("--height", type=int, default=480)
    p.add_argument("--iterations", type=int, default=5)
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    log.debug("command %s", args.command)
    try:
        return args.fn(args)
    except (CliError, OSError, ValueError) as exc:
        print(json.dumps({"error": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

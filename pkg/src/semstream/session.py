"""End-to-end streaming session: a paced sender and a deadline-driven
receiver wired through the emulated forward/reverse links.

The sender encodes one GoP per period under the controller's current
decision (scale, token dropping, residual budget) and answers nacks from a
small retransmission cache. The receiver reassembles rows with zero-fill,
decodes at a fixed playout deadline (one nack round at most), feeds the
bandwidth estimator from delivery events, and reports the estimate every
100 ms over the reverse link.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import residual as residual_mod
from .codec import (CodecConfig, apply_token_mask, blend_boundary, decode_gop,
                    encode_gop, scale_gop, token_grid_shape)
from .netem import EmulatedLink, EventLog, LinkTrace, constant_trace, run_session
from .ratecontrol import (BandwidthEstimator, HysteresisConfig, Mode, RateController,
                          compute_anchors)
from .rangecoder import CorruptStreamError
from .selection import build_drop_mask, token_similarity
from .transport import (BwReportPacket, GopAssembly, NackPacket, PacketFormatError,
                        ResidualPacket, TokenPacket, loss_policy, packetize_tokens,
                        parse_packet, reassemble, residual_packet_overhead)
from .video import GOP_SIZE, boundary_flicker, gop_psnr

SENDER_CACHE_GOPS = 4


@dataclass
class SessionConfig:
    clip: object
    trace: LinkTrace
    fps: float = 30.0
    reverse_trace: LinkTrace | None = None
    loss_rate: float = 0.0
    seed: int = 0
    prop_delay_ms: float = 20.0
    playout_offset_ms: float = 120.0
    nack_check_ms: float | None = None
    report_interval_ms: float = 100.0
    blend_width: int = 2
    theta: float = residual_mod.DEFAULT_THETA
    quant_step: float = residual_mod.DEFAULT_QUANT_STEP
    residual_max_bytes: int = 50_000
    # Fraction of the residual budget actually spent: the headroom lets a
    # standing queue drain after a capacity down-step.
    budget_fill: float = 0.95
    queue_bytes: int = 60_000
    hysteresis: HysteresisConfig = field(default_factory=HysteresisConfig)
    initial_mode: Mode = Mode.LOW
    retransmit_threshold: float = 0.5
    count_jointly: bool = True
    duration_ms: float | None = None
    # Tokenizer plug-in points: any pair honoring the
    # encode(GoP, CodecConfig) -> (TokenMatrix, TokenMatrix) /
    # decode((i, p), CodecConfig) -> GoP contract is accepted by the stack.
    tokenizer_encode: object = None
    tokenizer_decode: object = None

    @property
    def gop_period_ms(self) -> float:
        return GOP_SIZE * 1000.0 / self.fps

    @property
    def nack_check_offset_ms(self) -> float:
        if self.nack_check_ms is not None:
            return self.nack_check_ms
        return max(self.playout_offset_ms - 2.0 * self.prop_delay_ms - 10.0, 30.0)


@dataclass
class GopRecord:
    gop_id: int
    time_ms: float
    mode: str
    scale: int
    drop_rate: float
    sent_bps: float
    estimated_bps: float
    rows_lost: int
    nacks: int
    psnr_db: float
    boundary_flicker: float
    frame_delay_ms: float
    rendered_fps: float


@dataclass
class SessionResult:
    config: SessionConfig
    records: list
    log: EventLog
    rendered_frames: int

    @property
    def content_duration_s(self) -> float:
        return self.config.clip.frame_count / self.config.fps

    @property
    def rendered_fps(self) -> float:
        return self.rendered_frames / self.content_duration_s

    def delay_fraction_within(self, limit_ms: float) -> float:
        if not self.records:
            return 0.0
        ok = sum(1 for r in self.records if r.frame_delay_ms <= limit_ms)
        return ok / len(self.records)


class StreamSender:
    def __init__(self, cfg: SessionConfig):
        self.cfg = cfg
        self.codec_cfg = CodecConfig(blend_width=cfg.blend_width)
        self.encode = cfg.tokenizer_encode or encode_gop
        self.decode = cfg.tokenizer_decode or decode_gop
        self.anchors = compute_anchors(cfg.clip.width, cfg.clip.height, cfg.fps,
                                       self.codec_cfg)
        self.controller = RateController(self.anchors, cfg.hysteresis,
                                         initial_mode=cfg.initial_mode)
        self.sent_bytes: dict = {}
        self.decisions: dict = {}
        self._cache: dict = {}  # gop_id -> {(kind, row): TokenPacket}
        self.api = None

    def start(self, api) -> None:
        self.api = api
        api.call_at(0.0, self._send_gop, 0)

    # -- encoding path

    def _send_gop(self, k: int) -> None:
        cfg = self.cfg
        decision = self.controller.last_decision
        self.decisions[k] = decision
        gop = cfg.clip.gop(k)
        working = scale_gop(gop, decision.scale, "down")
        i_tokens, p_tokens = self.encode(working, self.codec_cfg)
        if decision.drop_rate > 0.0:
            sim = token_similarity(p_tokens, i_tokens)
            p_tokens = apply_token_mask(p_tokens, build_drop_mask(sim, decision.drop_rate))

        packets_i = packetize_tokens(i_tokens, scale=decision.scale)
        packets_p = packetize_tokens(p_tokens, scale=decision.scale)
        packets = packets_i + packets_p
        residual_packet = None
        if decision.residual_budget > 0.0:
            residual_packet = self._make_residual(k, working, i_tokens, packets_i,
                                                  packets_p, decision)

        total = 0
        cache = {}
        for pkt in packets:
            data = pkt.to_bytes()
            cache[(pkt.kind, pkt.row_index)] = data
            self.api.send(data, gop_id=k, kind=pkt.kind, row=pkt.row_index)
            total += len(data)
        if residual_packet is not None:
            data = residual_packet.to_bytes()
            self.api.send(data, gop_id=k, kind="R")
            total += len(data)
        self.sent_bytes[k] = total
        self._cache[k] = cache
        for old in [g for g in self._cache if g <= k - SENDER_CACHE_GOPS]:
            del self._cache[old]

        if k + 1 < cfg.clip.gop_count:
            self.api.call_at((k + 1) * cfg.gop_period_ms, self._send_gop, k + 1)

    def _make_residual(self, k: int, working, i_tokens, packets_i, packets_p, decision):
        cfg = self.cfg
        budget_bytes = int(decision.residual_budget * cfg.budget_fill
                           * cfg.gop_period_ms / 8000.0)
        budget_bytes = min(budget_bytes, cfg.residual_max_bytes) - residual_packet_overhead()
        if budget_bytes <= 0:
            return None
        # Mirror the receiver exactly: decode from wire-quantized tokens, not
        # the pristine ones, so the residual corrects what actually arrives.
        shape = i_tokens.values.shape
        i_quant = reassemble(packets_i, shape, "I", gop_id=k,
                             frame_shape=i_tokens.frame_shape)
        p_quant = reassemble(packets_p, shape, "P", gop_id=k,
                             frame_shape=i_tokens.frame_shape)
        recon = self.decode(i_quant, p_quant, self.codec_cfg)
        frames_r = residual_mod.compute_residual(working, recon)
        avg = residual_mod.aggregate_residual(frames_r)
        sr, payload, theta = residual_mod.fit_to_budget(
            avg, budget_bytes, quant_step=cfg.quant_step, theta_floor=cfg.theta,
            gop_id=k, window_length=GOP_SIZE)
        if sr is None or sr.entry_count == 0:
            return None
        return ResidualPacket(gop_id=k, theta=float(sr.theta), quant_step=cfg.quant_step,
                              window_length=GOP_SIZE, payload=payload)

    # -- feedback path

    def on_wire(self, nbytes: int, now: float) -> None:
        pass  # the sender does not estimate the reverse path

    def on_packet(self, data: bytes, now: float) -> None:
        try:
            pkt = parse_packet(data)
        except PacketFormatError:
            self.api.log("corrupt")
            return
        if isinstance(pkt, BwReportPacket):
            prev_mode = self.controller.mode
            self.controller.update(float(pkt.bandwidth_bps))
            self.api.log("bw_report", nbytes=int(pkt.bandwidth_bps))
            if self.controller.mode != prev_mode:
                self.api.log("mode", kind=str(self.controller.mode),
                             row=self.controller.last_decision.scale)
        elif isinstance(pkt, NackPacket):
            cache = self._cache.get(pkt.gop_id, {})
            for kind, row in pkt.missing:
                data = cache.get((kind, row))
                if data is not None:
                    self.api.send(data, gop_id=pkt.gop_id, kind=kind, row=row)


class StreamReceiver:
    def __init__(self, cfg: SessionConfig, metrics_clip=None):
        self.cfg = cfg
        self.codec_cfg = CodecConfig(blend_width=cfg.blend_width)
        self.decode = cfg.tokenizer_decode or decode_gop
        self.estimator = BandwidthEstimator(report_interval_ms=cfg.report_interval_ms)
        self.assemblies: dict = {}
        self.records: list = []
        self.nack_counts: dict = {}
        self.rendered_frames = 0
        self.metrics_clip = metrics_clip if metrics_clip is not None else cfg.clip
        self._prev_recon = None
        self.api = None

    def start(self, api) -> None:
        self.api = api
        cfg = self.cfg
        api.call_at(cfg.report_interval_ms, self._report_tick)
        for k in range(cfg.clip.gop_count):
            base = k * cfg.gop_period_ms
            api.call_at(base + cfg.nack_check_offset_ms, self._nack_check, k)
            api.call_at(base + cfg.playout_offset_ms, self._decode, k)

    # -- assembly

    def _assembly_for(self, pkt: TokenPacket) -> GopAssembly:
        asm = self.assemblies.get(pkt.gop_id)
        work_h = -(-self.cfg.clip.height // pkt.scale)
        work_w = -(-self.cfg.clip.width // pkt.scale)
        h_tok, w_tok = token_grid_shape(work_h, work_w)
        if asm is None or asm.height_tokens != h_tok or asm.width_tokens != w_tok:
            nacked = asm.nacked if asm is not None else False
            asm = GopAssembly(gop_id=pkt.gop_id, height_tokens=h_tok, width_tokens=w_tok,
                              channels=pkt.channels,
                              deadline=pkt.gop_id * self.cfg.gop_period_ms
                              + self.cfg.playout_offset_ms,
                              frame_shape=(work_h, work_w), scale=pkt.scale)
            asm.nacked = nacked
            self.assemblies[pkt.gop_id] = asm
        return asm

    def _default_assembly(self, k: int) -> GopAssembly:
        work_h = -(-self.cfg.clip.height // 3)
        work_w = -(-self.cfg.clip.width // 3)
        h_tok, w_tok = token_grid_shape(work_h, work_w)
        return GopAssembly(gop_id=k, height_tokens=h_tok, width_tokens=w_tok,
                           channels=self.codec_cfg.channels,
                           deadline=k * self.cfg.gop_period_ms + self.cfg.playout_offset_ms,
                           frame_shape=(work_h, work_w), scale=3)

    def on_wire(self, nbytes: int, now: float) -> None:
        self.estimator.on_delivered(nbytes, now)

    def on_packet(self, data: bytes, now: float) -> None:
        try:
            pkt = parse_packet(data)
        except PacketFormatError:
            self.api.log("corrupt")
            return
        if isinstance(pkt, TokenPacket):
            self._assembly_for(pkt).add_packet(pkt)
        elif isinstance(pkt, ResidualPacket):
            asm = self.assemblies.get(pkt.gop_id)
            if asm is None:
                return  # residual without any token context: nothing to enhance
            h, w = asm.frame_shape
            try:
                asm.residual = residual_mod.decode_payload(
                    pkt.payload, (h, w, 3), pkt.theta, pkt.quant_step,
                    pkt.window_length, gop_id=pkt.gop_id)
            except CorruptStreamError:
                self.api.log("corrupt", gop_id=pkt.gop_id, kind="R")

    # -- timers

    def _report_tick(self) -> None:
        now = self.api.now
        self.estimator.on_tick(now)
        bw = self.estimator.maybe_report(now)
        if bw is not None and bw > 0.0:
            pkt = BwReportPacket(timestamp_ms=int(now), bandwidth_bps=int(bw))
            self.api.send(pkt.to_bytes(), kind="BW")
        self.api.call_at(now + self.cfg.report_interval_ms, self._report_tick)

    def _nack_check(self, k: int) -> None:
        asm = self.assemblies.get(k)
        if asm is None:
            return  # nothing arrived yet; dimensions unknown, deadline will zero-fill
        if asm.received_rows >= asm.expected_rows:
            return
        decision = loss_policy(asm, self.api.now,
                               threshold=self.cfg.retransmit_threshold,
                               count_jointly=self.cfg.count_jointly)
        if decision.action == "nack":
            asm.nacked = True
            self.nack_counts[k] = self.nack_counts.get(k, 0) + 1
            self.api.send(NackPacket(gop_id=k, missing=decision.missing).to_bytes(),
                          gop_id=k, kind="NACK")
            self.api.log("nack", gop_id=k, nbytes=len(decision.missing))

    def _decode(self, k: int) -> None:
        cfg = self.cfg
        now = self.api.now
        asm = self.assemblies.get(k)
        if asm is None:
            asm = self._default_assembly(k)
            self.assemblies[k] = asm
        policy = loss_policy(asm, now, threshold=cfg.retransmit_threshold,
                             count_jointly=cfg.count_jointly)
        if policy.skip_residual:
            self.api.log("skip_residual", gop_id=k)

        i_tokens, p_tokens = asm.assemble()
        recon = self.decode(i_tokens, p_tokens, self.codec_cfg)
        recon = residual_mod.apply_residual(recon, asm.residual)
        recon = scale_gop(recon, asm.scale, "up",
                          crop=(cfg.clip.height, cfg.clip.width))
        if self._prev_recon is not None:
            recon = blend_boundary(self._prev_recon, recon, cfg.blend_width)

        flicker = 0.0
        if self._prev_recon is not None:
            flicker = boundary_flicker(self._prev_recon, recon, cfg.blend_width)
        source = self.metrics_clip.gop(k)
        psnr_db, _ = gop_psnr(source, recon)
        self._prev_recon = recon

        real_frames = min(GOP_SIZE, cfg.clip.frame_count - k * GOP_SIZE)
        self.rendered_frames += max(real_frames, 0)
        frame_delay = now - (k * cfg.gop_period_ms + cfg.prop_delay_ms)
        fps_so_far = self.rendered_frames * 1000.0 / (now - cfg.playout_offset_ms
                                                      + cfg.gop_period_ms)
        self.records.append(GopRecord(
            gop_id=k, time_ms=now, mode="", scale=asm.scale, drop_rate=0.0,
            sent_bps=0.0, estimated_bps=0.0,
            rows_lost=asm.expected_rows - asm.received_rows,
            nacks=self.nack_counts.get(k, 0), psnr_db=psnr_db,
            boundary_flicker=flicker, frame_delay_ms=frame_delay,
            rendered_fps=fps_so_far))
        self.api.log("decode", gop_id=k, row=asm.expected_rows - asm.received_rows,
                     nbytes=asm.received_rows)


def run_streaming_session(cfg: SessionConfig) -> SessionResult:
    """Run a full deterministic sender/receiver session and merge per-GoP
    sender state (mode, rates) into the receiver's records."""
    sender = StreamSender(cfg)
    receiver = StreamReceiver(cfg)
    link_fwd = EmulatedLink(cfg.trace, loss_rate=cfg.loss_rate, seed=cfg.seed,
                            prop_delay_ms=cfg.prop_delay_ms, queue_bytes=cfg.queue_bytes)
    rev_trace = cfg.reverse_trace or constant_trace(10_000_000)
    link_rev = EmulatedLink(rev_trace, loss_rate=0.0, seed=cfg.seed + 1,
                            prop_delay_ms=cfg.prop_delay_ms, queue_bytes=cfg.queue_bytes)
    duration = cfg.duration_ms
    if duration is None:
        duration = cfg.clip.gop_count * cfg.gop_period_ms + cfg.playout_offset_ms + 1000.0
    log = run_session(sender, receiver, link_fwd, link_rev, duration)

    gop_period_s = cfg.gop_period_ms / 1000.0
    for rec in receiver.records:
        decision = sender.decisions.get(rec.gop_id)
        if decision is not None:
            rec.mode = str(decision.mode)
            rec.drop_rate = decision.drop_rate
            rec.estimated_bps = decision.b_avail
            rec.scale = decision.scale
        rec.sent_bps = sender.sent_bytes.get(rec.gop_id, 0) * 8.0 / gop_period_s
    return SessionResult(config=cfg, records=receiver.records, log=log,
                         rendered_frames=receiver.rendered_frames)

"""Bit-exact packetization of token matrices and residuals, receiver-side
reassembly with zero-fill, and the hybrid loss policy.

Wire format (all integers big-endian, reals IEEE-754 big-endian float32,
trailer crc32 = CRC-32/ISO-HDLC over everything preceding it):

    token packet    magic u16 | version u8 | kind u8 (0=I, 1=P) | gop_id u32
                    | row u16 | width_tokens u16 | channels u8 | scale u8
                    | quant_min f32 | quant_range f32
                    | mask ceil(W'/8) bytes, MSB first, 1 = valid token
                    | payload popcount(mask)*C bytes | crc32 u32
    residual (2)    magic u16 | version u8 | kind u8 | gop_id u32 | theta f32
                    | quant_step f32 | window u8 | payload_len u32
                    | payload | crc32 u32
    nack (3)        magic u16 | version u8 | kind u8 | gop_id u32 | count u16
                    | count * (kind u8, row u16) | crc32 u32
    bw-report (4)   magic u16 | version u8 | kind u8 | timestamp_ms u64
                    | bandwidth u32 bits/s | crc32 u32
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .codec import TokenMatrix
from .residual import SparseResidual

MAGIC = 0x4D53
VERSION = 1

KIND_I = 0
KIND_P = 1
KIND_RESIDUAL = 2
KIND_NACK = 3
KIND_BW_REPORT = 4

_KIND_TO_NAME = {KIND_I: "I", KIND_P: "P"}
_NAME_TO_KIND = {"I": KIND_I, "P": KIND_P}

_TOKEN_HDR = struct.Struct(">HBBIHHBBff")
_RESIDUAL_HDR = struct.Struct(">HBBIffBI")
_NACK_HDR = struct.Struct(">HBBIH")
_BW_HDR = struct.Struct(">HBBQI")

RETRANSMIT_THRESHOLD = 0.5


class PacketFormatError(ValueError):
    """Packet bytes failed structural or checksum validation."""


def _crc(data: bytes) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


def _seal(body: bytes) -> bytes:
    return body + struct.pack(">I", _crc(body))


def _check_seal(data: bytes) -> bytes:
    if len(data) < 4:
        raise PacketFormatError("packet shorter than its checksum")
    body, crc = data[:-4], struct.unpack(">I", data[-4:])[0]
    if _crc(body) != crc:
        raise PacketFormatError("crc32 mismatch")
    return body


def _pack_mask(mask_row: np.ndarray) -> bytes:
    return np.packbits(mask_row.astype(np.uint8)).tobytes()


def _unpack_mask(data: bytes, width: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))
    return bits[:width].astype(bool)


@dataclass(frozen=True)
class TokenPacket:
    """One row of a token matrix with its position mask and quantized payload."""

    kind: str
    gop_id: int
    row_index: int
    width_tokens: int
    channels: int
    scale: int
    quant_min: float
    quant_range: float
    mask: np.ndarray
    payload: bytes

    def to_bytes(self) -> bytes:
        body = _TOKEN_HDR.pack(MAGIC, VERSION, _NAME_TO_KIND[self.kind], self.gop_id,
                               self.row_index, self.width_tokens, self.channels,
                               self.scale, self.quant_min, self.quant_range)
        body += _pack_mask(self.mask) + self.payload
        return _seal(body)

    @property
    def valid_count(self) -> int:
        return int(np.count_nonzero(self.mask))

    def dequantized(self) -> np.ndarray:
        """(valid_count, C) token vectors recovered from the 8-bit payload."""
        raw = np.frombuffer(self.payload, dtype=np.uint8).astype(np.float64)
        vecs = raw.reshape(self.valid_count, self.channels)
        return self.quant_min + vecs * (self.quant_range / 255.0)


@dataclass(frozen=True)
class ResidualPacket:
    gop_id: int
    theta: float
    quant_step: float
    window_length: int
    payload: bytes

    def to_bytes(self) -> bytes:
        body = _RESIDUAL_HDR.pack(MAGIC, VERSION, KIND_RESIDUAL, self.gop_id,
                                  self.theta, self.quant_step, self.window_length,
                                  len(self.payload))
        return _seal(body + self.payload)


@dataclass(frozen=True)
class NackPacket:
    gop_id: int
    missing: tuple  # of (kind str, row int)

    def to_bytes(self) -> bytes:
        body = _NACK_HDR.pack(MAGIC, VERSION, KIND_NACK, self.gop_id, len(self.missing))
        for kind, row in self.missing:
            body += struct.pack(">BH", _NAME_TO_KIND[kind], row)
        return _seal(body)


@dataclass(frozen=True)
class BwReportPacket:
    timestamp_ms: int
    bandwidth_bps: int

    def to_bytes(self) -> bytes:
        bw = min(max(int(self.bandwidth_bps), 0), 0xFFFFFFFF)
        body = _BW_HDR.pack(MAGIC, VERSION, KIND_BW_REPORT,
                            int(self.timestamp_ms), bw)
        return _seal(body)


def parse_packet(data: bytes):
    """Parse any wire packet, validating magic, version and checksum."""
    body = _check_seal(data)
    if len(body) < 4:
        raise PacketFormatError("packet body too short")
    magic, version, kind = struct.unpack(">HBB", body[:4])
    if magic != MAGIC:
        raise PacketFormatError(f"bad magic 0x{magic:04X}")
    if version != VERSION:
        raise PacketFormatError(f"unsupported version {version}")

    if kind in (KIND_I, KIND_P):
        if len(body) < _TOKEN_HDR.size:
            raise PacketFormatError("token packet header truncated")
        (_, _, _, gop_id, row, width, channels, scale,
         qmin, qrange) = _TOKEN_HDR.unpack(body[:_TOKEN_HDR.size])
        mask_len = (width + 7) // 8
        off = _TOKEN_HDR.size
        if len(body) < off + mask_len:
            raise PacketFormatError("token packet mask truncated")
        mask = _unpack_mask(body[off:off + mask_len], width)
        off += mask_len
        payload = body[off:]
        expected = int(np.count_nonzero(mask)) * channels
        if len(payload) != expected:
            raise PacketFormatError(
                f"payload length {len(payload)} != popcount(mask)*C = {expected}")
        if qrange < 0.0:
            raise PacketFormatError("negative quantization range")
        return TokenPacket(_KIND_TO_NAME[kind], gop_id, row, width, channels,
                           scale, qmin, qrange, mask, payload)

    if kind == KIND_RESIDUAL:
        if len(body) < _RESIDUAL_HDR.size:
            raise PacketFormatError("residual packet header truncated")
        (_, _, _, gop_id, theta, qstep, window,
         plen) = _RESIDUAL_HDR.unpack(body[:_RESIDUAL_HDR.size])
        payload = body[_RESIDUAL_HDR.size:]
        if len(payload) != plen:
            raise PacketFormatError(f"residual payload length {len(payload)} != {plen}")
        return ResidualPacket(gop_id, theta, qstep, window, payload)

    if kind == KIND_NACK:
        if len(body) < _NACK_HDR.size:
            raise PacketFormatError("nack packet header truncated")
        _, _, _, gop_id, count = _NACK_HDR.unpack(body[:_NACK_HDR.size])
        off = _NACK_HDR.size
        if len(body) != off + 3 * count:
            raise PacketFormatError("nack entry list truncated")
        missing = []
        for _ in range(count):
            k, row = struct.unpack(">BH", body[off:off + 3])
            if k not in _KIND_TO_NAME:
                raise PacketFormatError(f"nack entry with bad kind {k}")
            missing.append((_KIND_TO_NAME[k], row))
            off += 3
        return NackPacket(gop_id, tuple(missing))

    if kind == KIND_BW_REPORT:
        if len(body) != _BW_HDR.size:
            raise PacketFormatError("bw-report packet has wrong size")
        _, _, _, ts, bw = _BW_HDR.unpack(body)
        return BwReportPacket(ts, bw)

    raise PacketFormatError(f"unknown packet kind {kind}")


def token_packet_wire_size(width_tokens: int, channels: int,
                           valid_count: int | None = None) -> int:
    """Serialized byte size of one token-row packet."""
    if valid_count is None:
        valid_count = width_tokens
    return _TOKEN_HDR.size + (width_tokens + 7) // 8 + valid_count * channels + 4


def residual_packet_overhead() -> int:
    return _RESIDUAL_HDR.size + 4


# ---------------------------------------------------------------------------
# Packetization / reassembly

def packetize_tokens(m: TokenMatrix, scale: int = 1) -> list[TokenPacket]:
    """One packet per token row, including rows whose mask is all zero
    (header-only, so the receiver can tell sender drops from losses even
    though the decoder treats both identically).

    Per-row quantization: quant_min/quant_range span the valid tokens of that
    row; a constant row serializes with range 0 and all-zero payload bytes.
    """
    h = m.height_tokens
    if h > 0xFFFF:
        raise ValueError(f"matrix has {h} rows; the row index field is 16-bit")
    packets = []
    for row in range(h):
        mask_row = m.mask[row]
        valid = m.values[row][mask_row]
        if valid.size:
            qmin = float(valid.min())
            qrange = float(valid.max() - qmin)
            # float32 wire grid: quantize against the values the receiver
            # will actually read back.
            qmin32 = float(np.float32(qmin))
            qrange32 = float(np.float32(qrange))
            if qrange32 > 0.0:
                levels = np.rint((valid - qmin32) * (255.0 / qrange32))
                payload = np.clip(levels, 0, 255).astype(np.uint8).tobytes()
            else:
                payload = bytes(valid.size)
        else:
            qmin32 = 0.0
            qrange32 = 0.0
            payload = b""
        packets.append(TokenPacket(kind=m.kind, gop_id=m.gop_id, row_index=row,
                                   width_tokens=m.width_tokens, channels=m.channels,
                                   scale=scale, quant_min=qmin32, quant_range=qrange32,
                                   mask=mask_row.copy(), payload=payload))
    return packets


def reassemble(packets, expected: tuple, kind: str, gop_id: int = 0,
               frame_shape: tuple | None = None, stats: dict | None = None) -> TokenMatrix:
    """Rebuild a token matrix from received row packets.

    Valid tokens are dequantized into place with mask=True; masked positions
    and entirely missing rows become zeros with mask=False, so sender-side
    dropping and network loss are indistinguishable downstream. Duplicate
    rows keep the first arrival; rows with out-of-range indices are discarded
    and counted as corrupt.
    """
    h, w, c = expected
    values = np.zeros((h, w, c), dtype=np.float64)
    mask = np.zeros((h, w), dtype=bool)
    seen = set()
    for pkt in packets:
        if pkt.kind != kind or pkt.gop_id != gop_id:
            raise ValueError(f"packet ({pkt.kind}, gop {pkt.gop_id}) does not belong to "
                             f"({kind}, gop {gop_id})")
        if pkt.row_index >= h:
            if stats is not None:
                stats["corrupt"] = stats.get("corrupt", 0) + 1
            continue
        if pkt.row_index in seen:
            continue
        seen.add(pkt.row_index)
        row_mask = pkt.mask[:w]
        if row_mask.any():
            values[pkt.row_index][row_mask] = pkt.dequantized()
        mask[pkt.row_index] = row_mask
    if stats is not None:
        stats["rows_received"] = len(seen)
    return TokenMatrix(kind, values, mask, gop_id=gop_id, frame_shape=frame_shape)


# ---------------------------------------------------------------------------
# Assembly state and loss policy

@dataclass
class GopAssembly:
    """Receiver-side per-GoP reassembly state (single writer per gop_id)."""

    gop_id: int
    height_tokens: int
    width_tokens: int
    channels: int
    deadline: float
    frame_shape: tuple | None = None
    scale: int = 3
    rows_i: dict = field(default_factory=dict)
    rows_p: dict = field(default_factory=dict)
    residual: SparseResidual | None = None
    residual_expected: bool = True
    nacked: bool = False
    corrupt: int = 0

    def add_packet(self, pkt: TokenPacket) -> bool:
        """Insert a token row; first arrival wins. Returns False for corrupt
        or duplicate rows."""
        if pkt.row_index >= self.height_tokens:
            self.corrupt += 1
            return False
        rows = self.rows_i if pkt.kind == "I" else self.rows_p
        if pkt.row_index in rows:
            return False
        rows[pkt.row_index] = pkt
        return True

    @property
    def expected_rows(self) -> int:
        return 2 * self.height_tokens

    @property
    def received_rows(self) -> int:
        return len(self.rows_i) + len(self.rows_p)

    def missing_rows(self) -> list:
        missing = [("I", r) for r in range(self.height_tokens) if r not in self.rows_i]
        missing += [("P", r) for r in range(self.height_tokens) if r not in self.rows_p]
        return missing

    def loss_fraction(self, count_jointly: bool = True) -> float:
        if count_jointly:
            return 1.0 - self.received_rows / self.expected_rows
        return max(1.0 - len(self.rows_i) / self.height_tokens,
                   1.0 - len(self.rows_p) / self.height_tokens)

    def assemble(self) -> tuple:
        shape = (self.height_tokens, self.width_tokens, self.channels)
        i_tokens = reassemble(self.rows_i.values(), shape, "I", self.gop_id,
                              frame_shape=self.frame_shape)
        p_tokens = reassemble(self.rows_p.values(), shape, "P", self.gop_id,
                              frame_shape=self.frame_shape)
        return i_tokens, p_tokens


@dataclass(frozen=True)
class PolicyDecision:
    action: str                 # "decode" or "nack"
    missing: tuple = ()
    skip_residual: bool = False


def loss_policy(assembly: GopAssembly, now: float,
                threshold: float = RETRANSMIT_THRESHOLD,
                count_jointly: bool = True) -> PolicyDecision:
    """Hybrid loss handling: retransmit token rows only when the row-loss
    fraction exceeds the threshold (once per GoP, and only before the
    deadline); a missing residual never blocks decoding."""
    skip_residual = assembly.residual is None
    lost = assembly.loss_fraction(count_jointly)
    if lost > threshold and now < assembly.deadline and not assembly.nacked:
        return PolicyDecision(action="nack", missing=tuple(assembly.missing_rows()),
                              skip_residual=skip_residual)
    return PolicyDecision(action="decode", missing=tuple(assembly.missing_rows()),
                          skip_residual=skip_residual)

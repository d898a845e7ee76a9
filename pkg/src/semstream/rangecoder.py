"""Lossless adaptive range coding of sparse-residual symbol streams.

Symbol alphabet (510 ids):

    id 0          EOS              end of stream (exactly one, at the end)
    id 1..255     ZERO_RUN(k)      k consecutive zeros, k = id
    id 256..382   VALUE(v)         v = id - 383   (v in [-127, -1])
    id 383..509   VALUE(v)         v = id - 382   (v in [1, 127])

The coder is an integer range coder with 32-bit low/range registers and
byte-wise renormalization, driven by an adaptive order-0 frequency model
initialized to all-ones counts and halved whenever the total reaches 2^16.
There is no floating point anywhere in the coding path, so output bytes are
identical across platforms and runs.
"""

from __future__ import annotations

import numpy as np

EOS = 0
MAX_RUN = 255
ALPHABET_SIZE = 510

_PRECISION = 32
_TOP = 1 << (_PRECISION - 8)
_BOTTOM = 1 << (_PRECISION - 16)
_MASK = (1 << _PRECISION) - 1
_MAX_TOTAL = _BOTTOM


class CorruptStreamError(ValueError):
    """Compressed bytes are truncated or otherwise undecodable."""


# ---------------------------------------------------------------------------
# Symbol mapping

def zero_run_symbol(k: int) -> int:
    if not 1 <= k <= MAX_RUN:
        raise ValueError(f"zero-run length must be in [1, {MAX_RUN}], got {k}")
    return k


def value_symbol(v: int) -> int:
    if v == 0 or not -127 <= v <= 127:
        raise ValueError(f"value symbol must be nonzero in [-127, 127], got {v}")
    return v + 383 if v < 0 else v + 382


def symbol_kind(sym: int):
    """('eos', None) | ('run', k) | ('value', v) for a symbol id."""
    if sym == EOS:
        return "eos", None
    if 1 <= sym <= MAX_RUN:
        return "run", sym
    if 256 <= sym <= 382:
        return "value", sym - 383
    if 383 <= sym < ALPHABET_SIZE:
        return "value", sym - 382
    raise ValueError(f"symbol id {sym} outside alphabet")


def validate_stream(symbols) -> None:
    if not symbols:
        raise ValueError("symbol stream must end with EOS")
    for i, sym in enumerate(symbols):
        kind, _ = symbol_kind(int(sym))
        if kind == "eos" and i != len(symbols) - 1:
            raise ValueError(f"EOS at position {i} before end of stream")
    if int(symbols[-1]) != EOS:
        raise ValueError("symbol stream must end with EOS")


def scan_to_symbols(dense) -> list[int]:
    """Lossless symbols for a dense quantized scan in canonical pixel order.

    Trailing zeros are implied by EOS (the scan length is carried out of band).
    """
    dense = np.asarray(dense)
    nz = np.flatnonzero(dense)
    symbols: list[int] = []
    pos = 0
    for idx in nz.tolist():
        gap = idx - pos
        while gap > MAX_RUN:
            symbols.append(MAX_RUN)
            gap -= MAX_RUN
        if gap:
            symbols.append(gap)
        symbols.append(value_symbol(int(dense[idx])))
        pos = idx + 1
    symbols.append(EOS)
    return symbols


def symbols_to_scan(symbols, length: int) -> np.ndarray:
    """Rebuild the dense scan; raises if symbols run past the given length."""
    out = np.zeros(length, dtype=np.int16)
    pos = 0
    for i, sym in enumerate(symbols):
        kind, arg = symbol_kind(int(sym))
        if kind == "eos":
            if i != len(symbols) - 1:
                raise CorruptStreamError(f"EOS at position {i} before end of stream")
            return out
        if kind == "run":
            pos += arg
            if pos > length:
                raise CorruptStreamError(f"zero run overruns scan length {length}")
        else:
            if pos >= length:
                raise CorruptStreamError(f"value overruns scan length {length}")
            out[pos] = arg
            pos += 1
    raise CorruptStreamError("symbol stream missing EOS")


# ---------------------------------------------------------------------------
# Adaptive model

class _AdaptiveModel:
    """Order-0 counts with an incrementally maintained cumulative table."""

    def __init__(self):
        self._counts = np.ones(ALPHABET_SIZE, dtype=np.int64)
        self._rebuild()

    def _rebuild(self):
        self._cum = np.concatenate(([0], np.cumsum(self._counts)))

    def bounds(self, sym: int):
        cum = self._cum
        return int(cum[sym]), int(cum[sym + 1]), int(cum[-1])

    @property
    def total(self) -> int:
        return int(self._cum[-1])

    def find(self, target: int) -> int:
        """Largest symbol whose cumulative low is <= target."""
        return int(np.searchsorted(self._cum, target, side="right")) - 1

    def update(self, sym: int):
        self._counts[sym] += 1
        self._cum[sym + 1:] += 1
        if self._cum[-1] >= _MAX_TOTAL:
            self._counts = (self._counts + 1) // 2
            self._rebuild()


# ---------------------------------------------------------------------------
# Range coder

def encode_stream(symbols) -> bytes:
    """Encode a validated symbol stream into compressed bytes.

    Deterministic: the same input yields the same bytes on every platform.
    """
    validate_stream(symbols)
    model = _AdaptiveModel()
    out = bytearray()
    low = 0
    range_ = _MASK

    for sym in symbols:
        sym = int(sym)
        c, d, total = model.bounds(sym)
        r = range_ // total
        low += c * r
        range_ = (d - c) * r
        # Renormalize: release a byte when the top byte of low and high agree,
        # or when the range underflows below the model's resolution.
        while (low ^ (low + range_)) < _TOP or range_ < _BOTTOM:
            if (low ^ (low + range_)) >= _TOP:
                range_ = (_MASK + 1 - low) & (_BOTTOM - 1)
            out.append((low >> (_PRECISION - 8)) & 0xFF)
            low = (low << 8) & _MASK
            range_ <<= 8
        model.update(sym)

    for _ in range(_PRECISION // 8):
        out.append((low >> (_PRECISION - 8)) & 0xFF)
        low = (low << 8) & _MASK
    return bytes(out)


def decode_stream(data: bytes, max_symbols: int = 1 << 24) -> list[int]:
    """Decode bytes produced by encode_stream back to the exact symbol list.

    Truncated input raises CorruptStreamError; decoding never silently
    returns a wrong stream for bytes the framing checksum accepted.
    """
    model = _AdaptiveModel()
    pos = 0
    n = len(data)

    def next_byte():
        nonlocal pos
        if pos >= n:
            raise CorruptStreamError(
                f"compressed stream truncated at byte {pos} of {n}")
        b = data[pos]
        pos += 1
        return b

    state = 0
    for _ in range(_PRECISION // 8):
        state = (state << 8) | next_byte()
    low = 0
    range_ = _MASK
    symbols: list[int] = []

    while True:
        total = model.total
        r = range_ // total
        val = (state - low) // r
        if val >= total:
            val = total - 1
        sym = model.find(val)
        symbols.append(sym)
        c, d, _ = model.bounds(sym)
        low += c * r
        range_ = (d - c) * r
        while (low ^ (low + range_)) < _TOP or range_ < _BOTTOM:
            if (low ^ (low + range_)) >= _TOP:
                range_ = (_MASK + 1 - low) & (_BOTTOM - 1)
            state = ((state << 8) | next_byte()) & _MASK
            low = (low << 8) & _MASK
            range_ <<= 8
        model.update(sym)
        if sym == EOS:
            return symbols
        if len(symbols) >= max_symbols:
            raise CorruptStreamError("symbol budget exceeded before EOS")


def encode_scan(dense) -> bytes:
    return encode_stream(scan_to_symbols(dense))


def decode_scan(data: bytes, length: int) -> np.ndarray:
    return symbols_to_scan(decode_stream(data), length)

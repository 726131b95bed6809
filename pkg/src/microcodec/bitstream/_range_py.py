"""Pure-Python range coder backend.

Byte-oriented range coder with carry counting (the LZMA ShiftLow scheme):
32-bit range, 33-bit low with explicit carry propagation through a cached
byte plus a run of pending 0xFF bytes. Tables are cumulative frequencies in
1/65536 units with the final entry exactly 65536.

The compiled twin in ``_range_cy.pyx`` implements the same functions and
must produce byte-identical streams; keep the two in lockstep.
"""

from __future__ import annotations

import numpy as np

from ..errors import CorruptStreamError, SymbolOutOfSupportError

TOTAL = 1 << 16
TOP = 1 << 24
MASK32 = 0xFFFFFFFF

# Uniform table over single bytes, used to bypass-code escape payloads.
_BYTE_CDF = np.arange(257, dtype=np.uint32) * 256


class _Encoder:
    __slots__ = ("low", "range", "cache", "cache_size", "out")

    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self):
        if self.low < 0xFF000000 or self.low > MASK32:
            carry = self.low >> 32
            out = self.out
            out.append((self.cache + carry) & 0xFF)
            for _ in range(self.cache_size - 1):
                out.append((0xFF + carry) & 0xFF)
            self.cache_size = 0
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low << 8) & MASK32

    def encode(self, cum: int, freq: int):
        r = self.range // TOTAL
        self.low += r * cum
        self.range = r * freq
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class _Decoder:
    __slots__ = ("data", "pos", "range", "code")

    def __init__(self, data: bytes):
        if len(data) < 5:
            raise CorruptStreamError("range-coded stream shorter than flush")
        if data[0] != 0:
            raise CorruptStreamError("bad range-coder lead byte")
        self.data = data
        self.pos = 1  # first byte is the encoder's initial zero cache byte
        self.range = MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next_byte()

    def _next_byte(self) -> int:
        if self.pos >= len(self.data):
            raise CorruptStreamError("range-coded stream truncated")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def decode_target(self) -> int:
        self.range //= TOTAL
        t = self.code // self.range
        return TOTAL - 1 if t > TOTAL - 1 else t

    def consume(self, cum: int, freq: int):
        self.code -= cum * self.range
        self.range *= freq
        while self.range < TOP:
            self.code = ((self.code << 8) | self._next_byte()) & 0xFFFFFFFFFF
            self.range <<= 8


def _find_symbol(row, nsym: int, target: int) -> int:
    """Largest s in [0, nsym) with row[s] <= target (binary search on the CDF)."""
    lo, hi = 0, nsym
    while hi - lo > 1:
        mid = (lo + hi) >> 1
        if row[mid] <= target:
            lo = mid
        else:
            hi = mid
    return lo


def encode_symbols(symbols, cdf, nsyms, ctx) -> bytes:
    enc = _Encoder()
    cdf_l = cdf
    for i in range(len(symbols)):
        c = ctx[i]
        s = symbols[i]
        if s < 0 or s >= nsyms[c]:
            raise SymbolOutOfSupportError(f"symbol {s} outside table support [0, {nsyms[c]})")
        row = cdf_l[c]
        enc.encode(int(row[s]), int(row[s + 1]) - int(row[s]))
    return enc.finish()


def decode_symbols(data: bytes, cdf, nsyms, ctx, count: int):
    dec = _Decoder(data)
    out = np.empty(count, dtype=np.int32)
    for i in range(count):
        c = ctx[i]
        row = cdf[c]
        s = _find_symbol(row, int(nsyms[c]), dec.decode_target())
        dec.consume(int(row[s]), int(row[s + 1]) - int(row[s]))
        out[i] = s
    return out


def _encode_bypass_u32(enc: _Encoder, value: int):
    for shift in (0, 8, 16, 24):
        b = (value >> shift) & 0xFF
        enc.encode(int(_BYTE_CDF[b]), 256)


def _decode_bypass_u32(dec: _Decoder) -> int:
    value = 0
    for shift in (0, 8, 16, 24):
        b = dec.decode_target() >> 8  # uniform over 256: cum = b * 256
        dec.consume(b << 8, 256)
        value |= b << shift
    return value


def encode_centered(values, cdf, ctx, radius: int) -> bytes:
    """Encode integers with per-context Gaussian tables carrying escape bins.

    Table rows have 2*radius+3 symbols: escape-low, the values
    -radius..radius, escape-high. Out-of-range values are coded as an escape
    followed by the zigzag value in four bypass bytes.
    """
    enc = _Encoder()
    esc_high = 2 * radius + 2
    for i in range(len(values)):
        row = cdf[ctx[i]]
        v = int(values[i])
        if v < -radius:
            s = 0
        elif v > radius:
            s = esc_high
        else:
            s = v + radius + 1
        enc.encode(int(row[s]), int(row[s + 1]) - int(row[s]))
        if s == 0 or s == esc_high:
            zz = (v << 1) ^ (v >> 31) if v < 0 else (v << 1)
            _encode_bypass_u32(enc, zz & MASK32)
    return enc.finish()


def decode_centered(data: bytes, cdf, ctx, radius: int, count: int):
    dec = _Decoder(data)
    nsym = 2 * radius + 3
    esc_high = nsym - 1
    out = np.empty(count, dtype=np.int32)
    for i in range(count):
        row = cdf[ctx[i]]
        s = _find_symbol(row, nsym, dec.decode_target())
        dec.consume(int(row[s]), int(row[s + 1]) - int(row[s]))
        if s == 0 or s == esc_high:
            zz = _decode_bypass_u32(dec)
            v = (zz >> 1) ^ -(zz & 1)
        else:
            v = s - radius - 1
        out[i] = v
    return out

# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled range-coder backend.

Byte-for-byte identical output to ``_range_py``; only the inner loops are
typed and buffered in C. Keep the two implementations in lockstep.
"""

from libc.stdlib cimport free, malloc, realloc
from libc.stdint cimport int32_t, int64_t, uint8_t, uint32_t, uint64_t

import numpy as np

from ..errors import CorruptStreamError, SymbolOutOfSupportError

DEF TOTAL = 65536
DEF TOP = 16777216  # 1 << 24
DEF MASK32 = 0xFFFFFFFF


cdef struct Enc:
    uint64_t low
    uint64_t rng
    uint32_t cache
    uint64_t cache_size
    uint8_t *buf
    size_t size
    size_t cap


cdef int _enc_init(Enc *e, size_t cap0) except -1:
    e.low = 0
    e.rng = MASK32
    e.cache = 0
    e.cache_size = 1
    e.size = 0
    e.cap = cap0 if cap0 > 64 else 64
    e.buf = <uint8_t *> malloc(e.cap)
    if e.buf == NULL:
        raise MemoryError()
    return 0


cdef inline int _enc_put(Enc *e, uint8_t b) except -1:
    if e.size == e.cap:
        e.cap *= 2
        e.buf = <uint8_t *> realloc(e.buf, e.cap)
        if e.buf == NULL:
            raise MemoryError()
    e.buf[e.size] = b
    e.size += 1
    return 0


cdef inline int _enc_shift_low(Enc *e) except -1:
    cdef uint64_t carry
    cdef uint64_t i
    if e.low < 0xFF000000U or e.low > <uint64_t> MASK32:
        carry = e.low >> 32
        _enc_put(e, <uint8_t> ((e.cache + carry) & 0xFF))
        for i in range(e.cache_size - 1):
            _enc_put(e, <uint8_t> ((0xFF + carry) & 0xFF))
        e.cache_size = 0
        e.cache = <uint32_t> ((e.low >> 24) & 0xFF)
    e.cache_size += 1
    e.low = (e.low << 8) & MASK32
    return 0


cdef inline int _enc_encode(Enc *e, uint32_t cum, uint32_t freq) except -1:
    cdef uint64_t r = e.rng / TOTAL
    e.low += r * cum
    e.rng = r * freq
    while e.rng < TOP:
        e.rng <<= 8
        _enc_shift_low(e)
    return 0


cdef bytes _enc_finish(Enc *e):
    cdef int i
    for i in range(5):
        _enc_shift_low(e)
    cdef bytes out = e.buf[:e.size]
    free(e.buf)
    e.buf = NULL
    return out


cdef struct Dec:
    const uint8_t *data
    size_t size
    size_t pos
    uint64_t rng
    uint64_t code


cdef int _dec_init(Dec *d, const uint8_t[::1] data) except -1:
    if data.shape[0] < 5:
        raise CorruptStreamError("range-coded stream shorter than flush")
    if data[0] != 0:
        raise CorruptStreamError("bad range-coder lead byte")
    d.data = &data[0]
    d.size = data.shape[0]
    d.pos = 1
    d.rng = MASK32
    d.code = 0
    cdef int i
    for i in range(4):
        d.code = (d.code << 8) | d.data[d.pos]
        d.pos += 1
    return 0


cdef inline uint64_t _dec_next_byte(Dec *d) except? 0xFFFF:
    if d.pos >= d.size:
        raise CorruptStreamError("range-coded stream truncated")
    cdef uint64_t b = d.data[d.pos]
    d.pos += 1
    return b


cdef inline uint32_t _dec_target(Dec *d) noexcept:
    d.rng = d.rng / TOTAL
    cdef uint64_t t = d.code / d.rng
    return <uint32_t> (TOTAL - 1 if t > TOTAL - 1 else t)


cdef inline int _dec_consume(Dec *d, uint32_t cum, uint32_t freq) except -1:
    d.code -= (<uint64_t> cum) * d.rng
    d.rng *= freq
    while d.rng < TOP:
        d.code = ((d.code << 8) | _dec_next_byte(d)) & 0xFFFFFFFFFFULL
        d.rng <<= 8
    return 0


cdef inline int _find_symbol(const uint32_t *row, int nsym, uint32_t target) noexcept:
    cdef int lo = 0
    cdef int hi = nsym
    cdef int mid
    while hi - lo > 1:
        mid = (lo + hi) >> 1
        if row[mid] <= target:
            lo = mid
        else:
            hi = mid
    return lo


def encode_symbols(symbols, cdf, nsyms, ctx):
    cdef const int32_t[::1] sym = np.ascontiguousarray(symbols, dtype=np.int32)
    cdef const uint32_t[:, ::1] table = np.ascontiguousarray(cdf, dtype=np.uint32)
    cdef const int32_t[::1] ns = np.ascontiguousarray(nsyms, dtype=np.int32)
    cdef const int32_t[::1] cx = np.ascontiguousarray(ctx, dtype=np.int32)
    cdef Py_ssize_t n = sym.shape[0]
    cdef Py_ssize_t i
    cdef int32_t s, c
    cdef Enc e
    _enc_init(&e, <size_t> (n * 2 + 16))
    try:
        for i in range(n):
            c = cx[i]
            s = sym[i]
            if s < 0 or s >= ns[c]:
                raise SymbolOutOfSupportError(
                    f"symbol {s} outside table support [0, {ns[c]})"
                )
            _enc_encode(&e, table[c, s], table[c, s + 1] - table[c, s])
    except:
        if e.buf != NULL:
            free(e.buf)
        raise
    return _enc_finish(&e)


def decode_symbols(data, cdf, nsyms, ctx, count):
    cdef const uint8_t[::1] raw = data
    cdef const uint32_t[:, ::1] table = np.ascontiguousarray(cdf, dtype=np.uint32)
    cdef const int32_t[::1] ns = np.ascontiguousarray(nsyms, dtype=np.int32)
    cdef const int32_t[::1] cx = np.ascontiguousarray(ctx, dtype=np.int32)
    cdef Py_ssize_t n = count
    out_arr = np.empty(n, dtype=np.int32)
    cdef int32_t[::1] out = out_arr
    cdef Py_ssize_t i
    cdef int32_t c
    cdef int s
    cdef Dec d
    _dec_init(&d, raw)
    for i in range(n):
        c = cx[i]
        s = _find_symbol(&table[c, 0], ns[c], _dec_target(&d))
        _dec_consume(&d, table[c, s], table[c, s + 1] - table[c, s])
        out[i] = s
    return out_arr


cdef inline int _enc_bypass_u32(Enc *e, uint32_t value) except -1:
    cdef int shift
    cdef uint32_t b
    for shift in range(0, 32, 8):
        b = (value >> shift) & 0xFF
        _enc_encode(&e[0], b << 8, 256)
    return 0


cdef inline uint32_t _dec_bypass_u32(Dec *d) except? 0xFFFFFFFFU:
    cdef uint32_t value = 0
    cdef int shift
    cdef uint32_t b
    for shift in range(0, 32, 8):
        b = _dec_target(d) >> 8
        _dec_consume(d, b << 8, 256)
        value |= b << shift
    return value


def encode_centered(values, cdf, ctx, radius):
    cdef const int32_t[::1] val = np.ascontiguousarray(values, dtype=np.int32)
    cdef const uint32_t[:, ::1] table = np.ascontiguousarray(cdf, dtype=np.uint32)
    cdef const int32_t[::1] cx = np.ascontiguousarray(ctx, dtype=np.int32)
    cdef int rad = radius
    cdef int esc_high = 2 * rad + 2
    cdef Py_ssize_t n = val.shape[0]
    cdef Py_ssize_t i
    cdef int32_t v, c
    cdef int s
    cdef uint32_t zz
    cdef Enc e
    _enc_init(&e, <size_t> (n * 2 + 16))
    try:
        for i in range(n):
            c = cx[i]
            v = val[i]
            if v < -rad:
                s = 0
            elif v > rad:
                s = esc_high
            else:
                s = v + rad + 1
            _enc_encode(&e, table[c, s], table[c, s + 1] - table[c, s])
            if s == 0 or s == esc_high:
                zz = (<uint32_t> (v << 1)) ^ (<uint32_t> (v >> 31))
                _enc_bypass_u32(&e, zz)
    except:
        if e.buf != NULL:
            free(e.buf)
        raise
    return _enc_finish(&e)


def decode_centered(data, cdf, ctx, radius, count):
    cdef const uint8_t[::1] raw = data
    cdef const uint32_t[:, ::1] table = np.ascontiguousarray(cdf, dtype=np.uint32)
    cdef const int32_t[::1] cx = np.ascontiguousarray(ctx, dtype=np.int32)
    cdef int rad = radius
    cdef int nsym = 2 * rad + 3
    cdef int esc_high = nsym - 1
    cdef Py_ssize_t n = count
    out_arr = np.empty(n, dtype=np.int32)
    cdef int32_t[::1] out = out_arr
    cdef Py_ssize_t i
    cdef int32_t c
    cdef int s
    cdef uint32_t zz
    cdef Dec d
    _dec_init(&d, raw)
    for i in range(n):
        c = cx[i]
        s = _find_symbol(&table[c, 0], nsym, _dec_target(&d))
        _dec_consume(&d, table[c, s], table[c, s + 1] - table[c, s])
        if s == 0 or s == esc_high:
            zz = _dec_bypass_u32(&d)
            out[i] = <int32_t> ((zz >> 1) ^ (-(<int32_t> (zz & 1))))
        else:
            out[i] = s - rad - 1
    return out_arr

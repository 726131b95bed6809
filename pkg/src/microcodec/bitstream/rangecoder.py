"""Entropy-coding front end: backend selection and the public coder API.

The compiled backend is preferred when the extension built; the pure-Python
twin is the fallback. ``MICROCODEC_CODER_BACKEND=python|cython`` forces the
choice (useful for the backend benchmark and for debugging).
"""

from __future__ import annotations

import os

import numpy as np

from ..errors import ConfigError
from . import _range_py

_FORCED = os.environ.get("MICROCODEC_CODER_BACKEND", "").strip().lower()

if _FORCED == "python":
    _impl = _range_py
    BACKEND = "python"
else:
    try:
        from . import _range_cy as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        if _FORCED == "cython":
            raise
        _impl = _range_py
        BACKEND = "python"

TOTAL = _range_py.TOTAL


def backend_name() -> str:
    return BACKEND


def _as_bank(cdfs) -> tuple[np.ndarray, np.ndarray]:
    """Normalize table input to a (rows, width) uint32 bank plus per-row symbol counts.

    Accepts a single 1-D cumulative table, a 2-D bank (all rows same width),
    or a list of 1-D tables of varying lengths (padded with the 65536 cap).
    """
    if isinstance(cdfs, (list, tuple)):
        rows = [np.asarray(r, dtype=np.uint32) for r in cdfs]
        width = max(r.shape[0] for r in rows)
        bank = np.full((len(rows), width), TOTAL, dtype=np.uint32)
        nsyms = np.empty(len(rows), dtype=np.int32)
        for i, r in enumerate(rows):
            bank[i, : r.shape[0]] = r
            nsyms[i] = r.shape[0] - 1
        return bank, nsyms
    arr = np.asarray(cdfs, dtype=np.uint32)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ConfigError("cdfs must be 1-D, 2-D, or a list of 1-D tables")
    nsyms = np.full(arr.shape[0], arr.shape[1] - 1, dtype=np.int32)
    return np.ascontiguousarray(arr), nsyms


def validate_cdf(table: np.ndarray) -> None:
    """Check the cumulative-table contract: starts at 0, ends at 65536, strictly increasing."""
    t = np.asarray(table)
    if t.ndim == 1:
        t = t[None, :]
    if t[:, 0].any():
        raise ConfigError("cdf must start at 0")
    if (t[:, -1] != TOTAL).any():
        raise ConfigError(f"cdf must end at {TOTAL}")
    if (np.diff(t.astype(np.int64), axis=1) < 1).any():
        raise ConfigError("cdf must be strictly increasing (every symbol needs mass >= 1)")


def range_encode(symbols, cdfs, ctx=None) -> bytes:
    """Encode integer symbols against per-symbol cumulative tables.

    ``ctx[i]`` selects the table row for symbol ``i``; defaults to row 0 for
    all symbols when a single table is given.
    """
    sym = np.ascontiguousarray(symbols, dtype=np.int32)
    bank, nsyms = _as_bank(cdfs)
    if ctx is None:
        ctx_arr = np.zeros(sym.shape[0], dtype=np.int32)
    else:
        ctx_arr = np.ascontiguousarray(ctx, dtype=np.int32)
    if ctx_arr.shape[0] != sym.shape[0]:
        raise ConfigError("ctx length must match symbols length")
    return _impl.encode_symbols(sym, bank, nsyms, ctx_arr)


def range_decode(data: bytes, cdfs, count: int, ctx=None) -> np.ndarray:
    """Exact inverse of :func:`range_encode` given identical tables."""
    bank, nsyms = _as_bank(cdfs)
    if ctx is None:
        ctx_arr = np.zeros(count, dtype=np.int32)
    else:
        ctx_arr = np.ascontiguousarray(ctx, dtype=np.int32)
    if ctx_arr.shape[0] != count:
        raise ConfigError("ctx length must match count")
    return _impl.decode_symbols(bytes(data), bank, nsyms, ctx_arr, count)


def encode_centered_values(values, bank: np.ndarray, ctx, radius: int) -> bytes:
    """Encode signed integers with Gaussian tables carrying escape bins."""
    val = np.ascontiguousarray(values, dtype=np.int32)
    ctx_arr = np.ascontiguousarray(ctx, dtype=np.int32)
    return _impl.encode_centered(val, np.ascontiguousarray(bank, dtype=np.uint32), ctx_arr, int(radius))


def decode_centered_values(data: bytes, bank: np.ndarray, ctx, radius: int, count: int) -> np.ndarray:
    ctx_arr = np.ascontiguousarray(ctx, dtype=np.int32)
    return _impl.decode_centered(
        bytes(data), np.ascontiguousarray(bank, dtype=np.uint32), ctx_arr, int(radius), count
    )

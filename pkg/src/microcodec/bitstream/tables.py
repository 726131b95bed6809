"""Fixed-point CDF tables for the discretized-Gaussian entropy models.

Tables are cumulative frequencies in 1/65536 units. A Gaussian table for
support radius R has 2R+3 symbols: an escape bin for values below -R, one
bin per integer in [-R, R], and an escape bin for values above R. Every bin
keeps at least one frequency unit so any symbol stays codable.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr

from ..config import SIGMA_MIN
from ..errors import ConfigError

TOTAL = 1 << 16
DEFAULT_SUPPORT_RADIUS = 64


def gaussian_cdf_bank(mu, sigma, support_radius: int = DEFAULT_SUPPORT_RADIUS) -> np.ndarray:
    """Build one Gaussian CDF table per (mu, sigma) pair.

    Returns a uint32 array of shape ``(n, 2*support_radius + 4)`` whose rows
    are cumulative tables (row[0] = 0, row[-1] = 65536, strictly increasing).
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    if mu.shape != sigma.shape or mu.ndim != 1:
        raise ConfigError("mu and sigma must be 1-D arrays of equal length")
    if support_radius < 1:
        raise ConfigError("support_radius must be >= 1")
    sigma = np.maximum(sigma, SIGMA_MIN)

    r = support_radius
    edges = np.arange(-r, r + 1, dtype=np.float64) + 0.5        # (2r+1,) edges -r+0.5 .. r+0.5
    upper = ndtr((edges[None, :] - mu[:, None]) / sigma[:, None])
    low_tail = ndtr((-r - 0.5 - mu) / sigma)

    n = mu.shape[0]
    masses = np.empty((n, 2 * r + 3), dtype=np.float64)
    masses[:, 0] = low_tail                                     # escape below -r
    masses[:, 1] = upper[:, 0] - low_tail                       # value -r
    masses[:, 2:-1] = np.diff(upper, axis=1)                    # values -r+1 .. r
    masses[:, -1] = 1.0 - upper[:, -1]                          # escape above r

    freqs = np.maximum(1, np.rint(masses * TOTAL)).astype(np.int64)
    deficit = TOTAL - freqs.sum(axis=1)
    top = np.argmax(freqs, axis=1)
    freqs[np.arange(n), top] += deficit
    if (freqs < 1).any():
        raise ConfigError("probability floor violated while renormalizing cdf")

    out = np.zeros((n, 2 * r + 4), dtype=np.uint32)
    out[:, 1:] = np.cumsum(freqs, axis=1)
    return out


def gaussian_cdf_table(mu: float, sigma: float, support_radius: int = DEFAULT_SUPPORT_RADIUS) -> np.ndarray:
    """Single-row convenience wrapper around :func:`gaussian_cdf_bank`."""
    return gaussian_cdf_bank([mu], [sigma], support_radius)[0]


def centered_coding_plan(mu: np.ndarray, sigma: np.ndarray, support_radius: int = DEFAULT_SUPPORT_RADIUS):
    """Per-element tables plus the integer centers used to shift values into support.

    Encode ``value - center`` with row i of the bank; both sides derive the
    identical plan from the same entropy parameters.
    """
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    centers = np.rint(mu).astype(np.int64)
    bank = gaussian_cdf_bank(mu - centers, sigma, support_radius)
    ctx = np.arange(mu.shape[0], dtype=np.int32)
    return bank, ctx, centers


def estimated_bits(symbols, cdf_bank, ctx=None) -> float:
    """Ideal code length sum(-log2 p) implied by the fixed-point tables."""
    bank = np.asarray(cdf_bank, dtype=np.int64)
    if bank.ndim == 1:
        bank = bank[None, :]
    sym = np.asarray(symbols, dtype=np.int64)
    rows = np.zeros_like(sym) if ctx is None else np.asarray(ctx, dtype=np.int64)
    freqs = bank[rows, sym + 1] - bank[rows, sym]
    return float(-np.log2(freqs / TOTAL).sum())

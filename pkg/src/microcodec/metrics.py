"""Quality metrics, decode-timing harness and rate-distortion bookkeeping."""

from __future__ import annotations

import csv
import json
import math
import statistics
import time
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ShapeError

PSNR_CAP_DB = 100.0
_MSE_FLOOR = 1e-10

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5


def _check_pair(a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def psnr(a: Tensor, b: Tensor) -> float:
    """Peak signal-to-noise ratio on the [0, 1] scale, capped at 100 dB."""
    _check_pair(a, b)
    mse = float(F.mse_loss(a.float(), b.float()))
    if mse < _MSE_FLOOR:
        return PSNR_CAP_DB
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(device, dtype) -> Tensor:
    half = _SSIM_WINDOW // 2
    coords = torch.arange(_SSIM_WINDOW, dtype=dtype, device=device) - half
    g = torch.exp(-(coords**2) / (2 * _SSIM_SIGMA**2))
    g = g / g.sum()
    return torch.outer(g, g)


def _ssim_terms(a: Tensor, b: Tensor) -> tuple[float, float]:
    """Mean SSIM and mean contrast-structure term at one scale."""
    c1 = 0.01**2
    c2 = 0.03**2
    channels = a.shape[-3]
    win = _gaussian_window(a.device, a.dtype).expand(channels, 1, _SSIM_WINDOW, _SSIM_WINDOW)

    def filt(x):
        return F.conv2d(x, win, groups=channels)

    mu_a = filt(a)
    mu_b = filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    ssim = ((2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)) * cs
    return float(ssim.mean()), float(cs.mean())


def max_ms_ssim_scales(height: int, width: int) -> int:
    """Largest scale count whose coarsest level still fits the 11-tap window."""
    m = 0
    need = _SSIM_WINDOW
    while m < len(MS_SSIM_WEIGHTS) and min(height, width) >= (need - 1) * 2**m + 1:
        m += 1
    return m


def ms_ssim(a: Tensor, b: Tensor) -> float:
    """Multi-scale structural similarity; scale count shrinks (with renormalized
    weights) when the image is too small for the full five scales."""
    _check_pair(a, b)
    if a.dim() == 3:
        a = a.unsqueeze(0)
        b = b.unsqueeze(0)
    h, w = a.shape[-2:]
    scales = max_ms_ssim_scales(h, w)
    if scales < 2:
        raise ShapeError(f"image {h}x{w} too small for multi-scale similarity (needs >= 21 px)")
    weights = [wt / sum(MS_SSIM_WEIGHTS[:scales]) for wt in MS_SSIM_WEIGHTS[:scales]]

    a = a.float()
    b = b.float()
    score = 1.0
    for level in range(scales):
        ssim_val, cs_val = _ssim_terms(a, b)
        term = ssim_val if level == scales - 1 else cs_val
        score *= max(term, 0.0) ** weights[level]
        if level < scales - 1:
            a = F.avg_pool2d(a, 2)
            b = F.avg_pool2d(b, 2)
    return score


# ---------------------------------------------------------------------------
# Perceptual distance


class RandomFeatureDistance(nn.Module):
    """Deterministic perceptual distance from a fixed random convolutional pyramid.

    Features at three scales, unit-normalized along channels; the distance is
    the mean squared feature difference. Differentiable, seeded, and a
    pseudometric (non-negative, symmetric, zero on identical inputs).
    """

    def __init__(self, seed: int = 0, channels: int = 24, scales: int = 3):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.scales = scales
        weights = torch.randn(channels, 3, 3, 3, generator=gen) / math.sqrt(27.0)
        self.register_buffer("weight", weights)

    def _features(self, x: Tensor) -> Tensor:
        f = F.conv2d(x, self.weight, padding=1)
        return f / torch.sqrt((f * f).sum(dim=-3, keepdim=True) + 1e-8)

    def forward(self, a: Tensor, b: Tensor) -> Tensor:
        if a.dim() == 3:
            a = a.unsqueeze(0)
            b = b.unsqueeze(0)
        total = 0.0
        for level in range(self.scales):
            total = total + ((self._features(a) - self._features(b)) ** 2).mean()
            if level < self.scales - 1:
                a = F.avg_pool2d(a, 2)
                b = F.avg_pool2d(b, 2)
        return total / self.scales


_DP_CACHE: dict[int, RandomFeatureDistance] = {}
_DP_OVERRIDE = None


def set_perceptual_model(model) -> None:
    """Install an external perceptual model (callable ``(a, b) -> scalar``), or None to reset."""
    global _DP_OVERRIDE
    _DP_OVERRIDE = model


def perceptual_distance(a: Tensor, b: Tensor, seed: int = 0, model=None) -> Tensor:
    """Perceptual distance d_p; uses the plug-in model when one is installed."""
    _check_pair(a, b)
    backend = model if model is not None else _DP_OVERRIDE
    if backend is not None:
        return backend(a, b)
    if seed not in _DP_CACHE:
        _DP_CACHE[seed] = RandomFeatureDistance(seed=seed)
    return _DP_CACHE[seed](a, b)


# ---------------------------------------------------------------------------
# Decode timing


@dataclass(frozen=True)
class TimingReport:
    median_ms: float
    min_ms: float
    p90_ms: float
    reps: int


def time_decode(decoder_fn, y_hat, warmup: int = 3, reps: int = 20) -> TimingReport:
    """Median wall time of ``decoder_fn(y_hat)`` after warmup.

    Run on an otherwise idle machine; the harness holds no locks.
    """
    for _ in range(warmup):
        decoder_fn(y_hat)
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        decoder_fn(y_hat)
        samples.append((time.perf_counter() - t0) * 1000.0)
    ordered = sorted(samples)
    p90_idx = min(len(ordered) - 1, math.ceil(0.9 * len(ordered)) - 1)
    return TimingReport(
        median_ms=statistics.median(samples),
        min_ms=ordered[0],
        p90_ms=ordered[p90_idx],
        reps=reps,
    )


# ---------------------------------------------------------------------------
# Rate-distortion bookkeeping


RD_FIELDS = ("label", "bpp", "psnr", "ms_ssim", "d_p", "decode_ms")


@dataclass(frozen=True)
class RDPoint:
    label: str
    bpp: float
    psnr: float
    ms_ssim: float
    d_p: float
    decode_ms: float = 0.0


def collect_rd(
    label: str,
    bpp: float,
    reference_frames,
    decoded_frames,
    decode_ms: float = 0.0,
    d_p_seed: int = 0,
) -> RDPoint:
    """Aggregate mean quality metrics over a frame sequence into one RD point."""
    if len(reference_frames) != len(decoded_frames):
        raise ShapeError("reference and decoded sequences differ in length")
    psnrs, ssims, dps = [], [], []
    for ref, dec in zip(reference_frames, decoded_frames):
        psnrs.append(psnr(ref, dec))
        ssims.append(ms_ssim(ref, dec))
        dps.append(float(perceptual_distance(ref, dec, seed=d_p_seed)))
    n = len(psnrs)
    return RDPoint(
        label=label,
        bpp=bpp,
        psnr=sum(psnrs) / n,
        ms_ssim=sum(ssims) / n,
        d_p=sum(dps) / n,
        decode_ms=decode_ms,
    )


def write_rd_csv(points, path) -> None:
    rows = sorted(points, key=lambda p: p.bpp)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RD_FIELDS)
        for p in rows:
            writer.writerow([p.label, p.bpp, p.psnr, p.ms_ssim, p.d_p, p.decode_ms])


def write_rd_json(points, path) -> None:
    rows = [asdict(p) for p in sorted(points, key=lambda p: p.bpp)]
    with open(path, "w") as fh:
        json.dump(rows, fh, indent=2)

"""Dense motion: bilinear warping, a trainable pyramid flow estimator, and a
block-matching reference used only for verification.

Flow convention: ``f[0] = dy``, ``f[1] = dx`` in pixels, and
``warp(x, f)[i, j] = bilinear(x at (i + dy, j + dx))`` with out-of-bounds
coordinates clamped to the border.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ShapeError

LRELU_SLOPE = 0.2


def warp(x: Tensor, f: Tensor) -> Tensor:
    """Bilinear backward warp; exact identity for zero flow."""
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
        f = f.unsqueeze(0)
    if x.shape[-2:] != f.shape[-2:] or f.shape[-3] != 2:
        raise ShapeError(f"flow {tuple(f.shape)} does not match image {tuple(x.shape)}")
    b, c, h, w = x.shape
    ii = torch.arange(h, dtype=x.dtype, device=x.device).view(1, h, 1)
    jj = torch.arange(w, dtype=x.dtype, device=x.device).view(1, 1, w)
    py = (ii + f[:, 0]).clamp(0, h - 1)
    px = (jj + f[:, 1]).clamp(0, w - 1)

    iy0 = torch.floor(py)
    ix0 = torch.floor(px)
    fy = (py - iy0).unsqueeze(1)
    fx = (px - ix0).unsqueeze(1)
    iy0 = iy0.long()
    ix0 = ix0.long()
    iy1 = (iy0 + 1).clamp(max=h - 1)
    ix1 = (ix0 + 1).clamp(max=w - 1)

    flat = x.reshape(b, c, h * w)

    def take(iy, ix):
        idx = (iy * w + ix).reshape(b, 1, h * w).expand(b, c, h * w)
        return torch.gather(flat, 2, idx).reshape(b, c, h, w)

    out = (
        take(iy0, ix0) * (1 - fy) * (1 - fx)
        + take(iy0, ix1) * (1 - fy) * fx
        + take(iy1, ix0) * fy * (1 - fx)
        + take(iy1, ix1) * fy * fx
    )
    return out.squeeze(0) if squeeze else out


class _FlowLevel(nn.Module):
    """Per-level residual flow predictor; zero-initialized output so flow starts at 0."""

    def __init__(self, width: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(8, width, 3, padding=1),
            nn.LeakyReLU(LRELU_SLOPE),
            nn.Conv2d(width, width, 3, padding=1),
            nn.LeakyReLU(LRELU_SLOPE),
            nn.Conv2d(width, width // 2, 3, padding=1),
            nn.LeakyReLU(LRELU_SLOPE),
            nn.Conv2d(width // 2, 2, 3, padding=1),
        )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, warped: Tensor, target: Tensor, up_flow: Tensor) -> Tensor:
        return self.net(torch.cat([warped, target, up_flow], dim=1))


class PyramidFlowNet(nn.Module):
    """Coarse-to-fine flow over a 3-level image pyramid."""

    def __init__(self, levels: int = 3, width: int = 32):
        super().__init__()
        self.levels = levels
        self.nets = nn.ModuleList([_FlowLevel(width) for _ in range(levels)])

    def forward(self, x_next: Tensor, x_prev: Tensor) -> Tensor:
        pyr_next = [x_next]
        pyr_prev = [x_prev]
        for _ in range(self.levels - 1):
            pyr_next.append(F.avg_pool2d(pyr_next[-1], 2))
            pyr_prev.append(F.avg_pool2d(pyr_prev[-1], 2))

        flow = torch.zeros(
            x_next.shape[0], 2, pyr_next[-1].shape[-2], pyr_next[-1].shape[-1],
            dtype=x_next.dtype, device=x_next.device,
        )
        for level in range(self.levels - 1, -1, -1):
            if level < self.levels - 1:
                flow = 2.0 * F.interpolate(flow, scale_factor=2, mode="bilinear", align_corners=False)
            warped = warp(pyr_prev[level], flow)
            flow = flow + self.nets[level](warped, pyr_next[level], flow)
        return flow


def estimate_flow(x_next: Tensor, x_prev_hat: Tensor, model: PyramidFlowNet) -> Tensor:
    """Dense displacement field mapping the previous reconstruction onto the next frame."""
    if x_next.shape != x_prev_hat.shape:
        raise ShapeError("flow estimation needs frames of identical shape")
    squeeze = x_next.dim() == 3
    if squeeze:
        x_next = x_next.unsqueeze(0)
        x_prev_hat = x_prev_hat.unsqueeze(0)
    h, w = x_next.shape[-2:]
    factor = 2 ** (model.levels - 1)
    ph = (-h) % factor
    pw = (-w) % factor
    if ph or pw:
        x_next = F.pad(x_next, (0, pw, 0, ph), mode="replicate")
        x_prev_hat = F.pad(x_prev_hat, (0, pw, 0, ph), mode="replicate")
    flow = model(x_next, x_prev_hat)[..., :h, :w]
    return flow.squeeze(0) if squeeze else flow


def block_matching_flow(x_next: Tensor, x_prev: Tensor, block: int = 8, radius: int = 4) -> Tensor:
    """Exhaustive integer block-matching reference; verification only, not trainable.

    Deterministic: ties resolve to the smallest (dy, dx) in scan order.
    """
    if x_next.shape != x_prev.shape:
        raise ShapeError("block matching needs frames of identical shape")
    a = x_next.detach().cpu().numpy().astype(np.float64)
    b = x_prev.detach().cpu().numpy().astype(np.float64)
    if a.ndim == 3:  # (C,H,W) -> mean over channels
        a = a.mean(axis=0)
        b = b.mean(axis=0)
    h, w = a.shape
    bh, bw = h // block, w // block
    a = a[: bh * block, : bw * block]
    padded = np.pad(b, radius, mode="edge")

    best = np.full((bh, bw), np.inf)
    best_dy = np.zeros((bh, bw))
    best_dx = np.zeros((bh, bw))
    blocks_a = a.reshape(bh, block, bw, block).transpose(0, 2, 1, 3)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            shifted = padded[radius + dy : radius + dy + bh * block, radius + dx : radius + dx + bw * block]
            blocks_b = shifted.reshape(bh, block, bw, block).transpose(0, 2, 1, 3)
            sad = np.abs(blocks_a - blocks_b).sum(axis=(2, 3))
            better = sad < best
            best[better] = sad[better]
            best_dy[better] = dy
            best_dx[better] = dx

    flow = np.zeros((2, h, w), dtype=np.float32)
    flow[0, : bh * block, : bw * block] = np.repeat(np.repeat(best_dy, block, axis=0), block, axis=1)
    flow[1, : bh * block, : bw * block] = np.repeat(np.repeat(best_dx, block, axis=0), block, axis=1)
    return torch.from_numpy(flow)

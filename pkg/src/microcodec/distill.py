"""Distill the teacher's residual trunk into a tiny per-subset student trunk.

Only student parameters are updated; the teacher (encoder, entropy model,
head, tail) stays frozen throughout. Teacher targets and frame latents are
cached once per subset frame, and crops are sampled on the latent grid so
cached full-frame tensors slice exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .codec import TeacherModel, decode_full, encode
from .config import DistillConfig, MicroRNConfig
from .errors import ConfigError, DataError, ShapeError
from .bitstream import WeightBundle, pack_weight_bundle, unpack_weight_bundle
from .metrics import ms_ssim, perceptual_distance, psnr
from .micro_net import MicroResNet, build_micro_rn, student_decode
from .utils import round_away


@dataclass
class Subset:
    """Ordered frame subset a student trunk specializes on."""

    id: str
    frames: list[Tensor]
    source_stride: int = 1

    def __post_init__(self):
        if not self.frames:
            raise DataError(f"subset {self.id!r} is empty")
        shape = self.frames[0].shape
        if any(f.shape != shape for f in self.frames):
            raise DataError(f"subset {self.id!r} mixes frame dimensions")


def make_subset(frames, stride: int = 10, subset_id: str | None = None) -> Subset:
    """Every ``stride``-th frame (indices 0, stride, 2*stride, ...), order preserved."""
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    source_frames = frames.frames if hasattr(frames, "frames") else list(frames)
    if not source_frames:
        raise DataError("cannot build a subset from an empty frame list")
    picked = source_frames[::stride]
    sid = subset_id or f"{getattr(frames, 'id', 'frames')}-every{stride}"
    return Subset(id=sid, frames=picked, source_stride=stride)


def kd_loss(x: Tensor, x_tilde: Tensor, x_hat: Tensor, k_mse: float, k_perceptual: float, d_p_seed: int = 0):
    """Distillation objective: match the teacher output, stay perceptually close to the source."""
    if x.shape != x_tilde.shape or x.shape != x_hat.shape:
        raise ShapeError("kd_loss inputs must share one shape")
    loss = torch.zeros((), dtype=torch.float32)
    if k_mse > 0:
        loss = loss + k_mse * F.mse_loss(x_tilde, x_hat)
    if k_perceptual > 0:
        loss = loss + k_perceptual * perceptual_distance(x_hat, x, seed=d_p_seed)
    return loss


class _SubsetCache:
    """Frozen-teacher inference cache: per-frame quantized latents and targets."""

    def __init__(self, teacher: TeacherModel, subset: Subset):
        self.latents: list[Tensor] = []
        self.targets: list[Tensor] = []
        h, w = subset.frames[0].shape[-2:]
        for frame in subset.frames:
            y_hat = round_away(encode(frame, teacher))
            self.latents.append(y_hat)
            self.targets.append(decode_full(y_hat, teacher, size=(h, w)))


def distill(
    teacher: TeacherModel,
    subset: Subset,
    rn_config: MicroRNConfig,
    cfg: DistillConfig,
    log=None,
) -> WeightBundle:
    """Optimize a student trunk on one subset and package its weights.

    Emits ``step=<n> mse_t=<v> dp=<v> total=<v>`` progress records through
    ``log`` (one line per ``cfg.log_every`` steps).
    """
    if rn_config.io_channels != teacher.config.trunk_channels:
        raise ConfigError(
            f"student io_channels {rn_config.io_channels} must equal "
            f"teacher trunk width {teacher.config.trunk_channels}"
        )
    stride = teacher.config.downsample_factor
    h, w = subset.frames[0].shape[-2:]
    if cfg.crop > h or cfg.crop > w:
        raise ConfigError(f"crop {cfg.crop} exceeds subset frames {h}x{w}")
    if cfg.crop % stride:
        raise ConfigError(f"crop must be a multiple of the codec stride {stride}")

    teacher.eval()
    teacher.requires_grad_(False)
    cache = _SubsetCache(teacher, subset)
    rn = build_micro_rn(rn_config, cfg.seed)
    rn.train()
    opt = torch.optim.Adam(rn.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)

    lc = cfg.crop // stride
    max_i = (h - cfg.crop) // stride
    max_j = (w - cfg.crop) // stride

    for step in range(1, cfg.steps + 1):
        lat, tgt, src = [], [], []
        for _ in range(cfg.batch):
            fi = int(rng.integers(len(subset.frames)))
            ci = int(rng.integers(max_i + 1))
            cj = int(rng.integers(max_j + 1))
            lat.append(cache.latents[fi][..., ci : ci + lc, cj : cj + lc])
            pi, pj = ci * stride, cj * stride
            tgt.append(cache.targets[fi][..., pi : pi + cfg.crop, pj : pj + cfg.crop])
            src.append(subset.frames[fi][..., pi : pi + cfg.crop, pj : pj + cfg.crop])
        y = torch.stack(lat)
        x_tilde = torch.stack(tgt)
        x = torch.stack(src)

        with torch.no_grad():
            feats = teacher.head(y)
        x_hat = teacher.tail(rn(feats))

        mse_t = F.mse_loss(x_tilde, x_hat) if cfg.k_mse > 0 else torch.zeros(())
        dp = (
            perceptual_distance(x_hat, x, seed=cfg.seed)
            if cfg.k_perceptual > 0
            else torch.zeros(())
        )
        loss = cfg.k_mse * mse_t + cfg.k_perceptual * dp

        opt.zero_grad()
        loss.backward()
        opt.step()
        if log is not None and (step % cfg.log_every == 0 or step == cfg.steps):
            log(f"step={step} mse_t={float(mse_t):.6f} dp={float(dp):.6f} total={float(loss):.6f}")

    rn.eval()
    return pack_weight_bundle(rn, subset.id, precision=32)


def subset_kd_loss(
    teacher: TeacherModel,
    rn: MicroResNet | WeightBundle,
    subset: Subset,
    k_mse: float = 1.0,
    k_perceptual: float = 1.0,
    d_p_seed: int = 0,
) -> float:
    """Mean full-frame distillation loss of a student trunk over a subset."""
    if isinstance(rn, WeightBundle):
        rn = unpack_weight_bundle(rn)
    h, w = subset.frames[0].shape[-2:]
    cache = _SubsetCache(teacher, subset)
    total = 0.0
    with torch.no_grad():
        for frame, y_hat, x_tilde in zip(subset.frames, cache.latents, cache.targets):
            x_hat = student_decode(y_hat, teacher, rn, size=(h, w))
            total += float(kd_loss(frame, x_tilde, x_hat, k_mse, k_perceptual, d_p_seed))
    return total / len(subset.frames)


def evaluate_student(teacher: TeacherModel, rn_bundle, frames, d_p_seed: int = 0) -> dict:
    """Quality of the student decode against ground truth and the teacher output."""
    rn = unpack_weight_bundle(rn_bundle) if isinstance(rn_bundle, WeightBundle) else rn_bundle
    per_frame: dict[str, list[float]] = {
        "mse_to_teacher": [],
        "psnr": [],
        "psnr_to_teacher": [],
        "d_p": [],
        "ms_ssim": [],
    }
    frame_list = frames.frames if hasattr(frames, "frames") else list(frames)
    for frame in frame_list:
        h, w = frame.shape[-2:]
        y_hat = round_away(encode(frame, teacher))
        x_tilde = decode_full(y_hat, teacher, size=(h, w))
        x_hat = student_decode(y_hat, teacher, rn, size=(h, w))
        per_frame["mse_to_teacher"].append(float(F.mse_loss(x_hat, x_tilde)))
        per_frame["psnr"].append(psnr(frame, x_hat))
        per_frame["psnr_to_teacher"].append(psnr(x_tilde, x_hat))
        per_frame["d_p"].append(float(perceptual_distance(x_hat, frame, seed=d_p_seed)))
        per_frame["ms_ssim"].append(ms_ssim(frame, x_hat))
    result = {key: sum(vals) / len(vals) for key, vals in per_frame.items()}
    result["per_frame"] = per_frame
    return result

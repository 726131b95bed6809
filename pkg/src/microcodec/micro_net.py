"""Tiny residual trunk that stands in for the teacher's res_blocks.

Structure per block: 3x3 conv, activation, 3x3 depthwise conv, activation,
3x3 conv, residual add. The whole trunk sits behind a global residual skip
and its output projection starts at zero, so an untrained instance is an
exact identity.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import Tensor, nn

from .config import MicroRNConfig
from .errors import ShapeError
from .utils import crop_to

LRELU_SLOPE = 0.2


def count_params(config: MicroRNConfig) -> int:
    """Closed-form parameter count (weights plus biases); matches the built network exactly."""
    ch, b, cio = config.hidden_channels, config.num_blocks, config.io_channels
    return 18 * cio * ch + ch + cio + b * block_param_count(ch)


def block_param_count(hidden_channels: int) -> int:
    """Parameters of one block: 18*C_h^2 conv weights, 9*C_h depthwise weights, 3*C_h biases."""
    return 18 * hidden_channels**2 + 12 * hidden_channels


class DABlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.dconv = nn.Conv2d(channels, channels, 3, padding=1, groups=channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.LeakyReLU(LRELU_SLOPE)

    def forward(self, x: Tensor) -> Tensor:
        t = self.act(self.conv1(x))
        t = self.act(self.dconv(t))
        return x + self.conv2(t)


class MicroResNet(nn.Module):
    """Feature-space residual refiner: ``f + out_proj(blocks(in_proj(f)))``."""

    def __init__(self, config: MicroRNConfig):
        super().__init__()
        self.config = config
        self.in_proj = nn.Conv2d(config.io_channels, config.hidden_channels, 3, padding=1)
        self.blocks = nn.Sequential(*[DABlock(config.hidden_channels) for _ in range(config.num_blocks)])
        self.out_proj = nn.Conv2d(config.hidden_channels, config.io_channels, 3, padding=1)
        self.act = nn.LeakyReLU(LRELU_SLOPE)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def forward(self, f: Tensor) -> Tensor:
        return f + self.out_proj(self.blocks(self.act(self.in_proj(f))))

    def flatten_params(self) -> np.ndarray:
        """All parameters as one float32 vector, in build (state-dict) order."""
        return np.concatenate(
            [p.detach().cpu().numpy().astype(np.float32).ravel() for p in self.state_dict().values()]
        )

    def load_flat_params(self, flat: np.ndarray) -> None:
        state = self.state_dict()
        expected = sum(int(v.numel()) for v in state.values())
        if flat.size != expected:
            raise ShapeError(f"flat vector has {flat.size} values, network needs {expected}")
        pos = 0
        for key, value in state.items():
            n = int(value.numel())
            chunk = flat[pos : pos + n].reshape(tuple(value.shape))
            state[key] = torch.from_numpy(np.ascontiguousarray(chunk, dtype=np.float32))
            pos += n
        self.load_state_dict(state)


def build_micro_rn(config: MicroRNConfig, seed: int = 0) -> MicroResNet:
    """Seeded construction; the zeroed output projection makes it start as identity."""
    torch.manual_seed(seed)
    return MicroResNet(config)


def student_decode(y_hat: Tensor, teacher, rn: MicroResNet, size: tuple[int, int] | None = None) -> Tensor:
    """Decode with the teacher's head and tail around the student trunk."""
    from .codec import _batched, _decode_features

    if rn.config.io_channels != teacher.config.trunk_channels:
        raise ShapeError(
            f"student trunk width {rn.config.io_channels} does not match "
            f"teacher trunk width {teacher.config.trunk_channels}"
        )
    yb, squeeze = _batched(y_hat)
    if yb.shape[-3] != teacher.config.latent_channels:
        raise ShapeError(
            f"latent has {yb.shape[-3]} channels, model expects {teacher.config.latent_channels}"
        )
    with torch.no_grad():
        img = _decode_features(rn(teacher.head(yb.float())), teacher, size)
    return img.squeeze(0) if squeeze else img


def student_decoder_params(teacher, config: MicroRNConfig) -> int:
    """Total parameters of the deployed student decoder: head + tail + trunk."""
    parts = teacher.part_param_counts()
    return parts["head"] + parts["tail"] + count_params(config)

"""Small shared helpers: quantization surrogates, padding, weight hashing."""

from __future__ import annotations

import hashlib
import zlib

import torch
import torch.nn.functional as F

from .errors import DimensionTooSmallError


def round_away(x: torch.Tensor) -> torch.Tensor:
    """Round to nearest integer with ties away from zero (torch.round ties to even)."""
    return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)


def round_ste(x: torch.Tensor) -> torch.Tensor:
    """Straight-through rounding: integer values forward, identity gradient backward."""
    return x + (round_away(x) - x).detach()


def uniform_noise(x: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    """Additive U[-0.5, 0.5) noise, the training surrogate for rounding."""
    u = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) - 0.5
    return x + u


def pad_to_multiple(x: torch.Tensor, multiple: int) -> torch.Tensor:
    """Reflect-pad the trailing two dims of ``x`` up to a multiple of ``multiple``."""
    h, w = x.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return x
    if ph >= h or pw >= w:
        raise DimensionTooSmallError(
            f"image {h}x{w} too small to reflect-pad to a multiple of {multiple}"
        )
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    x = F.pad(x, (0, pw, 0, ph), mode="reflect")
    return x.squeeze(0) if squeeze else x


def crop_to(x: torch.Tensor, height: int, width: int) -> torch.Tensor:
    return x[..., :height, :width]


def weights_hash(module: torch.nn.Module) -> str:
    """SHA-256 over all parameters and buffers, in state-dict order."""
    h = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def weights_crc32(*modules: torch.nn.Module) -> int:
    """CRC-32 fingerprint of model weights; identifies the model a stream needs."""
    crc = 0
    for module in modules:
        for name, tensor in module.state_dict().items():
            crc = zlib.crc32(name.encode(), crc)
            crc = zlib.crc32(tensor.detach().cpu().contiguous().numpy().tobytes(), crc)
    return crc


def seeded_generator(seed: int) -> torch.Generator:
    g = torch.Generator(device="cpu")
    g.manual_seed(int(seed))
    return g

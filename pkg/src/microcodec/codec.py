"""Image autoencoder with a scale-hyperprior entropy model.

The decoder is split into three sub-nets: ``head`` (latent to features),
``res_blocks`` (the heavy residual trunk that synthesizes texture) and
``tail`` (upsampling features to the image). The trunk can be skipped for a
coarse, fast decode, or replaced by a distilled student trunk.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .bitstream import (
    DEFAULT_SUPPORT_RADIUS,
    ImageContainer,
    centered_coding_plan,
    decode_centered_values,
    encode_centered_values,
    gaussian_cdf_bank,
)
from .config import P_MIN, SIGMA_MIN, CodecConfig, config_from_dict, config_to_dict
from .errors import ConfigError, CorruptStreamError, DataError, ShapeError
from .metrics import perceptual_distance
from .utils import (
    crop_to,
    pad_to_multiple,
    round_away,
    round_ste,
    seeded_generator,
    uniform_noise,
    weights_crc32,
)

LRELU_SLOPE = 0.2


@dataclass
class EntropyParams:
    """Per-element Gaussian parameters for a latent tensor."""

    mu: Tensor
    sigma: Tensor


def _conv(cin: int, cout: int, k: int = 3, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)


class _UpConv(nn.Module):
    """Nearest-neighbor x2 upsampling followed by a 3x3 convolution."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = _conv(cin, cout)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class FactorizedPrior(nn.Module):
    """Per-channel Gaussian prior for a hyper-latent."""

    def __init__(self, channels: int):
        super().__init__()
        self.mu = nn.Parameter(torch.zeros(channels))
        self.log_sigma = nn.Parameter(torch.ones(channels))

    def channel_params(self) -> tuple[np.ndarray, np.ndarray]:
        mu = self.mu.detach().cpu().numpy().astype(np.float64)
        sigma = np.maximum(np.exp(self.log_sigma.detach().cpu().numpy().astype(np.float64)), SIGMA_MIN)
        return mu, sigma

    def params(self, like: Tensor) -> EntropyParams:
        shape = (1, -1, 1, 1) if like.dim() == 4 else (-1, 1, 1)
        return EntropyParams(
            mu=self.mu.reshape(shape).expand_as(like),
            sigma=torch.exp(self.log_sigma).clamp_min(SIGMA_MIN).reshape(shape).expand_as(like),
        )


class ScaleHyperprior(nn.Module):
    """Hyper-latent branch predicting per-element Gaussians for a latent tensor.

    The hyper-latent itself is priced by a per-channel factorized Gaussian.
    """

    def __init__(self, channels: int, hyper_channels: int, zero_init_mu: bool = False):
        super().__init__()
        ch = hyper_channels
        self.h_a = nn.Sequential(
            _conv(channels, ch),
            nn.LeakyReLU(LRELU_SLOPE),
            nn.Conv2d(ch, ch, 5, stride=2, padding=2),
            nn.LeakyReLU(LRELU_SLOPE),
            nn.Conv2d(ch, ch, 5, stride=2, padding=2),
        )
        self.h_up = nn.Sequential(
            _UpConv(ch, ch),
            nn.LeakyReLU(LRELU_SLOPE),
            _UpConv(ch, ch),
            nn.LeakyReLU(LRELU_SLOPE),
        )
        self.param_conv = _conv(ch, 2 * channels)
        self.z_prior = FactorizedPrior(ch)
        if zero_init_mu:
            # mu half of the parameter head starts at zero: sensible prior for
            # residual-like latents centered at zero
            with torch.no_grad():
                self.param_conv.weight[:channels].zero_()
                self.param_conv.bias[:channels].zero_()

    @staticmethod
    def hyper_shape(h: int, w: int) -> tuple[int, int]:
        return (math.ceil(math.ceil(h / 2) / 2), math.ceil(math.ceil(w / 2) / 2))

    def params(self, z_hat: Tensor, latent_hw: tuple[int, int]) -> EntropyParams:
        p = self.param_conv(self.h_up(z_hat))[..., : latent_hw[0], : latent_hw[1]]
        mu, log_sigma = p.chunk(2, dim=-3)
        return EntropyParams(mu=mu, sigma=torch.exp(log_sigma).clamp_min(SIGMA_MIN))

    def training_pass(self, y: Tensor, noise_gen: torch.Generator) -> tuple[Tensor, Tensor]:
        """Straight-through quantized latent plus the total differentiable rate."""
        z = self.h_a(y)
        params = self.params(round_ste(z), (y.shape[-2], y.shape[-1]))
        bits = gaussian_bits(uniform_noise(y, noise_gen), params)
        z_noisy = uniform_noise(z, noise_gen)
        bits = bits + gaussian_bits(z_noisy, self.z_prior.params(z_noisy))
        return round_ste(y), bits

    def inference_params(self, y: Tensor) -> tuple[Tensor, EntropyParams, Tensor]:
        """Rounded hyper-latent, latent entropy parameters and the rounded latent."""
        z_hat = round_away(self.h_a(y))
        params = self.params(z_hat, (y.shape[-2], y.shape[-1]))
        return z_hat, params, round_away(y)


# ---------------------------------------------------------------------------
# Teacher networks


class ImageEncoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        stages = int(math.log2(cfg.downsample_factor))
        width = cfg.trunk_channels
        layers: list[nn.Module] = []
        cin = 3
        for i in range(stages):
            cout = cfg.latent_channels if i == stages - 1 else width
            layers.append(nn.Conv2d(cin, cout, 5, stride=2, padding=2))
            if i < stages - 1:
                layers.append(nn.LeakyReLU(LRELU_SLOPE))
            cin = cout
        self.layers = nn.Sequential(*layers)

    def forward(self, x: Tensor) -> Tensor:
        return self.layers(x)


class DecoderHead(nn.Module):
    """Latent-to-feature mapping; a single wide convolution as in the teacher split."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.conv = _conv(cfg.latent_channels, cfg.trunk_channels)
        self.act = nn.LeakyReLU(LRELU_SLOPE)

    def forward(self, y: Tensor) -> Tensor:
        return self.act(self.conv(y))


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = _conv(channels, channels)
        self.conv2 = _conv(channels, channels)
        self.act = nn.LeakyReLU(LRELU_SLOPE)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv2(self.act(self.conv1(x)))


class DecoderTrunk(nn.Module):
    """The expensive texture-synthesis trunk. ``calls`` counts forward passes."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.blocks = nn.Sequential(*[ResidualBlock(cfg.trunk_channels) for _ in range(cfg.trunk_blocks)])
        self.calls = 0

    def forward(self, x: Tensor) -> Tensor:
        self.calls += 1
        return self.blocks(x)


class DecoderTail(nn.Module):
    """Feature-to-image upsampling stack; channel widths halve per stage (floor 4)."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        stages = int(math.log2(cfg.downsample_factor))
        layers: list[nn.Module] = []
        cin = cfg.trunk_channels
        for i in range(stages):
            cout = max(cfg.trunk_channels >> (i + 1), 4)
            layers.append(_UpConv(cin, cout))
            layers.append(nn.LeakyReLU(LRELU_SLOPE))
            cin = cout
        layers.append(_conv(cin, 3))
        self.layers = nn.Sequential(*layers)

    def forward(self, x: Tensor) -> Tensor:
        return self.layers(x)


class TeacherModel(nn.Module):
    """Full autoencoder; the decoder is exactly ``tail(res_blocks(head(y)))``."""

    def __init__(self, config: CodecConfig):
        super().__init__()
        torch.manual_seed(config.seed)
        self.config = config
        self.encoder = ImageEncoder(config)
        self.entropy_model = ScaleHyperprior(config.latent_channels, config.hyper_channels)
        self.head = DecoderHead(config)
        self.res_blocks = DecoderTrunk(config)
        self.tail = DecoderTail(config)

    def part_param_counts(self) -> dict[str, int]:
        return {
            "encoder": sum(p.numel() for p in self.encoder.parameters()),
            "entropy_model": sum(p.numel() for p in self.entropy_model.parameters()),
            "head": sum(p.numel() for p in self.head.parameters()),
            "res_blocks": sum(p.numel() for p in self.res_blocks.parameters()),
            "tail": sum(p.numel() for p in self.tail.parameters()),
        }


# ---------------------------------------------------------------------------
# Functional operations


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise ShapeError(f"expected (C,H,W) or (B,C,H,W), got {tuple(x.shape)}")


def encode(x: Tensor, model: TeacherModel) -> Tensor:
    """Image to continuous latent; reflect-pads to the codec stride first."""
    xb, squeeze = _batched(x)
    xb = pad_to_multiple(xb, model.config.downsample_factor)
    with torch.no_grad():
        y = model.encoder(xb)
    return y.squeeze(0) if squeeze else y


def quantize(y: Tensor, mode: str = "round", generator: torch.Generator | None = None) -> Tensor:
    """Rounding (ties away from zero) or the additive-noise training surrogate."""
    if mode == "round":
        return round_away(y)
    if mode == "noise":
        if generator is None:
            raise ConfigError("noise quantization needs a seeded generator")
        return uniform_noise(y, generator)
    raise ConfigError(f"unknown quantization mode {mode!r}")


def gaussian_bits(y_hat: Tensor, params: EntropyParams) -> Tensor:
    """Discretized-Gaussian code length in bits; differentiable in all inputs."""
    if y_hat.shape != params.mu.shape or y_hat.shape != params.sigma.shape:
        raise ShapeError("latent and entropy parameters must have identical shapes")
    sigma = params.sigma.clamp_min(SIGMA_MIN)
    upper = torch.special.ndtr((y_hat + 0.5 - params.mu) / sigma)
    lower = torch.special.ndtr((y_hat - 0.5 - params.mu) / sigma)
    mass = (upper - lower).clamp_min(P_MIN)
    return -torch.log2(mass).sum()


def rate_gaussian(y_hat, params: EntropyParams):
    """Bits to code ``y_hat`` under per-element Gaussians (probability floored)."""
    if not torch.is_tensor(y_hat):
        y_hat = torch.as_tensor(np.asarray(y_hat), dtype=torch.float32)
    return gaussian_bits(y_hat, params)


def hyper_roundtrip(y: Tensor, model: TeacherModel) -> tuple[Tensor, EntropyParams, float]:
    """Round the hyper-latent, predict latent entropy parameters, price the side info."""
    yb, squeeze = _batched(y)
    with torch.no_grad():
        z_hat, params, _ = model.entropy_model.inference_params(yb)
        z_bits = float(gaussian_bits(z_hat, model.entropy_model.z_prior.params(z_hat)))
    if squeeze:
        z_hat = z_hat.squeeze(0)
        params = EntropyParams(mu=params.mu.squeeze(0), sigma=params.sigma.squeeze(0))
    return z_hat, params, z_bits


def _decode_features(feats: Tensor, model: TeacherModel, size=None) -> Tensor:
    img = model.tail(feats).clamp(0.0, 1.0)
    if size is not None:
        img = crop_to(img, size[0], size[1])
    return img


def _check_latent(yb: Tensor, model: TeacherModel):
    if yb.shape[-3] != model.config.latent_channels:
        raise ShapeError(
            f"latent has {yb.shape[-3]} channels, model expects {model.config.latent_channels}"
        )


def decode_full(y_hat: Tensor, model: TeacherModel, size: tuple[int, int] | None = None) -> Tensor:
    """Decode through the full head + trunk + tail path, clamped to [0, 1].

    ``size=(H, W)`` crops away the padding introduced by :func:`encode`.
    """
    yb, squeeze = _batched(y_hat)
    _check_latent(yb, model)
    with torch.no_grad():
        img = _decode_features(model.res_blocks(model.head(yb.float())), model, size)
    return img.squeeze(0) if squeeze else img


def decode_without_resblocks(
    y_hat: Tensor, model: TeacherModel, size: tuple[int, int] | None = None
) -> Tensor:
    """Coarse decode: identity in place of the residual trunk (the lower bound)."""
    yb, squeeze = _batched(y_hat)
    _check_latent(yb, model)
    with torch.no_grad():
        img = _decode_features(model.head(yb.float()), model, size)
    return img.squeeze(0) if squeeze else img


def teacher_reconstruct(x: Tensor, model: TeacherModel) -> Tensor:
    """Deployment-path reconstruction: encode, round, decode through the full decoder."""
    h, w = x.shape[-2:]
    return decode_full(round_away(encode(x, model)), model, size=(h, w))


# ---------------------------------------------------------------------------
# Entropy coding of latents (shared by the image and video containers)


def encode_latent(y: Tensor, em: ScaleHyperprior, radius: int = DEFAULT_SUPPORT_RADIUS):
    """Entropy-code a continuous latent; returns the rounded latent and two payloads."""
    yb, _ = _batched(y)
    with torch.no_grad():
        z_hat, params, y_hat = em.inference_params(yb)
    z_np = z_hat.cpu().numpy().astype(np.int64)
    mu_c, sigma_c = em.z_prior.channel_params()
    centers = np.rint(mu_c).astype(np.int64)
    bank = gaussian_cdf_bank(mu_c - centers, sigma_c, radius)
    chan_idx = np.broadcast_to(
        np.arange(z_np.shape[-3], dtype=np.int32)[:, None, None], z_np.shape[-3:]
    )
    ctx = np.ascontiguousarray(np.broadcast_to(chan_idx, z_np.shape).reshape(-1))
    values = (z_np - centers.reshape(1, -1, 1, 1)).reshape(-1).astype(np.int32)
    z_bytes = encode_centered_values(values, bank, ctx, radius)

    mu = params.mu.cpu().numpy().reshape(-1)
    sigma = params.sigma.cpu().numpy().reshape(-1)
    y_bank, y_ctx, y_centers = centered_coding_plan(mu, sigma, radius)
    y_np = y_hat.cpu().numpy().astype(np.int64).reshape(-1)
    y_bytes = encode_centered_values((y_np - y_centers).astype(np.int32), y_bank, y_ctx, radius)
    return y_hat.squeeze(0) if y.dim() == 3 else y_hat, z_bytes, y_bytes


def decode_latent(
    z_bytes: bytes,
    y_bytes: bytes,
    em: ScaleHyperprior,
    latent_shape: tuple[int, int, int],
    radius: int = DEFAULT_SUPPORT_RADIUS,
) -> Tensor:
    """Exact inverse of :func:`encode_latent` given the same entropy model."""
    c, h, w = latent_shape
    hz, wz = em.hyper_shape(h, w)
    cz = em.z_prior.mu.shape[0]
    mu_c, sigma_c = em.z_prior.channel_params()
    centers = np.rint(mu_c).astype(np.int64)
    bank = gaussian_cdf_bank(mu_c - centers, sigma_c, radius)
    ctx = np.ascontiguousarray(
        np.broadcast_to(np.arange(cz, dtype=np.int32)[:, None, None], (cz, hz, wz)).reshape(-1)
    )
    values = decode_centered_values(z_bytes, bank, ctx, radius, cz * hz * wz)
    z_hat = torch.from_numpy(
        (values.astype(np.int64) + centers.repeat(hz * wz)).reshape(1, cz, hz, wz).astype(np.float32)
    )
    with torch.no_grad():
        params = em.params(z_hat, (h, w))
    mu = params.mu.cpu().numpy().reshape(-1)
    sigma = params.sigma.cpu().numpy().reshape(-1)
    y_bank, y_ctx, y_centers = centered_coding_plan(mu, sigma, radius)
    y_vals = decode_centered_values(y_bytes, y_bank, y_ctx, radius, c * h * w)
    y_hat = (y_vals.astype(np.int64) + y_centers).reshape(1, c, h, w).astype(np.float32)
    return torch.from_numpy(y_hat)


def encode_image(x: Tensor, model: TeacherModel, radius: int = DEFAULT_SUPPORT_RADIUS) -> ImageContainer:
    """Compress one image into an MDI1 container."""
    h, w = x.shape[-2:]
    y = encode(x, model)
    _, z_bytes, y_bytes = encode_latent(y, model.entropy_model, radius)
    return ImageContainer(
        width=w,
        height=h,
        model_id=weights_crc32(model),
        support_radius=radius,
        z_bytes=z_bytes,
        y_bytes=y_bytes,
    )


def decode_image(
    container: ImageContainer, model: TeacherModel, rn=None, coarse: bool = False
) -> Tensor:
    """Decompress an MDI1 container with the full, coarse, or student decoder."""
    if container.model_id != weights_crc32(model):
        raise CorruptStreamError("container was produced by a different model")
    s = model.config.downsample_factor
    shape = (
        model.config.latent_channels,
        math.ceil(container.height / s),
        math.ceil(container.width / s),
    )
    y_hat = decode_latent(
        container.z_bytes, container.y_bytes, model.entropy_model, shape, container.support_radius
    )
    size = (container.height, container.width)
    if rn is not None:
        from .micro_net import student_decode

        return student_decode(y_hat.squeeze(0), model, rn, size=size)
    if coarse:
        return decode_without_resblocks(y_hat.squeeze(0), model, size=size)
    return decode_full(y_hat.squeeze(0), model, size=size)


# ---------------------------------------------------------------------------
# Training


def _gather_frames(dataset) -> list[Tensor]:
    frames: list[Tensor] = []
    if hasattr(dataset, "frames"):
        frames = list(dataset.frames)
    elif isinstance(dataset, (list, tuple)):
        for item in dataset:
            frames.extend(item.frames if hasattr(item, "frames") else [item])
    if not frames:
        raise DataError("training dataset is empty")
    return frames


def _sample_crop_batch(frames: list[Tensor], crop: int, batch: int, rng: np.random.Generator) -> Tensor:
    out = []
    for _ in range(batch):
        f = frames[int(rng.integers(len(frames)))]
        h, w = f.shape[-2:]
        if crop > h or crop > w:
            raise ConfigError(f"crop {crop} exceeds frame size {h}x{w}")
        i = int(rng.integers(h - crop + 1))
        j = int(rng.integers(w - crop + 1))
        out.append(f[..., i : i + crop, j : j + crop])
    return torch.stack(out)


def train_teacher(
    dataset,
    config: CodecConfig,
    steps: int = 1500,
    k_mse: float = 1.0,
    k_perceptual: float = 1.0,
    lambda_rate: float = 0.05,
    crop: int = 64,
    batch: int = 4,
    lr: float = 1e-4,
    log=None,
    log_every: int = 100,
) -> TeacherModel:
    """Train the autoencoder on random crops with rate + distortion + perceptual loss.

    Rate terms are normalized to bits per pixel so ``lambda_rate`` is
    resolution-independent. Deterministic for a fixed ``config.seed``.
    """
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    frames = _gather_frames(dataset)
    model = TeacherModel(config)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng(config.seed)
    noise_gen = seeded_generator(config.seed + 1)

    for step in range(1, steps + 1):
        xb = _sample_crop_batch(frames, crop, batch, rng)
        y = model.encoder(xb)
        x_hat = model.tail(model.res_blocks(model.head(round_ste(y))))

        mse = F.mse_loss(x_hat, xb)
        loss = k_mse * mse
        dp = None
        if k_perceptual > 0:
            dp = perceptual_distance(x_hat, xb)
            loss = loss + k_perceptual * dp
        if lambda_rate > 0:
            _, bits = model.entropy_model.training_pass(y, noise_gen)
            pixels = xb.shape[0] * xb.shape[-2] * xb.shape[-1]
            loss = loss + lambda_rate * bits / pixels

        opt.zero_grad()
        loss.backward()
        opt.step()
        if log is not None and (step % log_every == 0 or step == steps):
            dp_v = float(dp) if dp is not None else 0.0
            log(f"step={step} mse={float(mse):.6f} dp={dp_v:.6f} total={float(loss):.6f}")

    model.eval()
    model.requires_grad_(False)
    return model


# ---------------------------------------------------------------------------
# Checkpoint round-trip


def save_teacher(model: TeacherModel) -> bytes:
    from .bitstream import write_checkpoint

    records = {k: v.detach().cpu().numpy().astype(np.float32) for k, v in model.state_dict().items()}
    return write_checkpoint({"kind": "teacher", "codec": config_to_dict(model.config)}, records)


def load_teacher(data: bytes) -> TeacherModel:
    from .bitstream import read_checkpoint

    cfg, records = read_checkpoint(data)
    if cfg.get("kind") != "teacher":
        raise DataError(f"checkpoint holds a {cfg.get('kind')!r} model, expected teacher")
    model = TeacherModel(config_from_dict("codec", cfg["codec"]))
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in records.items()})
    model.eval()
    model.requires_grad_(False)
    return model

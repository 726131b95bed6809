"""Configuration dataclasses for the codec, the student trunk and training."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError

SIGMA_MIN = 1e-6          # scale floor for every Gaussian entropy model
P_MIN = 2.0 ** -16        # per-element probability floor (bounds code length at 16 bits)


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


@dataclass(frozen=True)
class CodecConfig:
    """Geometry and capacity of the image autoencoder."""

    latent_channels: int = 32
    trunk_channels: int = 64
    downsample_factor: int = 16
    hyper_channels: int = 32
    trunk_blocks: int = 6
    seed: int = 0

    def __post_init__(self):
        for name in ("latent_channels", "trunk_channels", "hyper_channels", "trunk_blocks"):
            _require(getattr(self, name) >= 1, f"{name} must be >= 1")
        s = self.downsample_factor
        _require(s >= 2 and (s & (s - 1)) == 0, "downsample_factor must be a power of 2, >= 2")


@dataclass(frozen=True)
class MicroRNConfig:
    """Size of the student residual trunk."""

    hidden_channels: int = 16
    num_blocks: int = 1
    io_channels: int = 64

    def __post_init__(self):
        for name in ("hidden_channels", "num_blocks", "io_channels"):
            _require(getattr(self, name) >= 1, f"{name} must be >= 1")


@dataclass(frozen=True)
class DistillConfig:
    """Hyper-parameters of the student-trunk training loop."""

    k_mse: float = 1.0
    k_perceptual: float = 1.0
    steps: int = 2000
    crop: int = 64
    lr: float = 1e-4
    batch: int = 4
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        _require(self.k_mse >= 0 and self.k_perceptual >= 0, "loss weights must be non-negative")
        _require(self.k_mse + self.k_perceptual > 0, "at least one loss weight must be positive")
        _require(self.steps >= 1, "steps must be >= 1")
        _require(self.crop >= 1 and self.batch >= 1, "crop and batch must be >= 1")


@dataclass(frozen=True)
class GOPStructure:
    """Group-of-pictures layout: one intra frame followed by `gop` predicted frames."""

    gop: int = 10

    def __post_init__(self):
        _require(self.gop >= 1, "gop must be >= 1")


@dataclass(frozen=True)
class VideoConfig:
    """Capacity and training schedule of the video pipeline."""

    flow_channels: int = 32        # flow-codec width (the reference setup uses 128; desk default is smaller)
    flow_hyper_channels: int = 16
    residual_hyper_channels: int = 32
    mc_channels: int = 32
    lambda_w: float = 0.01
    lambda_final: float = 0.01
    k_mse: float = 1.0
    k_perceptual: float = 1.0
    phase_steps: tuple[int, int, int, int] = (2000, 1000, 3000, 1000)
    n_frames: int = 3              # rollout length of the final phase
    crop: int = 64
    lr: float = 1e-4
    batch: int = 4
    seed: int = 0
    log_every: int = 200

    def __post_init__(self):
        _require(len(self.phase_steps) == 4, "phase_steps must have 4 entries")
        _require(all(s >= 1 for s in self.phase_steps), "phase steps must be >= 1")
        _require(self.n_frames >= 1, "n_frames must be >= 1")
        _require(self.lambda_w >= 0 and self.lambda_final >= 0, "rate weights must be non-negative")


_CONFIG_KINDS = {
    "codec": CodecConfig,
    "micro_rn": MicroRNConfig,
    "distill": DistillConfig,
    "gop": GOPStructure,
    "video": VideoConfig,
}


def config_to_dict(cfg) -> dict:
    return asdict(cfg)


def config_from_dict(kind: str, data: dict):
    """Rebuild a config dataclass from a plain dict, rejecting unknown keys."""
    cls = _CONFIG_KINDS.get(kind)
    if cls is None:
        raise ConfigError(f"unknown config kind {kind!r}")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {kind} config keys: {sorted(unknown)}")
    if "phase_steps" in data and isinstance(data["phase_steps"], list):
        data = dict(data, phase_steps=tuple(data["phase_steps"]))
    return cls(**data)

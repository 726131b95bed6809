"""Frame ingestion, synthetic toy sequences and deterministic crop sampling.

Synthetic kinds cover two complexity tiers: ``moving_texture`` (dense fine
detail, known integer motion, the hard case for texture synthesis) and
``panning_gradient`` (smooth, easy content); ``noise_bg_face_like`` puts a
smooth structured foreground on a static noisy background.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, DataError

_IMAGE_EXTENSIONS = (".png", ".ppm", ".pgm", ".bmp")


@dataclass
class SequenceSource:
    id: str
    frames: list[torch.Tensor]
    gt_flow: tuple[float, float] | None = None  # constant (dy, dx) per frame step, when known

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    @property
    def height(self) -> int:
        return self.frames[0].shape[-2]

    @property
    def width(self) -> int:
        return self.frames[0].shape[-1]


def _validate_frames(frames: list[torch.Tensor], source_id: str) -> None:
    if not frames:
        raise DataError(f"sequence {source_id!r} has no frames")
    shape = frames[0].shape
    for i, f in enumerate(frames):
        if f.shape != shape:
            raise DataError(f"sequence {source_id!r}: frame {i} shape {tuple(f.shape)} != {tuple(shape)}")


# ---------------------------------------------------------------------------
# Loading


def _load_image_dir(path: str) -> list[torch.Tensor]:
    from PIL import Image

    names = sorted(n for n in os.listdir(path) if n.lower().endswith(_IMAGE_EXTENSIONS))
    if not names:
        raise DataError(f"no image files in {path!r}")
    frames = []
    for name in names:
        try:
            with Image.open(os.path.join(path, name)) as img:
                arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        except OSError as exc:
            raise DataError(f"unreadable image {name!r}: {exc}") from exc
        frames.append(torch.from_numpy(arr.transpose(2, 0, 1).copy()))
    return frames


def _load_raw_planar(path: str) -> list[torch.Tensor]:
    sidecar = path + ".dims"
    if not os.path.exists(sidecar):
        raise DataError(f"raw file {path!r} needs a sidecar {sidecar!r} with 'width height frames'")
    with open(sidecar) as fh:
        parts = fh.read().split()
    if len(parts) != 3:
        raise DataError(f"sidecar {sidecar!r} must hold exactly 'width height frames'")
    width, height, count = (int(p) for p in parts)
    data = np.fromfile(path, dtype=np.uint8)
    expected = count * 3 * height * width
    if data.size != expected:
        raise DataError(f"raw file holds {data.size} bytes, dims imply {expected}")
    planes = data.reshape(count, 3, height, width).astype(np.float32) / 255.0
    return [torch.from_numpy(planes[i].copy()) for i in range(count)]


def _parse_keyvalue(path: str) -> dict[str, str]:
    spec: dict[str, str] = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataError(f"bad spec line {line!r} in {path!r} (expected key=value)")
            key, value = line.split("=", 1)
            spec[key.strip()] = value.strip()
    return spec


def load_sequence(path: str, source_id: str | None = None) -> SequenceSource:
    """Load frames from an image directory, a raw planar file, or a key=value generator spec."""
    sid = source_id or os.path.basename(os.path.normpath(path))
    if os.path.isdir(path):
        frames = _load_image_dir(path)
    elif path.endswith((".spec", ".cfg")):
        spec = _parse_keyvalue(path)
        try:
            return synth_sequence(
                kind=spec["kind"],
                frames=int(spec.get("frames", 25)),
                size=int(spec.get("size", 128)),
                seed=int(spec.get("seed", 0)),
                source_id=source_id or spec.get("id"),
            )
        except KeyError as exc:
            raise DataError(f"generator spec {path!r} missing key {exc}") from exc
    elif os.path.isfile(path):
        frames = _load_raw_planar(path)
    else:
        raise DataError(f"no such sequence source: {path!r}")
    _validate_frames(frames, sid)
    return SequenceSource(id=sid, frames=frames)


# ---------------------------------------------------------------------------
# Synthetic sequences


def _smooth(arr: np.ndarray, passes: int) -> np.ndarray:
    for _ in range(passes):
        arr = (
            arr
            + np.roll(arr, 1, axis=0)
            + np.roll(arr, -1, axis=0)
            + np.roll(arr, 1, axis=1)
            + np.roll(arr, -1, axis=1)
        ) / 5.0
    return arr


def _normalize01(arr: np.ndarray) -> np.ndarray:
    lo, hi = arr.min(), arr.max()
    return (arr - lo) / (hi - lo + 1e-9)


def _colorize(gray: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Lift one plane to three channels with distinct mixing per channel."""
    mixes = 0.6 + 0.4 * rng.random(3)
    offsets = 0.2 * rng.random(3)
    chans = [np.clip(gray * m + o * (1 - gray), 0.0, 1.0) for m, o in zip(mixes, offsets)]
    return np.stack(chans).astype(np.float32)


def synth_sequence(
    kind: str, frames: int, size: int, seed: int, source_id: str | None = None
) -> SequenceSource:
    """Deterministic toy sequence; ``moving_texture`` pans by exactly (0, 1) px per frame."""
    if frames < 1 or size < 8:
        raise ConfigError("frames must be >= 1 and size >= 8")
    rng = np.random.default_rng(seed)
    sid = source_id or f"{kind}-{size}-{seed}"

    if kind == "moving_texture":
        base = rng.random((size, size))
        base = 0.65 * _normalize01(_smooth(base, 1)) + 0.35 * rng.random((size, size))
        rgb = _colorize(_normalize01(base), rng)
        out = [
            torch.from_numpy(np.roll(rgb, shift=-t, axis=2).copy()) for t in range(frames)
        ]
        return SequenceSource(id=sid, frames=out, gt_flow=(0.0, 1.0))

    if kind == "panning_gradient":
        yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        base = 0.5 + 0.25 * np.sin(2 * np.pi * xx / size + rng.random() * 6.28) * np.cos(
            2 * np.pi * yy / size
        )
        base += 0.15 * np.sin(4 * np.pi * (xx + yy) / size)
        rgb = _colorize(_normalize01(base), rng)
        out = [torch.from_numpy(np.roll(rgb, shift=-t, axis=2).copy()) for t in range(frames)]
        return SequenceSource(id=sid, frames=out, gt_flow=(0.0, 1.0))

    if kind == "noise_bg_face_like":
        bg = 0.35 + 0.25 * rng.random((size, size))
        yy, xx = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
        out = []
        radius = size / 5.0
        for t in range(frames):
            cy = size / 2 + (size / 6) * np.sin(2 * np.pi * t / max(frames, 8))
            cx = size / 2 + (size / 6) * np.cos(2 * np.pi * t / max(frames, 8))
            blob = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius**2)))
            eyes = np.exp(-(((yy - cy + radius / 2) ** 2 + (xx - cx - radius / 2) ** 2) / 6.0))
            eyes += np.exp(-(((yy - cy + radius / 2) ** 2 + (xx - cx + radius / 2) ** 2) / 6.0))
            plane = np.clip(bg + 0.55 * blob - 0.5 * eyes, 0.0, 1.0)
            out.append(torch.from_numpy(_colorize(plane, np.random.default_rng(seed + 1))))
        return SequenceSource(id=sid, frames=out)

    raise ConfigError(f"unknown synthetic kind {kind!r}")


# ---------------------------------------------------------------------------
# Crop sampling


def sample_crops(
    source: SequenceSource | list[torch.Tensor],
    crop: int = 256,
    count: int = 4,
    seed: int = 0,
    align: int = 1,
) -> torch.Tensor:
    """Seeded uniform crops, stacked to (count, 3, crop, crop).

    ``align`` restricts top-left corners to a grid (the distillation loop uses
    the codec stride so image crops map onto whole latent cells).
    """
    frames = source.frames if isinstance(source, SequenceSource) else source
    h, w = frames[0].shape[-2:]
    if crop > h or crop > w:
        raise ConfigError(f"crop {crop} larger than frames {h}x{w}")
    rng = np.random.default_rng(seed)
    max_i = (h - crop) // align
    max_j = (w - crop) // align
    out = []
    for _ in range(count):
        f = frames[int(rng.integers(len(frames)))]
        i = int(rng.integers(max_i + 1)) * align
        j = int(rng.integers(max_j + 1)) * align
        out.append(f[..., i : i + crop, j : j + crop])
    return torch.stack(out)

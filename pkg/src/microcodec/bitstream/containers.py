"""Binary container formats and bit-per-pixel accounting.

Four little-endian, CRC-32-trailed containers (byte-offset tables live in
FORMATS.md):

* ``MDT1`` model checkpoint: config JSON + named weight records
* ``MDB1`` weight bundle: the student-trunk parameters sent as side information
* ``MDI1`` single image: hyper-latent and latent payloads
* ``MDV1`` video: optional embedded bundle + per-GOP latent/flow/residual payloads
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from ..config import MicroRNConfig
from ..errors import ConfigError, CorruptStreamError

VERSION = 1
MAGIC_MODEL = b"MDT1"
MAGIC_IMAGE = b"MDI1"
MAGIC_VIDEO = b"MDV1"
MAGIC_BUNDLE = b"MDB1"

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f2")}
_DTYPE_BY_NAME = {"float32": 0, "float16": 1}


class _Writer:
    def __init__(self, magic: bytes):
        self.buf = bytearray(magic)
        self.buf.append(VERSION)

    def u8(self, v: int):
        self.buf.append(v & 0xFF)

    def u16(self, v: int):
        self.buf += struct.pack("<H", v)

    def u32(self, v: int):
        self.buf += struct.pack("<I", v)

    def raw(self, b: bytes):
        self.buf += b

    def sized(self, b: bytes):
        self.u32(len(b))
        self.buf += b

    def finish(self) -> bytes:
        self.buf += struct.pack("<I", zlib.crc32(bytes(self.buf)))
        return bytes(self.buf)


class _Reader:
    def __init__(self, data: bytes, magic: bytes):
        if len(data) < len(magic) + 5:
            raise CorruptStreamError("container truncated")
        if data[: len(magic)] != magic:
            raise CorruptStreamError(f"bad magic, expected {magic!r}")
        (crc,) = struct.unpack("<I", data[-4:])
        if crc != zlib.crc32(data[:-4]):
            raise CorruptStreamError("CRC mismatch")
        self.data = data[:-4]
        self.pos = len(magic)
        version = self.u8()
        if version != VERSION:
            raise CorruptStreamError(f"unsupported container version {version}")

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptStreamError("container field overruns payload")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self._take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def sized(self) -> bytes:
        return self._take(self.u32())

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos

    def expect_end(self):
        if self.remaining:
            raise CorruptStreamError(f"{self.remaining} trailing bytes in container")


# ---------------------------------------------------------------------------
# Weight bundle (MDB1)


@dataclass(frozen=True)
class WeightBundle:
    """Serialized student-trunk parameters plus the config needed to rebuild them."""

    subset_id: str
    config: MicroRNConfig
    precision: int
    param_bytes: bytes

    def __post_init__(self):
        if self.precision not in (16, 32):
            raise ConfigError("bundle precision must be 16 or 32 bits")

    @property
    def param_count(self) -> int:
        return len(self.param_bytes) // (self.precision // 8)

    def to_bytes(self) -> bytes:
        w = _Writer(MAGIC_BUNDLE)
        sid = self.subset_id.encode()
        w.u16(len(sid))
        w.raw(sid)
        w.u32(self.config.hidden_channels)
        w.u32(self.config.num_blocks)
        w.u32(self.config.io_channels)
        w.u8(self.precision)
        w.sized(self.param_bytes)
        return w.finish()

    @classmethod
    def from_bytes(cls, data: bytes) -> "WeightBundle":
        r = _Reader(data, MAGIC_BUNDLE)
        sid = r._take(r.u16()).decode()
        cfg = MicroRNConfig(
            hidden_channels=r.u32(), num_blocks=r.u32(), io_channels=r.u32()
        )
        precision = r.u8()
        params = r.sized()
        r.expect_end()
        return cls(subset_id=sid, config=cfg, precision=precision, param_bytes=params)


def pack_weight_bundle(rn, subset_id: str, precision: int = 32) -> WeightBundle:
    """Dump a trained student trunk into a bundle (parameters in build order)."""
    flat = rn.flatten_params()
    if precision == 32:
        raw = flat.astype("<f4").tobytes()
    elif precision == 16:
        raw = flat.astype("<f2").tobytes()
    else:
        raise ConfigError("bundle precision must be 16 or 32 bits")
    return WeightBundle(subset_id=subset_id, config=rn.config, precision=precision, param_bytes=raw)


def unpack_weight_bundle(bundle: WeightBundle):
    """Rebuild the student trunk carried by ``bundle``."""
    from ..micro_net import MicroResNet, count_params

    expected = count_params(bundle.config)
    if bundle.param_count != expected:
        raise CorruptStreamError(
            f"bundle carries {bundle.param_count} parameters, config implies {expected}"
        )
    dt = "<f4" if bundle.precision == 32 else "<f2"
    flat = np.frombuffer(bundle.param_bytes, dtype=dt).astype(np.float32)
    rn = MicroResNet(bundle.config)
    rn.load_flat_params(flat)
    return rn


def bpp_overhead(bundle: WeightBundle, frames: int, width: int, height: int) -> float:
    """Side-information cost of a bundle amortized over ``frames`` frames."""
    if frames < 1:
        raise ConfigError("frames must be >= 1")
    return len(bundle.to_bytes()) * 8.0 / (frames * width * height)


# ---------------------------------------------------------------------------
# Model checkpoint (MDT1)


def write_checkpoint(config: dict, records: dict) -> bytes:
    """Serialize a config dict plus named weight arrays (insertion order kept)."""
    w = _Writer(MAGIC_MODEL)
    w.sized(json.dumps(config, sort_keys=True).encode())
    for name, arr in records.items():
        arr = np.asarray(arr)
        code = _DTYPE_BY_NAME.get(arr.dtype.name)
        if code is None:
            raise ConfigError(f"record {name!r} has unsupported dtype {arr.dtype}")
        nb = name.encode()
        w.u16(len(nb))
        w.raw(nb)
        w.u8(code)
        w.u8(arr.ndim)
        for d in arr.shape:
            w.u32(d)
        w.raw(np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes())
    return w.finish()


def read_checkpoint(data: bytes) -> tuple[dict, dict]:
    r = _Reader(data, MAGIC_MODEL)
    config = json.loads(r.sized().decode())
    records: dict[str, np.ndarray] = {}
    while r.remaining:
        name = r._take(r.u16()).decode()
        dt = _DTYPE_CODES.get(r.u8())
        if dt is None:
            raise CorruptStreamError(f"record {name!r} has unknown dtype code")
        rank = r.u8()
        shape = tuple(r.u32() for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = r._take(count * dt.itemsize)
        records[name] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
    return config, records


# ---------------------------------------------------------------------------
# Image container (MDI1)


@dataclass(frozen=True)
class ImageContainer:
    width: int
    height: int
    model_id: int
    support_radius: int
    z_bytes: bytes
    y_bytes: bytes

    def payload_bytes(self) -> int:
        return len(self.z_bytes) + len(self.y_bytes)

    def to_bytes(self) -> bytes:
        w = _Writer(MAGIC_IMAGE)
        w.u32(self.width)
        w.u32(self.height)
        w.u32(self.model_id)
        w.u16(self.support_radius)
        w.sized(self.z_bytes)
        w.sized(self.y_bytes)
        return w.finish()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ImageContainer":
        r = _Reader(data, MAGIC_IMAGE)
        out = cls(
            width=r.u32(),
            height=r.u32(),
            model_id=r.u32(),
            support_radius=r.u16(),
            z_bytes=r.sized(),
            y_bytes=r.sized(),
        )
        r.expect_end()
        return out


# ---------------------------------------------------------------------------
# Video container (MDV1)


@dataclass(frozen=True)
class PFramePayload:
    flow_z: bytes
    flow_w: bytes
    res_z: bytes
    res_r: bytes

    def payload_bytes(self) -> int:
        return len(self.flow_z) + len(self.flow_w) + len(self.res_z) + len(self.res_r)


@dataclass(frozen=True)
class GOPPayload:
    i_z: bytes
    i_y: bytes
    p_frames: tuple[PFramePayload, ...] = ()

    def payload_bytes(self) -> int:
        return len(self.i_z) + len(self.i_y) + sum(p.payload_bytes() for p in self.p_frames)


@dataclass(frozen=True)
class GOPBitstream:
    width: int
    height: int
    num_frames: int
    gop: int
    model_id: int
    support_radius: int
    gops: tuple[GOPPayload, ...]
    bundle: WeightBundle | None = None

    def payload_bytes(self) -> int:
        return sum(g.payload_bytes() for g in self.gops)

    def to_bytes(self) -> bytes:
        w = _Writer(MAGIC_VIDEO)
        w.u32(self.width)
        w.u32(self.height)
        w.u32(self.num_frames)
        w.u16(self.gop)
        w.u32(self.model_id)
        w.u16(self.support_radius)
        w.u8(1 if self.bundle is not None else 0)
        if self.bundle is not None:
            w.sized(self.bundle.to_bytes())
        for g in self.gops:
            w.sized(g.i_z)
            w.sized(g.i_y)
            w.u16(len(g.p_frames))
            for p in g.p_frames:
                w.sized(p.flow_z)
                w.sized(p.flow_w)
                w.sized(p.res_z)
                w.sized(p.res_r)
        return w.finish()

    @classmethod
    def from_bytes(cls, data: bytes) -> "GOPBitstream":
        r = _Reader(data, MAGIC_VIDEO)
        width, height, num_frames = r.u32(), r.u32(), r.u32()
        gop, model_id, radius = r.u16(), r.u32(), r.u16()
        bundle = WeightBundle.from_bytes(r.sized()) if r.u8() else None
        gops = []
        while r.remaining:
            i_z = r.sized()
            i_y = r.sized()
            n_p = r.u16()
            p_frames = tuple(
                PFramePayload(flow_z=r.sized(), flow_w=r.sized(), res_z=r.sized(), res_r=r.sized())
                for _ in range(n_p)
            )
            gops.append(GOPPayload(i_z=i_z, i_y=i_y, p_frames=p_frames))
        return cls(
            width=width,
            height=height,
            num_frames=num_frames,
            gop=gop,
            model_id=model_id,
            support_radius=radius,
            gops=tuple(gops),
            bundle=bundle,
        )


def total_bpp(
    bitstream: GOPBitstream | ImageContainer,
    frames: int,
    width: int,
    height: int,
    include_bundle: bool = False,
) -> float:
    """Exact coded size in bits per pixel, optionally charging the weight bundle."""
    bits = bitstream.payload_bytes() * 8.0
    if include_bundle:
        bundle = getattr(bitstream, "bundle", None)
        if bundle is None:
            raise ConfigError("bitstream carries no weight bundle to include")
        bits += len(bundle.to_bytes()) * 8.0
    return bits / (frames * width * height)

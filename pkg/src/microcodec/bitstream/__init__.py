"""Entropy coding, CDF tables and container formats."""

from .containers import (
    GOPBitstream,
    GOPPayload,
    ImageContainer,
    PFramePayload,
    WeightBundle,
    bpp_overhead,
    pack_weight_bundle,
    read_checkpoint,
    total_bpp,
    unpack_weight_bundle,
    write_checkpoint,
)
from .rangecoder import (
    backend_name,
    decode_centered_values,
    encode_centered_values,
    range_decode,
    range_encode,
    validate_cdf,
)
from .tables import (
    DEFAULT_SUPPORT_RADIUS,
    centered_coding_plan,
    estimated_bits,
    gaussian_cdf_bank,
    gaussian_cdf_table,
)

__all__ = [
    "GOPBitstream",
    "GOPPayload",
    "ImageContainer",
    "PFramePayload",
    "WeightBundle",
    "backend_name",
    "bpp_overhead",
    "centered_coding_plan",
    "decode_centered_values",
    "DEFAULT_SUPPORT_RADIUS",
    "encode_centered_values",
    "estimated_bits",
    "gaussian_cdf_bank",
    "gaussian_cdf_table",
    "pack_weight_bundle",
    "range_decode",
    "range_encode",
    "read_checkpoint",
    "total_bpp",
    "unpack_weight_bundle",
    "validate_cdf",
    "write_checkpoint",
]

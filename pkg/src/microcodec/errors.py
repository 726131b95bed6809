"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 2, I/O errors -> 3,
BitstreamError (and subclasses) -> 4.
"""


class CodecError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(CodecError, ValueError):
    """Invalid configuration value or incompatible configuration pair."""


class ShapeError(CodecError, ValueError):
    """Tensor shapes do not match the operation's contract."""


class DimensionTooSmallError(ShapeError):
    """Image too small to reflect-pad up to the codec stride."""


class DataError(CodecError, IOError):
    """Unreadable, malformed or inconsistent input data."""


class BitstreamError(CodecError):
    """Malformed serialized data."""


class CorruptStreamError(BitstreamError):
    """CRC mismatch, bad magic or truncated container."""


class SymbolOutOfSupportError(BitstreamError):
    """Symbol index outside its CDF table's support."""


class IncompatibleBundleError(BitstreamError):
    """Weight bundle does not fit the decoder it is loaded into."""

"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class NumericError(ArithmeticError):
    """Raised when an operation receives or produces non-finite values."""


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration."""


class ImageDecodeError(OSError):
    """Raised when an image file cannot be decoded.

    ``offset`` is the byte position at which decoding failed, when known.
    """

    def __init__(self, message, path=None, offset=None):
        self.path = path
        self.offset = offset
        parts = [message]
        if path is not None:
            parts.append(f"file={path}")
        if offset is not None:
            parts.append(f"offset={offset}")
        super().__init__(" ".join(parts))


class CheckpointError(OSError):
    """Raised for malformed or incompatible checkpoint files."""

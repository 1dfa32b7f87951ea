"""Exception types shared across the package."""


class ParseError(ValueError):
    """Malformed event or checkpoint file. ``offset`` is a byte offset (binary) or line number (CSV)."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (at offset {offset})")
        self.offset = offset


class ValidationError(ValueError):
    """Data that parses but violates a stream invariant."""


class ConfigError(ValueError):
    """Invalid configuration values."""


class BoundsError(IndexError):
    """Coordinate outside the spatial domain."""


class DivergenceError(RuntimeError):
    """Non-finite loss or gradient encountered during training."""

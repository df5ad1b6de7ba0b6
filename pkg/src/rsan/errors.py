"""Exception types shared across the package."""


class RsanError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(RsanError):
    """An operand's shape violates an operation's contract."""


class PaddingRequiredError(ShapeError):
    """Spatial dims are incompatible with pooling; the caller must pad first."""


class ConfigError(RsanError):
    """Invalid configuration value or combination."""


class CheckpointError(RsanError):
    """Malformed, truncated, or mismatched checkpoint file."""


class GradientMissingError(RsanError):
    """A trainable parameter has no gradient at optimizer-step time."""


class DivergenceError(RsanError):
    """Training produced a non-finite loss."""

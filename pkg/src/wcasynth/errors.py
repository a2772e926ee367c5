"""Exception hierarchy shared across the package."""


class WCAError(Exception):
    """Base class for all package errors."""


class ShapeError(WCAError, ValueError):
    """Raised when tensor shapes do not conform to an op's contract."""


class ConfigError(WCAError, ValueError):
    """Raised when a configuration fails validation."""


class CheckpointError(WCAError, IOError):
    """Raised for malformed, truncated or incompatible checkpoint files."""


class NumericalError(WCAError, ArithmeticError):
    """Raised when a non-finite value would corrupt parameters."""

"""Exception types shared across the package."""


class LPNetError(Exception):
    """Base class for all package errors."""


class ShapeError(LPNetError, ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class ConfigError(LPNetError, ValueError):
    """Invalid configuration or parameter value."""


class DataError(LPNetError):
    """Missing, corrupt or otherwise unusable input data."""


class NumericError(LPNetError, ArithmeticError):
    """Non-finite values appeared in a computation."""

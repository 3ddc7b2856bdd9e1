"""Exception types raised across the package."""


class VaelocError(Exception):
    """Base class for all package errors."""

    category = "runtime"


class ConfigurationError(VaelocError, ValueError):
    """Invalid configuration, shape or argument."""

    category = "config"


class NumericalError(VaelocError, FloatingPointError):
    """A computation produced NaN or Inf."""

    category = "numerical"


class CheckpointError(VaelocError):
    """A checkpoint could not be read or is incompatible."""

    category = "checkpoint"


class DataError(VaelocError):
    """Input data is missing, empty or degenerate."""

    category = "data"

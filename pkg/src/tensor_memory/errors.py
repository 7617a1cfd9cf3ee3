"""Exception hierarchy shared by every subpackage."""


class TensorMemoryError(Exception):
    """Base class for all package errors."""


class DimensionError(TensorMemoryError, ValueError):
    """Operand shapes are incompatible."""


class UnsupportedKernelError(DimensionError):
    """A convolution kernel is not axis-aligned."""


class NumericError(TensorMemoryError, FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""


class ConfigError(TensorMemoryError, ValueError):
    """A configuration value is invalid.

    ``key`` names the offending field when known.
    """

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class SnapshotFormatError(TensorMemoryError, IOError):
    """A binary container has the wrong magic, version or layout."""

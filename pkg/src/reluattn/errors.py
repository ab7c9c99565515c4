"""Exception taxonomy, aligned with the CLI exit codes.

Exit code 1 (usage): UsageError, ConfigError, ShapeError.
Exit code 2 (numerical): NumericalError and its NonFiniteError subclass.
Exit code 3 (I/O): DataFormatError plus any OSError from the filesystem.
"""


class ReluAttnError(Exception):
    """Base class for everything this package raises deliberately."""


class UsageError(ReluAttnError):
    """Bad CLI invocation or malformed config file."""


class ConfigError(ReluAttnError):
    """Inconsistent or out-of-range configuration / parameter set."""


class ShapeError(ReluAttnError):
    """Tensor dimensions do not line up for the requested operation."""


class NumericalError(ReluAttnError):
    """A computation produced a numerically unusable result (NaN loss etc.)."""


class NonFiniteError(NumericalError):
    """NaN or Inf surfaced where a finite value is required."""


class DataFormatError(ReluAttnError):
    """On-disk bytes do not match the documented binary format."""

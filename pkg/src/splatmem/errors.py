"""Exception hierarchy shared across the package.

The command line layer maps these onto process exit codes: configuration
errors exit 2, data errors exit 3, numerical failures exit 4.
"""


class SplatMemError(Exception):
    """Base class for all package errors."""


class ConfigError(SplatMemError):
    """Invalid configuration: bad values, missing files named by a config."""


class DataError(SplatMemError):
    """Malformed input data: datasets, codebook files, checkpoints, scripts."""


class CapacityError(DataError):
    """A fixed-capacity resource ran out (for example, no free codewords)."""


class NumericalError(SplatMemError):
    """Non-finite values where finite ones are required."""

"""Exception types shared across the package.

The CLI maps these to exit codes: usage/config problems exit 1, data
problems exit 2, numeric failures exit 3.
"""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NumericError(ArithmeticError):
    """A computation hit an invalid numeric state (NaN input, zero denominator)."""


class DataError(ValueError):
    """A dataset or episode request cannot be satisfied."""


class FormatError(DataError):
    """An embedding file does not conform to the HOSPEMB format."""


class DegenerateEpisodeError(DataError):
    """All relative features of an episode coincide; edge metrics are undefined."""


class ConfigError(ValueError):
    """A configuration is internally inconsistent."""

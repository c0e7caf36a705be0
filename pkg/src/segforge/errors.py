"""Exception types shared across the toolkit.

The CLI maps them onto its exit codes: usage/configuration problems exit
with 2, data/format problems with 3, numeric failures with 4.
"""

from .autodiff import DimensionError, NumericError


class UsageError(ValueError):
    pass


class ConfigurationError(UsageError):
    pass


class DataError(ValueError):
    pass


class FormatError(DataError):
    pass


class VersionError(FormatError):
    pass


class DegenerateInputError(DataError):
    pass


__all__ = [
    "ConfigurationError",
    "DataError",
    "DegenerateInputError",
    "DimensionError",
    "FormatError",
    "NumericError",
    "UsageError",
    "VersionError",
]

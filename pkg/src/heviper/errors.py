"""Exception taxonomy.

Each error class carries the process exit code the CLI maps it to:
2 for configuration problems, 3 for bad data, 4 for an empty search space.
"""

from __future__ import annotations


class HeviperError(Exception):
    exit_code = 3


class ConfigError(HeviperError, ValueError):
    """Inconsistent dimensions, bad parameters or an invalid config file."""

    exit_code = 2


class InputError(HeviperError, ValueError):
    """Malformed input data (non-square grids, zero vectors, bad images)."""


class ShapeError(InputError):
    pass


class RangeError(InputError):
    """A height lies outside the configured partition range."""


class EmptyPoolError(InputError):
    pass


class EmptySearchSpaceError(HeviperError):
    """Every selected sub-database is empty."""

    exit_code = 4


class SchemaError(InputError):
    """A manifest or report is missing required columns/fields."""


class LoadError(InputError):
    """Base class for binary file decoding failures."""


class MagicMismatchError(LoadError):
    pass


class VersionMismatchError(LoadError):
    pass


class TruncatedFileError(LoadError):
    pass


class ChecksumError(LoadError):
    pass

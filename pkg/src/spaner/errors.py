"""Exception hierarchy shared by every module.

Three families map onto the CLI exit codes: validation problems
(bad config, bad shapes, bad arguments) exit 2, data and file-format
problems exit 3, numeric failures exit 4.
"""


class SpanerError(Exception):
    """Base class for all package errors."""


class ConfigError(SpanerError, ValueError):
    """A configuration value or argument violates its contract."""


class DimensionError(SpanerError, ValueError):
    """Array shapes are incompatible; the message names both shapes."""


class DataError(SpanerError, ValueError):
    """A dataset violates a precondition (empty, degenerate, mislabeled)."""


class FormatError(SpanerError, ValueError):
    """A file does not parse; the message includes the byte offset."""


class LineageError(SpanerError, ValueError):
    """Two checkpoints being compared do not describe the same model."""


class NumericError(SpanerError, ArithmeticError):
    """A computation produced a non-finite value."""


VALIDATION_ERRORS = (ConfigError, DimensionError)
DATA_ERRORS = (DataError, FormatError, LineageError)

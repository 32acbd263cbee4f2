"""Exception hierarchy shared by every module.

The CLI maps the three top-level families onto its exit codes
(config -> 2, data -> 3, checkpoint -> 4).
"""


class CapsError(Exception):
    """Base class for all errors raised by capsrem."""


class ConfigError(CapsError, ValueError):
    """Invalid hyperparameter, shape contract or configuration key."""


class UsageError(CapsError, RuntimeError):
    """An API was called in a state where it cannot do anything sensible."""


class ShapeError(ConfigError):
    """Two operands disagree on a dimension."""


class DataError(CapsError, ValueError):
    """Malformed or inconsistent dataset contents."""


class BadMagicError(DataError):
    pass


class CountMismatchError(DataError):
    pass


class TruncatedFileError(DataError):
    pass


class LabelRangeError(DataError):
    pass


class EmptySplitError(DataError):
    pass


class CheckpointError(CapsError):
    """A checkpoint could not be decoded."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCRCError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass

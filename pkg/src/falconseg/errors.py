"""Exception hierarchy.

Two broad families matter for the CLI exit-code contract: DataError (exit 3)
for problems with datasets or inputs on disk, ConfigError (exit 4) for
invalid or mismatched configuration.  Everything else surfaces as exit 5.
"""


class FalconsegError(Exception):
    pass


class ShapeMismatchError(FalconsegError):
    pass


class EmptySetError(FalconsegError):
    """A pixel set that must be non-empty is empty."""


class BothEmptyError(FalconsegError):
    """Both masks of an overlap metric are all-zero; the caller decides."""


class EmptyBatchError(FalconsegError):
    pass


class EmptySupportError(FalconsegError):
    pass


class DataError(FalconsegError):
    pass


class InsufficientSamplesError(DataError):
    pass


class InsufficientUnlabeledError(DataError):
    pass


class NoLabeledQueryError(DataError):
    pass


class InsufficientSlicesError(DataError):
    pass


class MissingFileError(DataError):
    pass


class CorruptImageError(DataError):
    pass


class MaskShapeMismatchError(DataError):
    pass


class MissingGroundTruthError(DataError):
    pass


class ConfigError(FalconsegError):
    pass


class IncompatibleVersionError(ConfigError):
    """Checkpoint magic string does not match the supported format."""


class ConfigMismatchError(ConfigError):
    """Checkpoint was produced under a different configuration."""

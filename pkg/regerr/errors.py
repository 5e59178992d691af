"""Exception hierarchy for regerr.

Every error raised on purpose by the library derives from ``RegErrError``.
Data-side failures derive from ``DataError`` and configuration problems
from ``ConfigError``; the CLI maps the two families to different exit codes.
"""


class RegErrError(Exception):
    """Base class for all regerr errors."""


class ConfigError(RegErrError, ValueError):
    """Invalid configuration value or violated config invariant."""


class DataError(RegErrError):
    """Input data is malformed, inconsistent, or unusable."""


class FormatError(DataError, ValueError):
    """A file does not parse under its declared format."""


class UnsupportedFormatError(DataError, ValueError):
    """The requested file format is not known."""


class DuplicateIdError(DataError, ValueError):
    """An identifier appears more than once where ids must be unique."""


class DegenerateVolumeError(DataError, ValueError):
    """A volume is too small along an axis for the requested operation."""


class NoOverlapError(DataError, ValueError):
    """Two volumes do not intersect in world space."""


class DomainError(DataError, ValueError):
    """An argument lies outside the domain of a function."""


class CoverageError(DataError, ValueError):
    """A control grid does not support the whole target geometry."""


class GeometryMismatchError(DataError, ValueError):
    """Two volumes or fields are expected to share geometry but do not."""


class EmptyPairsError(DataError, ValueError):
    """A landmark fit was requested without any landmark pairs."""


class OutOfExtentError(DataError, ValueError):
    """A landmark lies outside the geometry it is fitted on."""


class TooFewPatientsError(DataError, ValueError):
    """A subject-wise split needs at least one patient per split."""


class ShapeError(DataError, ValueError):
    """Array shapes do not match what the operation requires."""


class KeyMismatchError(DataError, KeyError):
    """A checkpoint is missing keys required by the target parameters."""


class ShapeMismatchError(DataError, ValueError):
    """A checkpoint tensor has a different shape than its target."""


class EmptySplitError(DataError, ValueError):
    """A dataset split required by the operation has no records."""


class NonFiniteLossError(DataError, RuntimeError):
    """Training produced a NaN or infinite loss."""


class VersionMismatchError(DataError, ValueError):
    """A stored artifact was written by an incompatible format or config."""

"""Exception hierarchy shared across the package."""


class MimkitError(Exception):
    """Base class for every error raised by this package."""


class ShapeMismatch(MimkitError):
    """Operand shapes are incompatible for the requested operation."""


class NonScalarLoss(MimkitError):
    """Backward was asked to start from a tensor with more than one element."""


class EmptyReduction(MimkitError):
    """A reduction was applied over an axis of extent zero."""


class IndivisibleDims(MimkitError):
    """Image dimensions are not divisible by the patch size."""


class GridMismatch(MimkitError):
    """Teacher and student patch grids disagree."""


class MissingCheckpoint(MimkitError):
    """A required checkpoint file does not exist."""


class EmptyMask(MimkitError):
    """The masked objective was evaluated with no masked positions."""


class DegenerateLabels(MimkitError):
    """A class has zero samples, so the probe cannot be fit."""


class ParseError(MimkitError):
    """Config text could not be parsed; message carries the line number."""


class UnknownKey(MimkitError):
    """Config file contains a key that is not part of the schema."""


class RangeViolation(MimkitError):
    """A config value is outside its permitted range."""


class UnsupportedFormat(MimkitError):
    """Image file is not in the supported binary PPM (P6) format."""


class CorruptHeader(MimkitError):
    """Image file header or payload is malformed or truncated."""


class GradientCheckFailed(MimkitError):
    """A finite-difference gradient check exceeded its tolerance."""


class IoError(MimkitError):
    """Checkpoint file could not be read or written."""


class BadMagic(IoError):
    """Checkpoint does not start with the expected magic bytes."""


class VersionMismatch(IoError):
    """Checkpoint format version is not supported."""

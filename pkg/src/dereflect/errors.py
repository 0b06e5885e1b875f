"""Exception hierarchy shared across the toolkit."""


class DereflectError(Exception):
    """Base class for every error raised deliberately by this package."""


class ValidationError(DereflectError, ValueError):
    """Input violates a documented precondition."""


class DimensionError(ValidationError):
    """Array shapes are incompatible."""


class InsufficientFeaturesError(DereflectError):
    """Too few keypoint matches survived to fit a geometric model."""


class AlignmentError(DereflectError):
    """Robust estimation did not find a model with enough support."""


class StageOrderError(ValidationError):
    """A training stage was requested before its prerequisite stage ran."""


class FrozenPartitionError(DereflectError, RuntimeError):
    """A parameter partition that must stay frozen was modified."""

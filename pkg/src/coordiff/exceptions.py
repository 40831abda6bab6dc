"""Exception hierarchy shared across the package."""


class CoordiffError(Exception):
    """Base class for all package errors."""


class ValidationError(CoordiffError, ValueError):
    """An argument violates a documented precondition."""


class DimensionError(ValidationError):
    """Array shapes or widths are inconsistent."""


class NotFittedError(CoordiffError, AttributeError):
    """An estimator was used before ``fit``."""


class NumericDivergenceError(CoordiffError, FloatingPointError):
    """A non-finite value appeared during integration or evaluation.

    Attributes
    ----------
    step : int or None
        Index of the integrator step (or optimizer step) where it happened.
    """

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class TrainingDivergenceError(NumericDivergenceError):
    """Training loss exceeded the divergence threshold."""


class DegenerateWeightsError(CoordiffError, ArithmeticError):
    """Importance weights cannot be normalized (e.g. every cost is +inf)."""


class AbsoluteContinuityError(ValidationError):
    """Target puts mass where the reference distribution has none."""


class PersistenceError(CoordiffError, IOError):
    """Base class for checkpoint/dataset I/O failures."""


class VersionMismatchError(PersistenceError):
    """Bad magic string or unsupported format version."""


class TruncatedFileError(PersistenceError):
    """File ended before the declared payload."""


class ChecksumError(PersistenceError):
    """Payload checksum does not match the stored trailer."""

"""Exception types shared across the package."""


class FaceFitError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(FaceFitError):
    """Array dimensions are inconsistent with an operation's contract."""


class ParseError(FaceFitError):
    """A file could not be decoded; carries the path and the offending location."""

    def __init__(self, path, location, message):
        self.path = str(path)
        self.location = location
        super().__init__(f"{self.path}: {location}: {message}")


class ParameterError(FaceFitError):
    """An argument value is outside its documented range."""


class DegenerateMaskError(FaceFitError):
    """A mask or flagged region selects nothing, so a masked mean is undefined."""


class DegenerateEmbeddingError(FaceFitError):
    """An embedding has zero norm, so cosine similarity is undefined."""


class ProjectionError(FaceFitError):
    """A vertex cannot be projected (behind the perspective camera)."""


class GradientCheckError(FaceFitError):
    """A finite-difference probe produced non-finite values."""


class StateError(FaceFitError):
    """An operation was invoked without the saved state it needs."""


class DivergenceError(FaceFitError):
    """Optimization produced a non-finite loss or gradient; carries the trace so far."""

    def __init__(self, message, trace=None):
        self.trace = trace
        super().__init__(message)


class AlignmentError(FaceFitError):
    """ICP cannot estimate a transform from degenerate correspondences."""


class CropError(FaceFitError):
    """A radius crop produced an empty or unusable submesh."""


class MetricError(FaceFitError):
    """A mesh metric's preconditions are not met (e.g. target has no triangles)."""

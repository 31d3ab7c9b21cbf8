"""Exception hierarchy for the occupancy-uncertainty pipeline."""


class OccugraspError(Exception):
    """Base class for all pipeline errors."""


class InvalidDepth(OccugraspError):
    """Depth value is non-positive or non-finite where a valid depth is required."""


class OutOfBounds(OccugraspError):
    """Pixel coordinate lies outside the image."""


class EmptyField(OccugraspError):
    """Occupancy field was built (or queried) with no components."""


class DegenerateComponent(OccugraspError):
    """A mixture component covariance is not positive definite after regularization."""

    def __init__(self, index: int, message: str = ""):
        self.index = index
        super().__init__(message or f"component {index} covariance is not positive definite")


class SingularFusion(OccugraspError):
    """Responsibility-weighted precision sum is singular."""


class InvalidSpread(OccugraspError):
    """Cubature spread parameters give d + lambda <= 0."""


class DegenerateCovariance(OccugraspError):
    """Covariance has no Cholesky factor even after jitter."""


class DivergedTraining(OccugraspError):
    """Training objective became non-finite."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"training diverged at epoch {epoch}")


class InvalidVariance(OccugraspError):
    """Occupancy variance is zero or negative where a positive value is required."""

    def __init__(self, index: int, message: str = ""):
        self.index = index
        super().__init__(message or f"variance at index {index} must be > 0")


class CameraInsideGeometry(OccugraspError):
    """Camera origin is inside (or on) the scene geometry."""


class ConfigError(OccugraspError):
    """Configuration file or override is invalid."""


class SchemaError(OccugraspError):
    """A data file violates its schema."""


class StageFailure(OccugraspError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")

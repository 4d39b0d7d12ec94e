"""Exception hierarchy shared by the pipeline stages."""


class ThermoscanError(Exception):
    """Base class for all library errors."""


class ConfigError(ThermoscanError):
    """Invalid or unknown configuration value."""


class StreamError(ThermoscanError):
    """Malformed or out-of-order sensor stream."""


class SingularFitError(ThermoscanError):
    """Radiometric fit has no unique solution."""


class TemperatureRangeError(ThermoscanError):
    """A digital number maps outside the calibrated temperature range."""

    def __init__(self, message: str, bound: str):
        super().__init__(message)
        self.bound = bound


class BehindCameraError(ThermoscanError):
    """Point has non-positive depth in the camera frame."""


class UndistortDivergence(ThermoscanError):
    """Fixed-point distortion inversion failed to converge."""


class InsufficientViewsError(ThermoscanError):
    """Too few calibration views."""


class DegenerateGeometryError(ThermoscanError):
    """The observations do not constrain all unknowns."""


class DegenerateLineError(ThermoscanError):
    """Local line fit over coincident points."""


class CovarianceError(ThermoscanError):
    """Covariance matrix is not symmetric positive semi-definite."""


class ExtrapolationError(ThermoscanError):
    """A timestamp falls outside the available trajectory."""


class ConvergenceError(ThermoscanError):
    """An iterative solver stopped without converging."""

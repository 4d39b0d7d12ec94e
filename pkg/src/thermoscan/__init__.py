"""Thermal LiDAR-inertial mapping: calibration, odometry and temperature fusion."""

from .errors import (
    BehindCameraError,
    ConfigError,
    ConvergenceError,
    CovarianceError,
    DegenerateGeometryError,
    DegenerateLineError,
    ExtrapolationError,
    InsufficientViewsError,
    SingularFitError,
    StreamError,
    TemperatureRangeError,
    ThermoscanError,
    UndistortDivergence,
)
from .geometry import SE3
from .data import ImuSample, LidarScan, ThermalFrame
from .camera import Intrinsics
from .radiometry import RadiometricModel

__version__ = "0.1.0"

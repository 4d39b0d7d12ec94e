"""Band-integrated Planck radiance and the linear DN model ``DN = K * L(T) + B``."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import constants
from scipy.interpolate import CubicSpline

from .errors import SingularFitError, TemperatureRangeError

H = constants.h
C = constants.c
KB = constants.k
ZERO_CELSIUS = constants.zero_Celsius

DEFAULT_PANELS = 4096
# allowed extrapolation outside the fitted temperature range, kelvin
RANGE_MARGIN = 5.0


@dataclass(frozen=True)
class SpectralBand:
    lambda_min: float = 8e-6
    lambda_max: float = 14e-6

    def __post_init__(self):
        if not 0 < self.lambda_min < self.lambda_max:
            raise ValueError("spectral band needs 0 < lambda_min < lambda_max")


def planck_spectral_radiance(wavelength, T):
    """Blackbody spectral radiance in W m^-2 sr^-1 m^-1."""
    lam = np.asarray(wavelength, dtype=float)
    T = np.asarray(T, dtype=float)
    x = H * C / (lam * KB * T)
    # expm1 keeps precision for long wavelengths; large x underflows cleanly to 0
    with np.errstate(over="ignore"):
        return 2.0 * H * C**2 / lam**5 / np.expm1(x)


def simpson(f_values: np.ndarray, h: float, axis: int = -1) -> np.ndarray:
    """Composite Simpson rule on an odd number of equally spaced samples."""
    f = np.moveaxis(np.asarray(f_values, dtype=float), axis, -1)
    n = f.shape[-1]
    if n < 3 or n % 2 == 0:
        raise ValueError("Simpson's rule needs an odd number (>= 3) of samples")
    return h / 3.0 * (f[..., 0] + f[..., -1] + 4.0 * f[..., 1:-1:2].sum(-1) + 2.0 * f[..., 2:-1:2].sum(-1))


def band_radiance(T, band: SpectralBand = SpectralBand(), panels: int = DEFAULT_PANELS):
    """In-band radiance (W m^-2 sr^-1) for unit emissivity and flat response.

    ``T`` may be a scalar or an array of temperatures in kelvin.
    """
    T = np.asarray(T, dtype=float)
    if np.any(T <= 0) or not np.all(np.isfinite(T)):
        raise ValueError("temperature must be positive and finite (kelvin)")
    if panels % 2:
        panels += 1
    lam = np.linspace(band.lambda_min, band.lambda_max, panels + 1)
    h = (band.lambda_max - band.lambda_min) / panels
    vals = planck_spectral_radiance(lam, T[..., None])
    out = simpson(vals, h)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class CalibrationPoint:
    temperature: float  # kelvin
    mean_dn: float

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("calibration temperature must be positive kelvin")
        if self.mean_dn < 0:
            raise ValueError("mean DN must be non-negative")


@dataclass(frozen=True)
class RadiometricModel:
    K: float
    B: float
    band: SpectralBand = field(default_factory=SpectralBand)
    valid_range: tuple[float, float] = (303.15, 323.15)

    def __post_init__(self):
        if not self.K > 0:
            raise ValueError("responsivity K must be positive")
        lo, hi = self.valid_range
        if not lo < hi:
            raise ValueError("valid_range must be a nonempty interval")

    @property
    def inversion_bounds(self) -> tuple[float, float]:
        lo, hi = self.valid_range
        return max(lo - RANGE_MARGIN, 1.0), hi + RANGE_MARGIN

    def temperature_to_dn(self, T):
        return self.K * band_radiance(T, self.band) + self.B

    @cached_property
    def _radiance_spline(self) -> CubicSpline:
        # interpolation error on a 0.05 K grid is many orders below the 1e-3 K tolerance
        lo, hi = self.inversion_bounds
        grid = np.linspace(lo, hi, int(np.ceil((hi - lo) / 0.05)) + 1)
        return CubicSpline(grid, band_radiance(grid, self.band))

    @cached_property
    def _radiance_table(self):
        spline = self._radiance_spline
        return spline.x, spline(spline.x)

    def dn_to_temperature(self, dn, tol: float = 1e-4):
        """Invert the forward model by bisection; raises on out-of-range DN."""
        return dn_to_temperature(dn, self, tol=tol)


def dn_to_temperature(dn, model: RadiometricModel, tol: float = 1e-4, strict: bool = True):
    """Temperature (kelvin) whose forward DN equals ``dn``.

    Inverts the monotone map ``T -> K L(T) + B`` over the model's valid
    range widened by :data:`RANGE_MARGIN`: a Newton step from a tabulated
    starting point, with bisection as the fallback for any value whose
    Newton step is not below ``tol / 10``. With ``strict`` an out-of-range DN
    raises :class:`TemperatureRangeError`; otherwise it yields NaN.
    """
    dn = np.asarray(dn, dtype=float)
    lo, hi = model.inversion_bounds
    spline = model._radiance_spline
    target = (dn - model.B) / model.K
    L_lo, L_hi = spline(lo), spline(hi)
    below = target < L_lo
    above = target > L_hi
    bad = below | above | ~np.isfinite(target)
    if strict and np.any(bad):
        if np.any(below):
            raise TemperatureRangeError(f"DN below the calibrated range (T < {lo:.2f} K)", "low")
        raise TemperatureRangeError(f"DN above the calibrated range (T > {hi:.2f} K)", "high")
    # Newton from a tabulated guess; bisection for anything that does not settle
    grid, L_grid = model._radiance_table
    tgt = np.where(bad, L_lo, target)
    T = np.interp(tgt, L_grid, grid)
    step = (spline(T) - tgt) / spline(T, 1)
    T = T - step
    slow = bad | ~(np.abs(step) < 0.1 * tol) | (T < lo) | (T > hi)
    if np.any(slow):
        tgt = target[slow] if T.ndim else target
        a = np.full(np.shape(tgt), lo)
        b = np.full(np.shape(tgt), hi)
        n_iter = int(np.ceil(np.log2((hi - lo) / tol))) + 1
        for _ in range(n_iter):
            mid = 0.5 * (a + b)
            high = spline(mid) > tgt
            b = np.where(high, mid, b)
            a = np.where(high, a, mid)
        if T.ndim:
            T[slow] = 0.5 * (a + b)
        else:
            T = 0.5 * (a + b)
    if not strict:
        T = np.where(bad, np.nan, T)
    return float(T) if T.ndim == 0 else T


@dataclass
class FitReport:
    rms: float
    residuals: np.ndarray
    n_points: int

    def to_kv(self) -> str:
        lines = [f"n_points={self.n_points}", f"residual_rms_dn={self.rms:.6g}"]
        lines += [f"residual.{i}={r:.6g}" for i, r in enumerate(self.residuals)]
        return "\n".join(lines) + "\n"


def fit_radiometric_model(points: Sequence[CalibrationPoint], band: SpectralBand = SpectralBand()):
    """Least-squares ``(K, B)`` for ``DN = K L(T) + B``; returns ``(model, report)``."""
    if len(points) < 2:
        raise SingularFitError("need at least two calibration points")
    T = np.array([p.temperature for p in points])
    dn = np.array([p.mean_dn for p in points])
    if np.ptp(T) == 0:
        raise SingularFitError("all calibration temperatures are equal")
    L = band_radiance(T, band)
    A = np.column_stack([L, np.ones_like(L)])
    # center the radiance column to keep the 2x2 system well conditioned
    Lc = L.mean()
    A[:, 0] -= Lc
    (K, B0), *_ = np.linalg.lstsq(A, dn, rcond=None)
    B = B0 - K * Lc
    if not K > 0:
        raise SingularFitError(f"fitted responsivity is non-positive (K={K:.4g})")
    residuals = dn - (K * L + B)
    model = RadiometricModel(float(K), float(B), band, (float(T.min()), float(T.max())))
    report = FitReport(float(np.sqrt(np.mean(residuals**2))), residuals, len(points))
    return model, report


def load_calibration_points(path) -> list[CalibrationPoint]:
    """Read ``temperature_c,mean_dn`` rows."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["temperature_c", "mean_dn"]:
            raise ValueError(f"{path}: expected header 'temperature_c,mean_dn'")
        return [
            CalibrationPoint(float(row["temperature_c"]) + ZERO_CELSIUS, float(row["mean_dn"]))
            for row in reader
        ]


def save_calibration_points(path, points: Sequence[CalibrationPoint]) -> None:
    lines = ["temperature_c,mean_dn"]
    lines += [f"{p.temperature - ZERO_CELSIUS:.6f},{p.mean_dn:.6f}" for p in points]
    Path(path).write_text("\n".join(lines) + "\n")


def model_to_kv(model: RadiometricModel) -> str:
    lo, hi = model.valid_range
    return (
        f"K={float(model.K)!r}\nB={float(model.B)!r}\n"
        f"lambda_min={float(model.band.lambda_min)!r}\nlambda_max={float(model.band.lambda_max)!r}\n"
        f"T_lo={float(lo)!r}\nT_hi={float(hi)!r}\n"
    )


def model_from_kv(values: dict) -> RadiometricModel:
    return RadiometricModel(
        float(values["K"]),
        float(values["B"]),
        SpectralBand(float(values["lambda_min"]), float(values["lambda_max"])),
        (float(values["T_lo"]), float(values["T_hi"])),
    )

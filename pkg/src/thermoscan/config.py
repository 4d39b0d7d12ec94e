"""Sectioned key=value pipeline configuration."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from .errors import ConfigError


@dataclass
class SimulateConfig:
    duration: float = 5.0
    imu_rate: float = 200.0
    scan_rate: float = 10.0
    frame_rate: float = 10.0
    frame_offset: float = 0.0
    points_per_scan: int = 10_000
    sigma_d: float = 0.02
    sigma_omega_deg: float = 0.03
    imu_noise: bool = True
    read_noise_dn: float = 2.0
    supersample: int = 1
    scene: str = "default"
    blackbody_temps: tuple = (30.0, 35.0, 40.0, 45.0, 50.0)
    blackbody_holdout: tuple = (32.0, 38.0, 48.0)
    blackbody_noise_dn: float = 2.0
    checkerboard_views: int = 10
    corner_noise_px: float = 0.5
    accumulation_window: float = 1.0  # s of static LiDAR accumulation for extrinsic calibration
    calibration_supersample: int = 3
    initial_rot_deg: float = 3.0
    initial_trans: float = 0.05
    corrupt_scans: tuple = ()

    def validate(self) -> None:
        for name in ("duration", "imu_rate", "scan_rate", "frame_rate", "accumulation_window"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"simulate.{name} must be positive")
        for name in ("points_per_scan", "supersample", "calibration_supersample", "checkerboard_views"):
            if getattr(self, name) < 1:
                raise ConfigError(f"simulate.{name} must be at least 1")
        for name in ("sigma_d", "sigma_omega_deg", "read_noise_dn", "blackbody_noise_dn", "corner_noise_px"):
            if getattr(self, name) < 0:
                raise ConfigError(f"simulate.{name} must be non-negative")
        if self.scene not in ("default", "single_edge"):
            raise ConfigError("simulate.scene must be 'default' or 'single_edge'")
        if len(self.blackbody_temps) < 2:
            raise ConfigError("simulate.blackbody_temps needs at least two temperatures")


@dataclass
class CalibrateConfig:
    pixel_sigma: float = 1.5
    sigma_d: float = 0.02
    sigma_omega_deg: float = 0.03
    canny_low: float = 20.0
    canny_high: float = 40.0
    canny_sigma: float = 1.4
    max_iters: int = 50
    max_holdout_error_c: float = 0.2

    def validate(self) -> None:
        if self.pixel_sigma <= 0:
            raise ConfigError("calibrate.pixel_sigma must be positive")
        if self.sigma_d < 0 or self.sigma_omega_deg < 0:
            raise ConfigError("calibrate noise parameters must be non-negative")
        if not 0 < self.canny_low <= self.canny_high:
            raise ConfigError("calibrate.canny_low must be positive and not above canny_high")
        if self.max_iters < 1:
            raise ConfigError("calibrate.max_iters must be at least 1")


@dataclass
class RunConfig:
    range_sigma: float = 0.02
    map_voxel: float = 0.1
    pairing_tolerance: float = 0.02
    bin_px: int = 2
    depth_gate: float = 0.3
    dilation: int = 2
    fusion_voxel: float = 0.05  # 0 disables the merge
    ply_ascii: bool = False
    init: str = "ground_truth"
    estimate_gravity: bool = False

    def validate(self) -> None:
        if self.range_sigma < 0:
            raise ConfigError("run.range_sigma must be non-negative")
        for name in ("map_voxel", "pairing_tolerance", "depth_gate"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"run.{name} must be positive")
        if self.bin_px < 1 or self.dilation < 0 or self.fusion_voxel < 0:
            raise ConfigError("run.bin_px >= 1, run.dilation >= 0 and run.fusion_voxel >= 0 are required")
        if self.init not in ("ground_truth", "static"):
            raise ConfigError("run.init must be 'ground_truth' or 'static'")


@dataclass
class PathsConfig:
    dataset: str = ""
    models: str = ""
    run: str = ""


@dataclass
class PipelineConfig:
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    calibrate: CalibrateConfig = field(default_factory=CalibrateConfig)
    run: RunConfig = field(default_factory=RunConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> None:
        self.simulate.validate()
        self.calibrate.validate()
        self.run.validate()


def _convert(section: str, key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if section == "simulate" and key == "corrupt_scans":
                return tuple(int(x) for x in items)
            return tuple(float(x) for x in items)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r}") from None


def parse_config(text: str, source: str = "<config>") -> PipelineConfig:
    """Parse sectioned key=value text; unknown sections or keys are rejected."""
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    cfg = PipelineConfig()
    known = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    for sect in cp.sections():
        if sect not in known:
            raise ConfigError(f"{source}: unknown section [{sect}]")
        target = known[sect]
        defaults = {f.name: getattr(target, f.name) for f in fields(target)}
        for key, raw in cp.items(sect):
            if key not in defaults:
                raise ConfigError(f"{source}: unknown key {sect}.{key}")
            setattr(target, key, _convert(sect, key, raw, defaults[key]))
    cfg.validate()
    return cfg


def load_config(path: Optional[str]) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(), str(p))


def config_to_text(cfg: PipelineConfig) -> str:
    """Canonical text form; round-trips through :func:`parse_config`."""
    out = []
    for f in fields(cfg):
        sect = getattr(cfg, f.name)
        out.append(f"[{f.name}]")
        for g in fields(sect):
            v = getattr(sect, g.name)
            if isinstance(v, bool):
                s = str(v).lower()
            elif isinstance(v, tuple):
                s = ",".join(repr(x) for x in v)
            else:
                s = str(v)
            out.append(f"{g.name} = {s}")
        out.append("")
    return "\n".join(out)

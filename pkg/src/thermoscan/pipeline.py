"""Odometry plus thermal fusion over recorded streams."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .camera import Intrinsics
from .data import ImuSample, LidarScan, ThermalFrame
from .errors import ThermoscanError
from .fusion import (
    DEFAULT_PAIRING_TOLERANCE,
    ColorizeReport,
    FramePairing,
    FusionParams,
    ThermalPointCloud,
    accumulate_map,
    colorize_scan,
    pair_streams,
)
from .geometry import SE3
from .lio import FilterParams, LioFilter, NavState, ScanResult
from .radiometry import RadiometricModel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Calibration:
    intr: Intrinsics
    radio: RadiometricModel
    T_cam_lidar: SE3
    T_imu_lidar: SE3


@dataclass
class RunParams:
    filter: FilterParams = field(default_factory=FilterParams)
    fusion: FusionParams = field(default_factory=FusionParams)
    pairing_tolerance: float = DEFAULT_PAIRING_TOLERANCE
    # the accumulated odometry map joins the z-buffer; one sweep alone leaves gaps along silhouettes
    map_occluders: bool = True


@dataclass
class ScanRecord:
    result: ScanResult
    pairing: Optional[FramePairing] = None
    colorize: Optional[ColorizeReport] = None
    T_world_cam: Optional[SE3] = None
    seconds: float = 0.0


@dataclass
class RunResult:
    records: list
    fragments: list  # camera-frame fragments, aligned with ``records``
    cloud: ThermalPointCloud
    skipped: list  # (scan_id, reason)
    unpaired: list
    stage_seconds: dict
    min_covariance_eig: float = float("nan")  # smallest filter covariance eigenvalue seen after any scan

    @property
    def times(self) -> np.ndarray:
        return np.array([r.result.t_end for r in self.records])

    @property
    def positions(self) -> np.ndarray:
        return np.array([r.result.state.position for r in self.records]).reshape(-1, 3)

    @property
    def rotations(self) -> np.ndarray:
        return np.array([r.result.state.rotation for r in self.records]).reshape(-1, 3, 3)

    @property
    def mean_scan_seconds(self) -> float:
        return float(np.mean([r.seconds for r in self.records])) if self.records else float("nan")


def run_pipeline(
    imu: Sequence[ImuSample],
    scans: Sequence[LidarScan],
    frames: Sequence[ThermalFrame],
    calib: Calibration,
    x0: NavState,
    params: RunParams = RunParams(),
    t0: Optional[float] = None,
) -> RunResult:
    """Propagate/update on every scan, colorize it from its paired frame, accumulate.

    A scan whose processing raises a library error is logged and skipped; the
    run continues with the next one.
    """
    stage = {"lio": 0.0, "colorize": 0.0, "accumulate": 0.0}
    scans = sorted(scans, key=lambda s: s.t_start)
    frames = sorted(frames, key=lambda f: f.timestamp)
    pairing = pair_streams(
        [s.t_end for s in scans], [f.timestamp for f in frames], params.pairing_tolerance,
        scan_ids=[s.scan_id for s in scans], frame_ids=list(range(len(frames))),
    )
    by_scan = {p.scan_id: p for p in pairing.pairs}
    if not scans:
        return RunResult([], [], ThermalPointCloud.empty(), [], [], stage)
    t0 = scans[0].t_start if t0 is None else t0
    lio = LioFilter(x0, t0, calib.T_imu_lidar, params.filter)
    for u in imu:
        lio.add_imu(u)
    T_lc = calib.T_cam_lidar.inverse()
    records, fragments, skipped = [], [], []
    for scan in scans:
        tic = time.perf_counter()
        try:
            res = lio.process_scan(scan)
        except ThermoscanError as exc:
            log.error("scan %d skipped: %s", scan.scan_id, exc)
            skipped.append((scan.scan_id, str(exc)))
            continue
        tl = time.perf_counter()
        stage["lio"] += tl - tic
        rec = ScanRecord(res, by_scan.get(scan.scan_id))
        frag = ThermalPointCloud.empty()
        if rec.pairing is not None and not res.report.degraded:
            frame = frames[rec.pairing.frame_id]
            T_wc = res.pose_at(frame.timestamp) @ calib.T_imu_lidar @ T_lc
            # scan-end LiDAR frame -> camera at the frame time
            T_cl = T_wc.inverse() @ res.pose_at(res.t_end) @ calib.T_imu_lidar
            occ = T_wc.inverse().apply(lio.map.all_points()) if params.map_occluders and len(lio.map) else None
            try:
                frag, rec.colorize = colorize_scan(
                    T_cl.apply(res.points_end), frame, calib.intr, calib.radio, scan.scan_id, params.fusion, occluders=occ
                )
                rec.T_world_cam = T_wc
            except ThermoscanError as exc:
                log.error("scan %d not colorized: %s", scan.scan_id, exc)
        toc = time.perf_counter()
        stage["colorize"] += toc - tl
        rec.seconds = toc - tic
        records.append(rec)
        fragments.append(frag)
    tic = time.perf_counter()
    cloud, _ = accumulate_map(
        [f for f, r in zip(fragments, records) if r.T_world_cam is not None],
        [r.T_world_cam for r in records if r.T_world_cam is not None],
        params.fusion.voxel,
    )
    stage["accumulate"] = time.perf_counter() - tic
    return RunResult(records, fragments, cloud, skipped, pairing.unpaired, stage, lio.covariance_min_eig)

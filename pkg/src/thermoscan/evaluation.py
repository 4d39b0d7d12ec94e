"""Ground-truth scoring of odometry and fusion outputs against the simulator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import SE3, rotation_angle_between
from .lio import absolute_trajectory_error
from .simulator import SceneModel, raycast

__all__ = ["absolute_trajectory_error", "attitude_error_deg", "surface_temperature", "camera_occluded", "FusionScore", "score_fusion"]


def attitude_error_deg(R_est, R_true) -> float:
    return float(np.degrees(rotation_angle_between(R_est, R_true)))


def surface_temperature(scene: SceneModel, points_world: np.ndarray, plane_ids: np.ndarray) -> np.ndarray:
    """Prescribed temperature (deg C) of each point on its own plane."""
    out = np.full(len(points_world), np.nan)
    for k, pl in enumerate(scene.planes):
        m = plane_ids == k
        if np.any(m):
            out[m] = pl.temperature_at(pl.to_plane(points_world[m]))
    return out


def camera_occluded(scene: SceneModel, center: np.ndarray, points_world: np.ndarray, tol: float = 0.01) -> np.ndarray:
    """True where the camera ray to a point meets another surface more than ``tol`` before it."""
    d = points_world - center
    dist = np.linalg.norm(d, axis=1)
    _, ids, rng, _ = raycast(center[None], d / dist[:, None], scene)
    return (ids >= 0) & (rng < dist - tol)


@dataclass
class FusionScore:
    n_fused: int
    n_visible: int
    within_tol: float  # fraction of camera-visible fused points within tolerance
    rmse_c: float
    n_occluded_fused: int
    n_occluded_total: int


def score_fusion(run, scans_by_id: dict, scene: SceneModel, true_cam_pose, tol_c: float = 0.3) -> FusionScore:
    """Per-point temperature error of every colorized scan point.

    ``true_cam_pose(t)`` returns the true world-from-camera pose at a frame
    time; each fused point is traced back to the true surface point its
    LiDAR return came from.
    """
    errs, occ_fused, occ_total, n = [], 0, 0, 0
    for rec, frag in zip(run.records, run.fragments):
        if rec.colorize is None:
            continue
        scan = scans_by_id[rec.result.scan_id]
        idx = rec.colorize.kept_index
        T_wc: SE3 = true_cam_pose(rec.pairing.time_offset + rec.result.t_end)
        hidden = camera_occluded(scene, T_wc.translation, scan.true_points_world)
        occ_total += int(np.sum(hidden))
        occ_fused += int(np.sum(hidden[idx]))
        vis = ~hidden[idx]
        truth = surface_temperature(scene, scan.true_points_world[idx], scan.plane_ids[idx])
        errs.append((frag.temperature - truth)[vis])
        n += len(idx)
    e = np.concatenate(errs) if errs else np.zeros(0)
    return FusionScore(
        n, len(e),
        float(np.mean(np.abs(e) <= tol_c)) if len(e) else float("nan"),
        float(np.sqrt(np.mean(e**2))) if len(e) else float("nan"),
        occ_fused, occ_total,
    )

"""Iterated error-state Kalman filter for LiDAR-inertial odometry."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .data import ImuSample, LidarScan
from .errors import CovarianceError, ExtrapolationError, StreamError
from .geometry import (
    SE3,
    orthonormalize,
    skew,
    smallest_eigenvector_sym3,
    voxel_keys,
    so3_exp,
    so3_exp_batch,
    so3_log,
    so3_right_jacobian,
)

log = logging.getLogger(__name__)

GRAVITY = np.array([0.0, 0.0, -9.81])
STATE_DIM = 18
NOISE_DIM = 12
# error-state blocks
THETA, POS, VEL, BG, BA, GRAV = (slice(3 * i, 3 * i + 3) for i in range(6))


@dataclass(frozen=True)
class NavState:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())

    def __post_init__(self):
        for name in ("position", "velocity", "gyro_bias", "accel_bias", "gravity"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))

    @property
    def pose(self) -> SE3:
        return SE3(self.rotation, self.position)

    def boxplus(self, delta) -> "NavState":
        """Right-perturbed rotation, additive everything else."""
        d = np.asarray(delta, dtype=float)
        return NavState(
            self.rotation @ so3_exp(d[THETA]),
            self.position + d[POS],
            self.velocity + d[VEL],
            self.gyro_bias + d[BG],
            self.accel_bias + d[BA],
            self.gravity + d[GRAV],
        )

    def boxminus(self, other: "NavState") -> np.ndarray:
        """Error state ``d`` with ``other.boxplus(d) == self``."""
        return np.concatenate([
            so3_log(other.rotation.T @ self.rotation),
            self.position - other.position,
            self.velocity - other.velocity,
            self.gyro_bias - other.gyro_bias,
            self.accel_bias - other.accel_bias,
            self.gravity - other.gravity,
        ])


def propagate_state(x: NavState, u: ImuSample, dt: float) -> NavState:
    """One forward Euler step on the manifold, with the input held over ``dt``."""
    if not 0 < dt <= 0.1:
        raise StreamError(f"propagation step {dt!r} s outside (0, 0.1]")
    w = np.asarray(u.angular_rate, float) - x.gyro_bias
    a = x.rotation @ (np.asarray(u.specific_force, float) - x.accel_bias) + x.gravity
    return NavState(
        x.rotation @ so3_exp(w * dt),
        x.position + x.velocity * dt + 0.5 * a * dt * dt,
        x.velocity + a * dt,
        x.gyro_bias,
        x.accel_bias,
        x.gravity,
    )


def propagation_jacobians(x: NavState, u: ImuSample, dt: float):
    """``(F_x, F_w)`` of :func:`propagate_state` in error-state coordinates.

    The noise vector is ``[n_g, n_a, n_bg, n_ba]``: white noise on the gyro
    and accelerometer readings and the two bias random-walk drivers.
    """
    w = np.asarray(u.angular_rate, float) - x.gyro_bias
    f = np.asarray(u.specific_force, float) - x.accel_bias
    R = x.rotation
    Jr = so3_right_jacobian(w * dt)
    RfX = R @ skew(f)
    I = np.eye(3)
    F = np.eye(STATE_DIM)
    F[THETA, THETA] = so3_exp(-w * dt)
    F[THETA, BG] = -Jr * dt
    F[POS, THETA] = -0.5 * RfX * dt * dt
    F[POS, VEL] = I * dt
    F[POS, BA] = -0.5 * R * dt * dt
    F[POS, GRAV] = 0.5 * I * dt * dt
    F[VEL, THETA] = -RfX * dt
    F[VEL, BA] = -R * dt
    F[VEL, GRAV] = I * dt
    G = np.zeros((STATE_DIM, NOISE_DIM))
    G[THETA, 0:3] = -Jr * dt
    G[POS, 3:6] = -0.5 * R * dt * dt
    G[VEL, 3:6] = -R * dt
    G[BG, 6:9] = I * dt
    G[BA, 9:12] = I * dt
    return F, G


@dataclass(frozen=True)
class ProcessNoise:
    gyro_density: float = 1.5e-3
    accel_density: float = 1.5e-2
    gyro_bias_walk: float = 1e-5
    accel_bias_walk: float = 1e-4

    def matrix(self, dt: float) -> np.ndarray:
        """Covariance of the discrete noise vector for a step of ``dt``."""
        var = np.array([
            self.gyro_density**2 / dt,
            self.accel_density**2 / dt,
            self.gyro_bias_walk**2 / dt,
            self.accel_bias_walk**2 / dt,
        ])
        return np.diag(np.repeat(var, 3))


def check_covariance(P: np.ndarray, tol: float = 1e-9) -> None:
    if P.shape[0] != P.shape[1] or not np.all(np.isfinite(P)):
        raise CovarianceError("covariance must be a finite square matrix")
    if not np.allclose(P, P.T, atol=1e-9 * max(1.0, np.abs(P).max())):
        raise CovarianceError("covariance is not symmetric")
    if np.linalg.eigvalsh(0.5 * (P + P.T)).min() < -tol:
        raise CovarianceError("covariance is not positive semi-definite")


def propagate_covariance(P: np.ndarray, x: NavState, u: ImuSample, dt: float, Q: np.ndarray, check: bool = False):
    """``F_x P F_x^T + F_w Q F_w^T``, symmetrized."""
    if check:
        check_covariance(P)
        check_covariance(Q)
    F, G = propagation_jacobians(x, u, dt)
    Pn = F @ P @ F.T + G @ Q @ G.T
    return 0.5 * (Pn + Pn.T)


# -- de-skew and registration ------------------------------------------------------------


@dataclass
class PoseBuffer:
    """Time-stamped world-from-IMU poses for interpolation within one scan."""

    times: np.ndarray
    rotations: np.ndarray  # (N, 3, 3)
    positions: np.ndarray  # (N, 3)

    def __post_init__(self):
        R = self.rotations
        self._rel = np.array([so3_log(R[k].T @ R[k + 1]) for k in range(len(R) - 1)]).reshape(-1, 3)

    def interpolate(self, t: np.ndarray):
        t = np.asarray(t, dtype=float)
        lo, hi = self.times[0], self.times[-1]
        if np.any(t < lo - 1e-9) or np.any(t > hi + 1e-9):
            raise ExtrapolationError(f"time outside pose span [{lo:.6f}, {hi:.6f}]")
        if len(self.times) == 1:
            return np.broadcast_to(self.rotations[0], t.shape + (3, 3)), np.broadcast_to(self.positions[0], t.shape + (3,))
        i = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2)
        t0, t1 = self.times[i], self.times[i + 1]
        s = np.clip((t - t0) / (t1 - t0), 0.0, 1.0)
        R0 = self.rotations[i]
        R = R0 @ so3_exp_batch(self._rel[i] * s[:, None])
        p = self.positions[i] + s[:, None] * (self.positions[i + 1] - self.positions[i])
        return R, p


def deskew_scan(points: np.ndarray, times: np.ndarray, poses: PoseBuffer, T_imu_lidar: SE3, t_end: Optional[float] = None):
    """Move each point into the LiDAR frame at ``t_end`` using its own interpolated pose."""
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    t_end = poses.times[-1] if t_end is None else t_end
    R, p = poses.interpolate(times)
    Re, pe = poses.interpolate(np.array([t_end]))
    Re, pe = Re[0], pe[0]
    q = T_imu_lidar.apply(P)  # IMU frame at each point's own time
    w = (R @ q[:, :, None])[:, :, 0] + p
    q_end = (w - pe) @ Re  # IMU frame at scan end
    return (q_end - T_imu_lidar.translation) @ T_imu_lidar.rotation


def register_to_global(points: np.ndarray, T_imu_lidar: SE3, T_world_imu: SE3) -> np.ndarray:
    """World coordinates ``T_world_imu * T_imu_lidar * p``."""
    return (T_world_imu @ T_imu_lidar).apply(points)


# -- map ------------------------------------------------------------------------------------


def voxel_downsample(points: np.ndarray, voxel: float) -> np.ndarray:
    """Keep the first point falling in each voxel (order-stable)."""
    if len(points) == 0 or voxel <= 0:
        return points
    _, idx = np.unique(voxel_keys(points, voxel), return_index=True)
    return points[np.sort(idx)]


@dataclass
class LocalMap:
    voxel: float = 0.1
    rebuild_every: int = 10
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    _keys: set = field(default_factory=set, repr=False)
    _pending: list = field(default_factory=list, repr=False)
    _tree: Optional[cKDTree] = field(default=None, repr=False)
    _tree_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)), repr=False)
    _scans_since_rebuild: int = 0

    def insert(self, world_points: np.ndarray) -> int:
        P = voxel_downsample(np.asarray(world_points, float), self.voxel)
        keys = voxel_keys(P, self.voxel).tolist()
        known = self._keys
        fresh = [i for i, k in enumerate(keys) if k not in known]
        known.update(keys)
        if fresh:
            self._pending.append(P[fresh])
        self._scans_since_rebuild += 1
        if self._tree is None or self._scans_since_rebuild >= self.rebuild_every:
            self.rebuild()
        return len(fresh)

    def rebuild(self) -> None:
        if self._pending:
            self.points = np.vstack([self.points, *self._pending])
            self._pending = []
        self._tree_points = self.points
        self._tree = cKDTree(self.points) if len(self.points) else None
        self._scans_since_rebuild = 0

    def __len__(self) -> int:
        return len(self.points) + sum(len(p) for p in self._pending)

    def all_points(self) -> np.ndarray:
        """Every stored point, including those not yet in the k-d tree."""
        return np.vstack([self.points, *self._pending]) if self._pending else self.points

    def knn(self, query: np.ndarray, k: int):
        if self._tree is None:
            raise ValueError("map is empty")
        d, i = self._tree.query(query, k=k)
        return d, self._tree_points[i]


# -- measurement update ----------------------------------------------------------------------


@dataclass
class UpdateParams:
    knn: int = 5
    max_plane_rms: float = 0.05
    max_neighbor_dist: float = 1.0
    max_residual: float = 0.5
    meas_sigma: float = 0.02
    max_iters: int = 5
    step_tol: float = 1e-6
    min_match_ratio: float = 0.2
    downsample: float = 0.2  # m, voxel size applied to the scan before matching
    reassociate_rot: float = np.radians(0.1)
    reassociate_trans: float = 0.005


def update_params_for_noise(range_sigma: float, **kw) -> UpdateParams:
    """Gates scaled to the LiDAR range noise.

    The plane gate is 2.5 sigma clamped to [5 mm, 5 cm]; with noise-free ranges
    a loose gate admits neighbourhoods straddling two surfaces, which biases
    the fit near every edge.
    """
    gate = float(np.clip(2.5 * range_sigma, 0.005, 0.05))
    meas = float(max(range_sigma, 0.005))
    return UpdateParams(max_plane_rms=gate, meas_sigma=meas, **kw)


@dataclass
class UpdateReport:
    n_points: int = 0
    n_matched: int = 0
    residual_rms: float = float("nan")
    iterations: int = 0
    degraded: bool = False

    @property
    def match_ratio(self) -> float:
        return self.n_matched / self.n_points if self.n_points else 0.0


def fit_planes(neigh: np.ndarray):
    """Batch plane fits through (N, k, 3) neighbourhoods: normals, centroids and RMS."""
    c = neigh.mean(axis=1)
    D = neigh - c[:, None]
    _, n = smallest_eigenvector_sym3(np.einsum("nki,nkj->nij", D, D))
    rms = np.sqrt(np.mean(np.einsum("nki,ni->nk", D, n) ** 2, axis=1))
    return n, c, rms


def _associate(x: NavState, pts_imu: np.ndarray, world_map: LocalMap, params: UpdateParams):
    """Planes ``(normals, centroids, points)`` for every point passing the gates."""
    w = pts_imu @ x.rotation.T + x.position
    d, neigh = world_map.knn(w, params.knn)
    n, c, rms = fit_planes(neigh)
    r = np.sum(n * (w - c), axis=1)
    ok = (d[:, -1] < params.max_neighbor_dist) & (rms < params.max_plane_rms) & (np.abs(r) < params.max_residual)
    return n[ok], c[ok], pts_imu[ok]


def _moved(a: NavState, b: NavState, params: UpdateParams) -> bool:
    dr = np.linalg.norm(so3_log(b.rotation.T @ a.rotation))
    return dr > params.reassociate_rot or np.linalg.norm(a.position - b.position) > params.reassociate_trans


def update_with_scan(
    x: NavState,
    P: np.ndarray,
    points_lidar: np.ndarray,
    world_map: LocalMap,
    T_imu_lidar: SE3,
    params: UpdateParams = UpdateParams(),
):
    """Iterated point-to-plane update; returns ``(state, covariance, report)``.

    The measurement of each matched point is its signed distance to the plane
    fitted through its ``knn`` nearest map points. Relinearizes about the
    current iterate until the correction drops below ``step_tol``.
    """
    pts = voxel_downsample(np.asarray(points_lidar, float), params.downsample)
    pts_imu = T_imu_lidar.apply(pts)
    report = UpdateReport(n_points=len(pts))
    if len(pts) == 0 or len(world_map) == 0:
        report.degraded = True
        return x, P, report
    x_prior = x
    s2 = params.meas_sigma**2
    P6 = P[:, :6]
    xi = x
    KH = None
    anchor = None
    for it in range(1, params.max_iters + 1):
        report.iterations = it
        moved = anchor is None or _moved(xi, anchor, params)
        if moved:
            # planes are refit only after the iterate moves noticeably
            n, c, q = _associate(xi, pts_imu, world_map, params)
            anchor = xi
            report.n_matched = len(q)
            if report.match_ratio < params.min_match_ratio:
                report.degraded = True
                log.warning("update skipped: match ratio %.2f", report.match_ratio)
                return x_prior, P, report
        r = np.sum(n * (q @ xi.rotation.T + xi.position - c), axis=1)
        # measurement Jacobian touches only rotation and position
        H6 = np.empty((len(r), 6))
        # n^T R [q]x as a row vector is (R^T n) x q
        H6[:, :3] = -np.cross(n @ xi.rotation, q)
        H6[:, 3:] = n
        HtH = H6.T @ H6
        # K = P H^T (H P H^T + s2 I)^-1 rewritten so only 6 x 6 systems appear
        M = np.linalg.inv(HtH @ P[:6, :6] + s2 * np.eye(6))
        dx = xi.boxminus(x_prior)
        delta = P6 @ (M @ (HtH @ dx[:6] - H6.T @ r))
        step = delta - dx
        xi = x_prior.boxplus(delta)
        report.residual_rms = float(np.sqrt(np.mean(r**2)))
        KH = P6 @ M @ HtH
        if np.linalg.norm(step) < params.step_tol:
            break
    # Joseph form with the final linearization
    IKH = np.eye(STATE_DIM)
    IKH[:, :6] -= KH
    KKt = P6 @ M @ HtH @ M.T @ P6.T
    Pn = IKH @ P @ IKH.T + s2 * KKt
    Pn = 0.5 * (Pn + Pn.T)
    return replace(xi, rotation=orthonormalize(xi.rotation)), Pn, report


# -- filter driver -----------------------------------------------------------------------------


@dataclass
class FilterParams:
    update: UpdateParams = field(default_factory=UpdateParams)
    noise: ProcessNoise = field(default_factory=ProcessNoise)
    map_voxel: float = 0.1
    rebuild_every: int = 10
    init_sigma: tuple = (1e-3, 1e-3, 1e-3, 1e-3, 1e-2, 1e-6)  # theta, p, v, bg, ba, g
    estimate_gravity: bool = False
    reorthonormalize_every: int = 1000


@dataclass
class ScanResult:
    scan_id: int
    t_end: float
    state: NavState
    points_end: np.ndarray  # de-skewed LiDAR-frame points at scan end
    report: UpdateReport
    poses: Optional[PoseBuffer] = None  # propagated (not updated) poses across the sweep
    angular_rate: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def pose_at(self, t: float) -> SE3:
        """World-from-IMU pose near the scan end.

        Inside the sweep the propagated poses are shifted by the update's
        correction at the scan end; past it, constant velocity and rate.
        """
        x = self.state
        dt = t - self.t_end
        if dt > 0 or self.poses is None:
            return SE3(x.rotation @ so3_exp(self.angular_rate * dt), x.position + x.velocity * dt)
        R, p = self.poses.interpolate(np.array([t]))
        Re, pe = self.poses.interpolate(np.array([self.t_end]))
        corr = SE3(x.rotation, x.position) @ SE3(Re[0], pe[0]).inverse()
        return corr @ SE3(R[0], p[0])


class LioFilter:
    """Sequential propagate / de-skew / update driver over sorted streams."""

    def __init__(self, x0: NavState, t0: float, T_imu_lidar: SE3, params: FilterParams = FilterParams()):
        self.x = x0
        self.t = float(t0)
        self.T_il = T_imu_lidar
        self.params = params
        self.P = np.diag(np.repeat(np.asarray(params.init_sigma, float) ** 2, 3))
        self.map = LocalMap(params.map_voxel, params.rebuild_every)
        self._imu: deque = deque()
        self._last_imu_t = -np.inf
        self._u: Optional[ImuSample] = None
        self._steps = 0
        self.covariance_min_eig = np.inf

    def _step(self, u: ImuSample, dt: float) -> None:
        Q = self.params.noise.matrix(dt)
        self.P = propagate_covariance(self.P, self.x, u, dt, Q)
        if not self.params.estimate_gravity:
            self.P[GRAV, :] = 0.0
            self.P[:, GRAV] = 0.0
        self.x = propagate_state(self.x, u, dt)
        self._steps += 1
        if self._steps % self.params.reorthonormalize_every == 0:
            self.x = replace(self.x, rotation=orthonormalize(self.x.rotation))
        self.t += dt

    def add_imu(self, u: ImuSample) -> None:
        if u.timestamp <= self._last_imu_t:
            raise StreamError(f"IMU timestamps not increasing at t={u.timestamp}")
        self._last_imu_t = u.timestamp
        self._imu.append(u)

    def propagate_to(self, t_target: float, record: Optional[list] = None) -> None:
        """Integrate buffered IMU samples up to ``t_target``; each sample holds until the next."""
        while self.t < t_target - 1e-12:
            while self._imu and self._imu[0].timestamp <= self.t + 1e-12:
                self._u = self._imu.popleft()
            if self._u is None:
                raise StreamError("no IMU sample available before the scan")
            nxt = self._imu[0].timestamp if self._imu else np.inf
            dt = min(nxt, t_target) - self.t
            if dt <= 1e-12:
                self.t = min(nxt, t_target)
                continue
            while dt > 0.1:
                self._step(self._u, 0.1)
                dt -= 0.1
            self._step(self._u, dt)
            if record is not None:
                record.append((self.t, self.x.rotation.copy(), self.x.position.copy()))

    def process_scan(self, scan: LidarScan) -> ScanResult:
        t_end = scan.t_end
        record = [(self.t, self.x.rotation.copy(), self.x.position.copy())]
        self.propagate_to(t_end, record)
        buf = PoseBuffer(
            np.array([r[0] for r in record]),
            np.array([r[1] for r in record]),
            np.array([r[2] for r in record]),
        )
        pts = deskew_scan(scan.points, np.clip(scan.times, buf.times[0], buf.times[-1]), buf, self.T_il, t_end)
        if len(self.map) == 0:
            report = UpdateReport(len(pts), 0, 0.0, 0, False)
        else:
            self.x, self.P, report = update_with_scan(self.x, self.P, pts, self.map, self.T_il, self.params.update)
        self.covariance_min_eig = min(self.covariance_min_eig, float(np.linalg.eigvalsh(self.P).min()))
        if not report.degraded:
            self.map.insert(register_to_global(pts, self.T_il, self.x.pose))
        rate = np.zeros(3) if self._u is None else np.asarray(self._u.angular_rate, float) - self.x.gyro_bias
        return ScanResult(scan.scan_id, t_end, self.x, pts, report, buf, rate)


def run_lio(
    imu: Sequence[ImuSample],
    scans: Sequence[LidarScan],
    x0: NavState,
    T_imu_lidar: SE3,
    params: FilterParams = FilterParams(),
    t0: Optional[float] = None,
):
    """Process whole streams; returns the list of per-scan results."""
    t0 = scans[0].t_start if t0 is None else t0
    f = LioFilter(x0, t0, T_imu_lidar, params)
    for u in imu:
        f.add_imu(u)
    return [f.process_scan(s) for s in scans], f


# -- evaluation ----------------------------------------------------------------------------------


def align_umeyama(est: np.ndarray, gt: np.ndarray):
    """Rigid ``(R, t)`` minimizing ``sum |R est + t - gt|^2`` (no scale)."""
    me, mg = est.mean(0), gt.mean(0)
    C = (gt - mg).T @ (est - me) / len(est)
    U, _, Vt = np.linalg.svd(C)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    R = U @ D @ Vt
    return R, mg - R @ me


def absolute_trajectory_error(est: np.ndarray, gt: np.ndarray, align: bool = True) -> float:
    est = np.asarray(est, float)
    gt = np.asarray(gt, float)
    if align:
        R, t = align_umeyama(est, gt)
        est = est @ R.T + t
    return float(np.sqrt(np.mean(np.sum((est - gt) ** 2, axis=1))))

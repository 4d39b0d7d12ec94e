"""Synthetic ground truth: planar scenes, LiDAR/IMU/thermal streams, calibration data.

Every generator takes an explicit ``numpy.random.Generator`` so that a seed
fully determines the output.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from functools import lru_cache
from typing import Sequence

import numpy as np

from .camera import Intrinsics, PlanarObservation, distort_jacobians, in_image, project, undistort
from .data import ImuSample, LidarScan, ThermalFrame
from .extrinsic import LidarNoiseParams
from .geometry import SE3, boxplus_s2_batch, so3_exp, so3_log
from .radiometry import ZERO_CELSIUS, CalibrationPoint, RadiometricModel, band_radiance

GRAVITY = np.array([0.0, 0.0, -9.81])

# LiDAR frame: x forward, y left, z up.  Camera frame: x right, y down, z forward.
LIDAR_TO_CAMERA_AXES = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


# -- scene ------------------------------------------------------------------------


def _signed_area2(poly: np.ndarray) -> float:
    """Twice the signed area of a 2-D polygon (positive when counter-clockwise)."""
    nxt = np.roll(poly, -1, axis=0)
    return float(np.sum(poly[:, 0] * nxt[:, 1] - poly[:, 1] * nxt[:, 0]))


@dataclass
class Patch:
    """Axis-aligned rectangle in plane coordinates carrying its own temperature."""

    bounds: tuple  # (umin, umax, vmin, vmax)
    temperature: float  # deg C


@dataclass
class ScenePlane:
    origin: np.ndarray
    normal: np.ndarray
    u_axis: np.ndarray
    polygon: np.ndarray  # (K, 2) convex, counter-clockwise in (u, v)
    temperature: float  # deg C outside every patch
    patches: list = field(default_factory=list)
    name: str = ""

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        n = np.asarray(self.normal, dtype=float)
        self.normal = n / np.linalg.norm(n)
        u = np.asarray(self.u_axis, dtype=float)
        u = u - (u @ self.normal) * self.normal
        self.u_axis = u / np.linalg.norm(u)
        self.polygon = np.asarray(self.polygon, dtype=float)
        if _signed_area2(self.polygon) < 0:
            self.polygon = self.polygon[::-1].copy()

    @property
    def v_axis(self) -> np.ndarray:
        return np.cross(self.normal, self.u_axis)

    def to_plane(self, P: np.ndarray) -> np.ndarray:
        d = np.asarray(P) - self.origin
        return np.stack([d @ self.u_axis, d @ self.v_axis], axis=-1)

    def to_world(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return self.origin + uv[..., :1] * self.u_axis + uv[..., 1:2] * self.v_axis

    def contains(self, uv: np.ndarray) -> np.ndarray:
        a = self.polygon
        b = np.roll(a, -1, axis=0)
        e = b - a
        rel = uv[:, None, :] - a[None]
        cross = e[None, :, 0] * rel[..., 1] - e[None, :, 1] * rel[..., 0]
        return np.all(cross >= -1e-12, axis=1)

    def temperature_at(self, uv: np.ndarray) -> np.ndarray:
        out = np.full(len(uv), float(self.temperature))
        for p in self.patches:
            u0, u1, v0, v1 = p.bounds
            m = (uv[:, 0] >= u0) & (uv[:, 0] < u1) & (uv[:, 1] >= v0) & (uv[:, 1] < v1)
            out[m] = p.temperature
        return out


@dataclass
class SceneModel:
    planes: list

    def temperatures(self) -> list:
        temps = set()
        for p in self.planes:
            temps.add(p.temperature)
            temps.update(q.temperature for q in p.patches)
        return sorted(temps)


def _rect_plane(origin, u_axis, v_axis, size_u, size_v, temperature, patches=(), name=""):
    u = np.asarray(u_axis, float)
    v = np.asarray(v_axis, float)
    poly = np.array([[0, 0], [size_u, 0], [size_u, size_v], [0, size_v]], dtype=float)
    return ScenePlane(origin, np.cross(u, v), u, poly, temperature, list(patches), name)


def _polygon_plane(vertices, temperature, u_axis=None, name="") -> ScenePlane:
    """Plane through a planar convex polygon given by its 3D vertices."""
    V = np.asarray(vertices, dtype=float)
    n = np.cross(V[1] - V[0], V[2] - V[0])
    u = V[1] - V[0] if u_axis is None else np.asarray(u_axis, float)
    pl = ScenePlane(V[0], n, u, np.zeros((len(V), 2)), temperature, name=name)
    pl.polygon = pl.to_plane(V)
    if _signed_area2(pl.polygon) < 0:
        pl.polygon = pl.polygon[::-1].copy()
    return pl


def default_scene() -> SceneModel:
    """Room corner (floor + two walls) with a corner-cut panel, a ramp and a crate.

    Adjacent surfaces differ by at least 1.5 deg C so every plane junction
    shows up as a thermal step edge; temperatures span 26-33 deg C.
    """
    L, Hh = 16.0, 5.0
    floor = _rect_plane([0, 0, 0], [1, 0, 0], [0, 1, 0], L, L, 26.0, name="floor")
    wall_x = _rect_plane([0, 0, 0], [0, 1, 0], [0, 0, 1], L, Hh, 29.5,
                         [Patch((8.0, 10.0, 1.5, 3.0), 32.0)], name="wall_x")
    wall_y = _rect_plane([0, 0, 0], [0, 0, 1], [1, 0, 0], Hh, L, 31.0, name="wall_y")
    c = 2.5
    corner_cut = _polygon_plane([[c, 0, 0], [0, c, 0], [0, 0, c]], 33.0, name="corner_cut")
    # ramp leaning on wall_y: floor line y=1.5 up to wall line z=2.0, x in [5, 8]
    a = np.array([5.0, 1.5, 0.0])
    b = np.array([5.0, 0.0, 2.0])
    ramp = _polygon_plane([a, a + [3.0, 0, 0], b + [3.0, 0, 0], b], 27.5, name="ramp")
    crate = _box([2.8, 2.0, 0.0], [0.8, 0.8, 0.8], top=34.0, sides=(28.0, 31.5, 28.0, 31.5), name="crate")
    return SceneModel([floor, wall_x, wall_y, corner_cut, ramp, *crate])


def _box(corner, size, top: float, sides: tuple, name: str = "box") -> list:
    """Axis-aligned box resting on the floor: top face plus four outward-facing sides."""
    x0, y0, z0 = corner
    sx, sy, sz = size
    x1, y1, z1 = x0 + sx, y0 + sy, z0 + sz
    faces = [
        _polygon_plane([[x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1]], top, name=f"{name}_top"),
        _polygon_plane([[x0, y0, z0], [x0, y1, z0], [x0, y1, z1], [x0, y0, z1]], sides[0], name=f"{name}_xmin"),
        _polygon_plane([[x1, y0, z0], [x1, y1, z0], [x1, y1, z1], [x1, y0, z1]], sides[1], name=f"{name}_xmax"),
        _polygon_plane([[x0, y0, z0], [x1, y0, z0], [x1, y0, z1], [x0, y0, z1]], sides[2], name=f"{name}_ymin"),
        _polygon_plane([[x0, y1, z0], [x1, y1, z0], [x1, y1, z1], [x0, y1, z1]], sides[3], name=f"{name}_ymax"),
    ]
    return faces


def single_edge_scene() -> SceneModel:
    """Two walls meeting along one vertical edge; no other depth-continuous edge."""
    L, Hh = 16.0, 30.0
    wall_x = _rect_plane([0, 0, -10.0], [0, 1, 0], [0, 0, 1], L, Hh, 29.5, name="wall_x")
    wall_y = _rect_plane([0, 0, -10.0], [0, 0, 1], [1, 0, 0], Hh, L, 31.0, name="wall_y")
    return SceneModel([wall_x, wall_y])


def raycast(origins, directions, scene: SceneModel, max_range: float = np.inf):
    """Nearest forward polygon hit per ray.

    Returns ``(points, plane_ids, ranges, temperatures_c)``; misses carry
    ``plane_id == -1`` and NaN elsewhere.
    """
    o = np.atleast_2d(np.asarray(origins, dtype=float))
    d = np.atleast_2d(np.asarray(directions, dtype=float))
    n = max(len(o), len(d))
    o = np.broadcast_to(o, (n, 3))
    d = np.broadcast_to(d, (n, 3))
    best_t = np.full(n, np.inf)
    best_id = np.full(n, -1, dtype=int)
    for k, pl in enumerate(scene.planes):
        denom = d @ pl.normal
        num = (pl.origin - o) @ pl.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num / denom
        cand = (np.abs(denom) > 1e-12) & (t > 1e-9) & (t < best_t) & (t <= max_range)
        idx = np.nonzero(cand)[0]
        if len(idx) == 0:
            continue
        hit = o[idx] + t[idx, None] * d[idx]
        inside = pl.contains(pl.to_plane(hit))
        idx = idx[inside]
        best_t[idx] = t[idx]
        best_id[idx] = k
    hits = o + np.where(np.isfinite(best_t), best_t, np.nan)[:, None] * d
    temps = np.full(n, np.nan)
    for k, pl in enumerate(scene.planes):
        m = best_id == k
        if np.any(m):
            temps[m] = pl.temperature_at(pl.to_plane(hits[m]))
    rng_out = np.where(best_id >= 0, best_t, np.nan)
    return hits, best_id, rng_out, temps


def raycast_brute_force(origin, direction, scene: SceneModel):
    """Reference single-ray intersection against every plane."""
    best = (None, -1, np.inf)
    for k, pl in enumerate(scene.planes):
        denom = float(np.dot(direction, pl.normal))
        if abs(denom) < 1e-12:
            continue
        t = float(np.dot(pl.origin - origin, pl.normal)) / denom
        if t <= 1e-9:
            continue
        hit = np.asarray(origin) + t * np.asarray(direction)
        if pl.contains(pl.to_plane(hit)[None])[0] and t < best[2]:
            best = (hit, k, t)
    return best


# -- trajectories -----------------------------------------------------------------


@dataclass(frozen=True)
class TrajectorySpec:
    """Horizontal circle with sinusoidal attitude wobble around a fixed heading."""

    center: tuple = (7.0, 7.0, 1.2)
    radius: float = 3.0
    angular_rate: float = 20.0 / (3.0 * 30.0)  # 20 m of arc in 30 s
    phase: float = 0.0
    heave: float = 0.1  # m, vertical oscillation amplitude
    heave_rate: float = 0.7
    heading: float = np.radians(225.0)
    yaw_amp: float = np.radians(8.0)
    pitch_amp: float = np.radians(4.0)
    roll_amp: float = np.radians(3.0)
    wobble_rate: float = 0.5
    duration: float = 30.0
    imu_rate: float = 200.0
    scan_rate: float = 10.0

    def __post_init__(self):
        if self.imu_rate <= 0 or self.scan_rate <= 0:
            raise ValueError("sensor rates must be positive")

    def _angles(self, t):
        t = np.asarray(t, dtype=float)
        w = self.wobble_rate
        s = np.sin(w * t)
        c = np.cos(w * t)
        s2 = np.sin(1.3 * w * t + 0.4)
        c2 = np.cos(1.3 * w * t + 0.4)
        yaw = self.heading + self.yaw_amp * s
        pitch = self.pitch_amp * s2
        roll = self.roll_amp * c
        rates = (self.yaw_amp * w * c, self.pitch_amp * 1.3 * w * c2, -self.roll_amp * w * s)
        return (yaw, pitch, roll), rates

    def rotation(self, t) -> np.ndarray:
        """``Rz(yaw) Ry(pitch) Rx(roll)``; accepts scalar or array time."""
        (yaw, pitch, roll), _ = self._angles(t)
        return euler_zyx(yaw, pitch, roll)

    def position(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        a = self.angular_rate * t + self.phase
        c = np.asarray(self.center, float)
        return c + np.stack([
            self.radius * np.cos(a), self.radius * np.sin(a), self.heave * np.sin(self.heave_rate * t)
        ], axis=-1)

    def velocity(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        a = self.angular_rate * t + self.phase
        W = self.angular_rate
        return np.stack([
            -self.radius * W * np.sin(a), self.radius * W * np.cos(a),
            self.heave * self.heave_rate * np.cos(self.heave_rate * t),
        ], axis=-1)

    def acceleration(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        a = self.angular_rate * t + self.phase
        W = self.angular_rate
        return np.stack([
            -self.radius * W**2 * np.cos(a), -self.radius * W**2 * np.sin(a),
            -self.heave * self.heave_rate**2 * np.sin(self.heave_rate * t),
        ], axis=-1)

    def angular_velocity_body(self, t) -> np.ndarray:
        (yaw, pitch, roll), (dy, dp, dr) = self._angles(t)
        sr, cr = np.sin(roll), np.cos(roll)
        sp, cp = np.sin(pitch), np.cos(pitch)
        return np.stack([dr - dy * sp, dp * cr + dy * sr * cp, -dp * sr + dy * cr * cp], axis=-1)

    def pose(self, t) -> SE3:
        """World-from-IMU pose at a scalar time."""
        return SE3(self.rotation(t), self.position(t))


def trajectory_to_kv(spec: TrajectorySpec) -> dict:
    """Field name to text; round-trips through :func:`trajectory_from_kv`."""
    out = {}
    for f in fields(spec):
        v = getattr(spec, f.name)
        out[f.name] = ",".join(repr(float(x)) for x in v) if isinstance(v, tuple) else repr(float(v))
    return out


def trajectory_from_kv(values: dict) -> TrajectorySpec:
    kw = {}
    for f in fields(TrajectorySpec):
        if f.name not in values:
            continue
        raw = values[f.name]
        kw[f.name] = tuple(float(x) for x in raw.split(",")) if f.name == "center" else float(raw)
    return TrajectorySpec(**kw)


def euler_zyx(yaw, pitch, roll) -> np.ndarray:
    yaw, pitch, roll = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (yaw, pitch, roll)))
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    R = np.empty(yaw.shape + (3, 3))
    R[..., 0, 0] = cy * cp
    R[..., 0, 1] = cy * sp * sr - sy * cr
    R[..., 0, 2] = cy * sp * cr + sy * sr
    R[..., 1, 0] = sy * cp
    R[..., 1, 1] = sy * sp * sr + cy * cr
    R[..., 1, 2] = sy * sp * cr - cy * sr
    R[..., 2, 0] = -sp
    R[..., 2, 1] = cp * sr
    R[..., 2, 2] = cp * cr
    return R


@dataclass(frozen=True)
class StaticTrajectory:
    """Fixed pose, used for calibration captures."""

    T: SE3 = field(default_factory=SE3)
    duration: float = 1.0
    imu_rate: float = 200.0
    scan_rate: float = 10.0

    def rotation(self, t):
        shape = np.shape(t)
        return np.broadcast_to(self.T.rotation, shape + (3, 3)).copy()

    def position(self, t):
        return np.broadcast_to(self.T.translation, np.shape(t) + (3,)).copy()

    def velocity(self, t):
        return np.zeros(np.shape(t) + (3,))

    def acceleration(self, t):
        return np.zeros(np.shape(t) + (3,))

    def angular_velocity_body(self, t):
        return np.zeros(np.shape(t) + (3,))

    def pose(self, t) -> SE3:
        return self.T


def look_at_pose(eye, target, up=(0.0, 0.0, 1.0)) -> SE3:
    """World-from-IMU pose whose x axis points at ``target`` (z up, FLU body)."""
    eye = np.asarray(eye, float)
    x = np.asarray(target, float) - eye
    x /= np.linalg.norm(x)
    y = np.cross(up, x)
    y /= np.linalg.norm(y)
    z = np.cross(x, y)
    return SE3(np.column_stack([x, y, z]), eye)


# -- rig ----------------------------------------------------------------------------


@dataclass(frozen=True)
class ImuNoise:
    gyro_density: float = 0.0  # rad/s/sqrt(Hz)
    accel_density: float = 0.0  # m/s^2/sqrt(Hz)
    gyro_bias_walk: float = 0.0  # rad/s^2/sqrt(Hz)
    accel_bias_walk: float = 0.0  # m/s^3/sqrt(Hz)
    gyro_bias: tuple = (0.0, 0.0, 0.0)
    accel_bias: tuple = (0.0, 0.0, 0.0)


REALISTIC_IMU = ImuNoise(1.5e-3, 1.5e-2, 1e-5, 1e-4, (2e-3, -1e-3, 1.5e-3), (0.02, -0.015, 0.01))


def default_camera_lidar_extrinsic() -> SE3:
    """Camera-from-LiDAR transform of the default rig."""
    R = so3_exp([0.02, -0.015, 0.01]) @ LIDAR_TO_CAMERA_AXES
    return SE3(R, [0.05, -0.08, 0.02])


def default_intrinsics() -> Intrinsics:
    # 640 x 512 detector with an 88.5 x 73.2 deg field of view
    return Intrinsics.from_fov(640, 512, 88.5, 73.2, (-0.2, 0.05, 0.001, -0.0005, 0.0))


def default_radiometric_model() -> RadiometricModel:
    # simulator choice, not a measured camera response
    return RadiometricModel(K=180.0, B=1000.0, valid_range=(303.15, 323.15))


@dataclass(frozen=True)
class SensorRig:
    intr: Intrinsics = field(default_factory=default_intrinsics)
    T_cam_lidar: SE3 = field(default_factory=default_camera_lidar_extrinsic)
    T_imu_lidar: SE3 = field(default_factory=lambda: SE3(np.eye(3), [0.03, 0.0, 0.05]))
    noise: LidarNoiseParams = field(default_factory=LidarNoiseParams)
    radio: RadiometricModel = field(default_factory=default_radiometric_model)
    imu_noise: ImuNoise = field(default_factory=ImuNoise)
    lidar_fov_deg: tuple = (70.4, 77.2)
    points_per_scan: int = 10_000
    max_range: float = 190.0
    read_noise_dn: float = 0.0
    bit_depth: int = 14
    background_temperature_c: float = 0.0
    supersample: int = 1

    def with_noise(self, lidar: bool = True, imu: bool = True, read_noise_dn: float = 2.0) -> "SensorRig":
        return replace(
            self,
            noise=LidarNoiseParams() if lidar else LidarNoiseParams.noiseless(),
            imu_noise=REALISTIC_IMU if imu else ImuNoise(),
            read_noise_dn=read_noise_dn,
        )

    def world_from_lidar(self, T_world_imu: SE3) -> SE3:
        return T_world_imu @ self.T_imu_lidar

    def world_from_camera(self, T_world_imu: SE3) -> SE3:
        return T_world_imu @ self.T_imu_lidar @ self.T_cam_lidar.inverse()


def noiseless_rig(**kw) -> SensorRig:
    return SensorRig(noise=LidarNoiseParams.noiseless(), **kw)


# -- LiDAR ----------------------------------------------------------------------------


def radical_inverse(idx: np.ndarray, base: int) -> np.ndarray:
    """Van der Corput value of each index; cost is independent of the offset."""
    i = np.asarray(idx, dtype=np.int64).copy()
    out = np.zeros(i.shape)
    f = 1.0 / base
    while np.any(i > 0):
        out += f * (i % base)
        i //= base
        f /= base
    return out


def scan_pattern(n: int, fov_deg: tuple, start_index: int = 0) -> np.ndarray:
    """Low-discrepancy beam directions (LiDAR frame) covering the FOV.

    Consecutive calls with advancing ``start_index`` continue the same
    Halton sequence, so coverage keeps densifying across scans.
    """
    idx = np.arange(start_index + 1, start_index + 1 + n, dtype=np.int64)
    s = np.column_stack([radical_inverse(idx, 2), radical_inverse(idx, 3)])
    az = np.radians(fov_deg[0]) * (s[:, 0] - 0.5)
    el = np.radians(fov_deg[1]) * (s[:, 1] - 0.5)
    return np.column_stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])


def simulate_lidar_scan(
    rig: SensorRig,
    scene: SceneModel,
    trajectory,
    t0: float,
    period: float = 0.1,
    scan_id: int = 0,
    rng: np.random.Generator | None = None,
) -> LidarScan:
    """One sweep; each return is ray-cast from the platform pose at its own time.

    ``trajectory`` supplies vectorized ``rotation(t)`` / ``position(t)`` of the
    world-from-IMU pose. Measured values follow ``d = d_gt + dd`` and
    ``w = w_gt [+] dw`` with ``dd ~ N(0, sigma_d^2)``, ``dw ~ N(0, Sigma_omega)``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    n = rig.points_per_scan
    dirs = scan_pattern(n, rig.lidar_fov_deg, scan_id * n)
    times = t0 + period * np.arange(n) / n
    if hasattr(trajectory, "duration") and times[-1] > trajectory.duration + 1e-9:
        raise ValueError("trajectory does not cover the scan time span")
    R_wi = trajectory.rotation(times)
    p_wi = trajectory.position(times)
    R_il, t_il = rig.T_imu_lidar.rotation, rig.T_imu_lidar.translation
    R_wl = R_wi @ R_il
    origins = p_wi + R_wi @ t_il
    world_dirs = np.einsum("nij,nj->ni", R_wl, dirs)
    hits, ids, ranges, _ = raycast(origins, world_dirs, scene, rig.max_range)
    keep = ids >= 0
    dirs, ranges, times, hits, ids = dirs[keep], ranges[keep], times[keep], hits[keep], ids[keep]
    clean = LidarScan(dirs, ranges, times, scan_id, t0, t0 + period, hits, ids)
    return apply_lidar_noise(clean, rig.noise, rng)


def apply_lidar_noise(scan: LidarScan, noise: LidarNoiseParams, rng: np.random.Generator) -> LidarScan:
    """Perturb a noise-free scan: range plus ``dd``, direction boxplus ``dw``."""
    m = len(scan)
    dd = rng.normal(0.0, noise.sigma_d, m) if noise.sigma_d > 0 else np.zeros(m)
    if np.any(noise.sigma_omega):
        dw = rng.multivariate_normal(np.zeros(2), noise.sigma_omega, m)
        dirs = boxplus_s2_batch(scan.directions, dw)
    else:
        dirs = scan.directions
    return replace(scan, directions=dirs, depths=scan.depths + dd)


def simulate_scans(rig: SensorRig, scene: SceneModel, trajectory, rng: np.random.Generator, n_scans: int | None = None):
    period = 1.0 / trajectory.scan_rate
    if n_scans is None:
        n_scans = int(round(trajectory.duration * trajectory.scan_rate))
    return [simulate_lidar_scan(rig, scene, trajectory, k * period, period, k, rng) for k in range(n_scans)]


# -- thermal camera ---------------------------------------------------------------------


@lru_cache(maxsize=8)
def _camera_rays(intr: Intrinsics, supersample: int) -> np.ndarray:
    """Unit rays for a ``supersample x supersample`` grid inside every pixel.

    Pixel centres are undistorted exactly; sub-pixel offsets use the local
    inverse distortion Jacobian, whose second-order error is far below 1e-3 px.
    """
    s = supersample
    offs = (np.arange(s) + 0.5) / s - 0.5
    v, u = np.meshgrid(np.arange(intr.height, dtype=float), np.arange(intr.width, dtype=float), indexing="ij")
    yd = (v.ravel() - intr.cy) / intr.fy
    xd = (u.ravel() - intr.cx - intr.skew * yd) / intr.fx
    xy = undistort(np.column_stack([xd, yd]), intr.dist)
    if s > 1:
        J, _ = distort_jacobians(xy, intr.dist)
        Jinv = np.linalg.inv(J)
        du, dv = np.meshgrid(offs, offs, indexing="xy")
        dyd = dv.ravel() / intr.fy
        dxd = (du.ravel() - intr.skew * dyd) / intr.fx
        dxy = np.einsum("nij,sj->nsi", Jinv, np.column_stack([dxd, dyd]))
        xy = (xy[:, None, :] + dxy).reshape(-1, 2)
    rays = np.column_stack([xy, np.ones(len(xy))])
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    rays.flags.writeable = False
    return rays


def render_radiance(rig: SensorRig, scene: SceneModel, T_world_cam: SE3, supersample: int | None = None) -> np.ndarray:
    """Noise-free pixel radiance, averaged over ``supersample**2`` rays per pixel."""
    intr = rig.intr
    s = supersample or rig.supersample
    rays_cam = _camera_rays(intr, s)
    dirs = rays_cam @ T_world_cam.rotation.T
    _, ids, _, temps = raycast(T_world_cam.translation[None], dirs, scene)
    band = rig.radio.band
    radiance = np.full(len(dirs), band_radiance(rig.background_temperature_c + ZERO_CELSIUS, band))
    hit = ids >= 0
    uniq, inv = np.unique(temps[hit], return_inverse=True)
    if len(uniq):
        radiance[hit] = band_radiance(uniq + ZERO_CELSIUS, band)[inv]
    return radiance.reshape(intr.height, intr.width, s * s).mean(axis=2)


def render_thermal_frame(
    rig: SensorRig,
    scene: SceneModel,
    T_world_cam: SE3,
    rng: np.random.Generator | None = None,
    timestamp: float = 0.0,
    frame_id: int = 0,
    supersample: int | None = None,
) -> ThermalFrame:
    """Forward chain radiance -> ``K L + B`` -> read noise -> integer quantization."""
    L = render_radiance(rig, scene, T_world_cam, supersample)
    return frame_from_radiance(L, rig, rng, timestamp, frame_id)


def frame_times(duration: float, rate: float, offset: float = 0.0) -> np.ndarray:
    """Exposure times ``k / rate + offset`` for ``k >= 1`` inside ``[0, duration]``."""
    if rate <= 0:
        raise ValueError("frame rate must be positive")
    n = int(np.floor(duration * rate + 1e-9))
    t = np.arange(1, n + 1) / rate + offset
    return t[(t >= 0) & (t <= duration + 1e-9)]


def simulate_frames(rig: SensorRig, scene: SceneModel, trajectory, rng: np.random.Generator,
                    rate: float | None = None, offset: float = 0.0, supersample: int | None = None) -> list:
    """Thermal frames along a trajectory, one per exposure time (no motion blur)."""
    rate = trajectory.scan_rate if rate is None else rate
    out = []
    for k, t in enumerate(frame_times(trajectory.duration, rate, offset)):
        T_wc = rig.world_from_camera(trajectory.pose(float(t)))
        out.append(render_thermal_frame(rig, scene, T_wc, rng, float(t), k, supersample))
    return out


def frame_from_radiance(L: np.ndarray, rig: SensorRig, rng=None, timestamp: float = 0.0, frame_id: int = 0) -> ThermalFrame:
    dn = rig.radio.K * L + rig.radio.B
    if rig.read_noise_dn > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        dn = dn + rng.normal(0.0, rig.read_noise_dn, dn.shape)
    dn = np.clip(np.rint(dn), 0, 2**rig.bit_depth - 1).astype(np.uint16)
    return ThermalFrame(dn, timestamp, frame_id)


# -- IMU ----------------------------------------------------------------------------------


def simulate_imu(
    trajectory,
    noise: ImuNoise = ImuNoise(),
    gravity=GRAVITY,
    rng: np.random.Generator | None = None,
    sampling: str = "interval",
    duration: float | None = None,
) -> list:
    """IMU samples at ``trajectory.imu_rate`` from the analytic trajectory.

    ``sampling="interval"`` reports the mean body rate and specific force over
    ``[t_k, t_k + dt]`` (what an anti-aliased IMU delivers), so Euler
    integration of the samples reproduces the trajectory. ``"point"`` reports
    instantaneous derivatives at ``t_k``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    g = np.asarray(gravity, float)
    dt = 1.0 / trajectory.imu_rate
    duration = trajectory.duration if duration is None else duration
    n = int(round(duration * trajectory.imu_rate)) + 1
    bg = np.array(noise.gyro_bias, float)
    ba = np.array(noise.accel_bias, float)
    sg = noise.gyro_density / np.sqrt(dt)
    sa = noise.accel_density / np.sqrt(dt)
    out = []
    for k in range(n):
        t = k * dt
        R = trajectory.rotation(t)
        if sampling == "interval":
            R1 = trajectory.rotation(t + dt)
            w = so3_log(R.T @ R1) / dt
            a_world = (trajectory.velocity(t + dt) - trajectory.velocity(t)) / dt
        elif sampling == "point":
            w = trajectory.angular_velocity_body(t)
            a_world = trajectory.acceleration(t)
        else:
            raise ValueError(f"unknown sampling mode {sampling!r}")
        f = R.T @ (a_world - g)
        w_m = w + bg + (rng.normal(0.0, sg, 3) if sg > 0 else 0.0)
        f_m = f + ba + (rng.normal(0.0, sa, 3) if sa > 0 else 0.0)
        out.append(ImuSample(t, w_m, f_m))
        if noise.gyro_bias_walk > 0:
            bg = bg + rng.normal(0.0, noise.gyro_bias_walk * np.sqrt(dt), 3)
        if noise.accel_bias_walk > 0:
            ba = ba + rng.normal(0.0, noise.accel_bias_walk * np.sqrt(dt), 3)
    return out


# -- calibration datasets ------------------------------------------------------------------


def simulate_blackbody_dataset(
    radio_truth: RadiometricModel,
    temps_c: Sequence[float],
    dn_noise_sigma: float,
    rng: np.random.Generator | None = None,
    n_frames: int = 50,
    thermistor_tolerance: float = 0.1,
) -> list:
    """ROI-mean DN per blackbody set point.

    The recorded reference temperature carries a uniform thermistor error of
    at most ``thermistor_tolerance``; the DN is generated from the true
    surface temperature and averaged over ``n_frames`` noisy frames.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    points = []
    for Tc in temps_c:
        T_true = Tc + ZERO_CELSIUS
        dn = radio_truth.temperature_to_dn(T_true)
        dn += rng.normal(0.0, dn_noise_sigma / np.sqrt(n_frames)) if dn_noise_sigma > 0 else 0.0
        recorded = T_true + (rng.uniform(-thermistor_tolerance, thermistor_tolerance) if thermistor_tolerance > 0 else 0.0)
        points.append(CalibrationPoint(recorded, max(float(dn), 0.0)))
    return points


def checkerboard_points(cols: int = 17, rows: int = 13, spacing: float = 0.06) -> np.ndarray:
    gx, gy = np.meshgrid(np.arange(cols) * spacing, np.arange(rows) * spacing)
    return np.column_stack([gx.ravel(), gy.ravel()])


def simulate_checkerboard_views(
    intr: Intrinsics,
    n_views: int,
    corner_noise: float,
    rng: np.random.Generator,
    board: np.ndarray | None = None,
    max_tilt: float = 1.0,
    depth_range: tuple = (0.6, 1.2),
    parallel: bool = False,
) -> tuple:
    """Random board poses fully inside the image; returns ``(views, poses)``.

    With ``parallel`` every board shares one fronto-parallel orientation,
    the degenerate configuration for closed-form calibration.
    """
    board = checkerboard_points() if board is None else board
    centered = board - board.mean(0)
    X = np.column_stack([centered, np.zeros(len(centered))])
    views, poses = [], []
    attempts = 0
    while len(views) < n_views:
        attempts += 1
        if attempts > 10_000:
            raise RuntimeError("could not place checkerboard views inside the image")
        if parallel:
            R = np.eye(3)
        else:
            rv = rng.uniform(-max_tilt, max_tilt, 3)
            rv[2] = rng.uniform(-0.3, 0.3)
            R = so3_exp(rv)
        z = rng.uniform(*depth_range)
        t = np.array([rng.uniform(-0.5, 0.5) * z, rng.uniform(-0.4, 0.4) * z, z])
        pose = SE3(R, t)
        P = pose.apply(X)
        if np.any(P[:, 2] < 0.1):
            continue
        uv = project(P, intr)
        if not np.all(in_image(uv, intr, border=5.0)):
            continue
        if corner_noise > 0:
            uv = uv + rng.normal(0.0, corner_noise, uv.shape)
        views.append(PlanarObservation(centered, uv))
        poses.append(pose)
    return views, poses


def default_calibration_pose() -> SE3:
    """Static world-from-IMU pose facing the default room corner."""
    return look_at_pose([4.3, 4.2, 1.5], [0.0, 0.0, 0.9])


def simulate_calibration_capture(
    rig: SensorRig,
    scene: SceneModel,
    T_world_imu: SE3,
    window: float,
    rng: np.random.Generator,
    scan_rate: float = 10.0,
    supersample: int = 4,
):
    """Static accumulation of LiDAR sweeps plus one thermal frame.

    Returns ``(points_lidar, frame, scans)``.
    """
    traj = StaticTrajectory(T_world_imu, window, scan_rate=scan_rate)
    n_scans = max(1, int(round(window * scan_rate)))
    scans = simulate_scans(rig, scene, traj, rng, n_scans)
    points = np.vstack([s.points for s in scans])
    frame = render_thermal_frame(rig, scene, rig.world_from_camera(T_world_imu), rng, supersample=supersample)
    return points, frame, scans


@dataclass
class CalibrationScenario:
    """Noise-free calibration capture, reusable across noise realizations."""

    rig: SensorRig
    clean_scans: list
    radiance: np.ndarray

    @classmethod
    def build(cls, rig: SensorRig, scene: SceneModel, T_world_imu: SE3, window: float,
              scan_rate: float = 10.0, supersample: int = 4) -> "CalibrationScenario":
        clean_rig = replace(rig, noise=LidarNoiseParams.noiseless())
        traj = StaticTrajectory(T_world_imu, window, scan_rate=scan_rate)
        n_scans = max(1, int(round(window * scan_rate)))
        scans = simulate_scans(clean_rig, scene, traj, np.random.default_rng(0), n_scans)
        L = render_radiance(rig, scene, rig.world_from_camera(T_world_imu), supersample)
        return cls(rig, scans, L)

    def sample(self, rng: np.random.Generator, noise: LidarNoiseParams | None = None, read_noise_dn: float | None = None):
        """One noisy realization: ``(points_lidar, frame)``."""
        noise = self.rig.noise if noise is None else noise
        scans = [apply_lidar_noise(s, noise, rng) for s in self.clean_scans]
        rig = self.rig if read_noise_dn is None else replace(self.rig, read_noise_dn=read_noise_dn)
        frame = frame_from_radiance(self.radiance, rig, rng)
        return np.vstack([s.points for s in scans]), frame

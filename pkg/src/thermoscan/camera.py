"""Pinhole + Brown-Conrady camera model and planar-target intrinsic calibration."""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import BehindCameraError, DegenerateGeometryError, InsufficientViewsError, UndistortDivergence
from .geometry import SE3, orthonormalize, skew_batch, so3_exp

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    skew: float = 0.0
    dist: tuple = (0.0, 0.0, 0.0, 0.0, 0.0)  # k1, k2, p1, p2, k3
    width: int | None = None
    height: int | None = None

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        object.__setattr__(self, "dist", tuple(float(c) for c in self.dist))
        if len(self.dist) != 5:
            raise ValueError("distortion must be [k1, k2, p1, p2, k3]")
        if self.width is not None and not 0 <= self.cx < self.width:
            raise ValueError("principal point outside the sensor width")
        if self.height is not None and not 0 <= self.cy < self.height:
            raise ValueError("principal point outside the sensor height")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, self.skew, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float, vfov_deg: float, dist=(0.0,) * 5):
        """Pinhole intrinsics whose undistorted frustum spans the given FOV."""
        fx = 0.5 * width / np.tan(np.radians(hfov_deg) / 2)
        fy = 0.5 * height / np.tan(np.radians(vfov_deg) / 2)
        return cls(fx, fy, (width - 1) / 2, (height - 1) / 2, 0.0, tuple(dist), width, height)

    def to_kv(self) -> str:
        lines = [
            f"fx={float(self.fx)!r}", f"fy={float(self.fy)!r}", f"cx={float(self.cx)!r}", f"cy={float(self.cy)!r}",
            f"skew={float(self.skew)!r}", "dist=" + ",".join(repr(float(c)) for c in self.dist),
        ]
        if self.width is not None:
            lines += [f"width={self.width}", f"height={self.height}"]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_kv(cls, values: dict) -> "Intrinsics":
        dist = tuple(float(c) for c in values["dist"].split(","))
        w = values.get("width")
        h = values.get("height")
        return cls(
            float(values["fx"]), float(values["fy"]), float(values["cx"]), float(values["cy"]),
            float(values.get("skew", 0.0)), dist,
            int(w) if w is not None else None, int(h) if h is not None else None,
        )


def distort(xy, coeffs) -> np.ndarray:
    """Apply radial + tangential distortion to normalized coordinates (N, 2) or (2,)."""
    xy = np.asarray(xy, dtype=float)
    k1, k2, p1, p2, k3 = coeffs
    x, y = xy[..., 0], xy[..., 1]
    r2 = x * x + y * y
    radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
    yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
    return np.stack([xd, yd], axis=-1)


def distort_jacobians(xy, coeffs):
    """Return (d distorted / d xy, d distorted / d coeffs) with shapes (N,2,2), (N,2,5)."""
    xy = np.atleast_2d(np.asarray(xy, dtype=float))
    k1, k2, p1, p2, k3 = coeffs
    x, y = xy[:, 0], xy[:, 1]
    r2 = x * x + y * y
    r4 = r2 * r2
    r6 = r4 * r2
    radial = 1.0 + k1 * r2 + k2 * r4 + k3 * r6
    c = 2.0 * k1 + 4.0 * k2 * r2 + 6.0 * k3 * r4  # d radial / dx = c * x
    Jxy = np.empty((len(x), 2, 2))
    Jxy[:, 0, 0] = radial + c * x * x + 2.0 * p1 * y + 6.0 * p2 * x
    Jxy[:, 0, 1] = c * x * y + 2.0 * p1 * x + 2.0 * p2 * y
    Jxy[:, 1, 0] = c * x * y + 2.0 * p1 * x + 2.0 * p2 * y
    Jxy[:, 1, 1] = radial + c * y * y + 6.0 * p1 * y + 2.0 * p2 * x
    Jc = np.empty((len(x), 2, 5))
    Jc[:, 0] = np.stack([x * r2, x * r4, 2.0 * x * y, r2 + 2.0 * x * x, x * r6], axis=1)
    Jc[:, 1] = np.stack([y * r2, y * r4, r2 + 2.0 * y * y, 2.0 * x * y, y * r6], axis=1)
    return Jxy, Jc


def undistort(xy_distorted, coeffs, max_iter: int = 50, tol: float = 1e-8) -> np.ndarray:
    """Invert :func:`distort` by Newton iteration from the distorted point.

    Raises :class:`UndistortDivergence` if the round-trip error is still above
    ``tol`` after ``max_iter`` iterations.
    """
    xd = np.asarray(xy_distorted, dtype=float)
    if not any(coeffs):
        return xd.copy()
    shape = xd.shape
    target = xd.reshape(-1, 2)
    x = target.copy()
    active = np.arange(len(x))
    with np.errstate(all="ignore"):
        for _ in range(max_iter):
            if len(active) == 0:
                break
            xa = x[active]
            f = distort(xa, coeffs) - target[active]
            J, _ = distort_jacobians(xa, coeffs)
            det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
            sx = (J[:, 1, 1] * f[:, 0] - J[:, 0, 1] * f[:, 1]) / det
            sy = (J[:, 0, 0] * f[:, 1] - J[:, 1, 0] * f[:, 0]) / det
            x[active, 0] -= sx
            x[active, 1] -= sy
            moving = np.abs(sx) + np.abs(sy) > 1e-15
            active = active[moving]
        err = np.max(np.abs(distort(x, coeffs) - target)) if x.size else 0.0
        # a root past the fold of the distortion polynomial is not a physical preimage
        k1, k2, _, _, k3 = coeffs
        r2 = np.sum(x * x, axis=1)
        J, _ = distort_jacobians(x, coeffs)
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        folded = bool(np.any((1.0 + r2 * (k1 + r2 * (k2 + r2 * k3)) <= 0) | (det <= 0)))
    if not np.isfinite(err) or err > tol or folded:
        raise UndistortDivergence(f"distortion inversion did not converge (residual {err:.3g}, folded={folded})")
    return x.reshape(shape)


def _pixels_from_distorted(xd: np.ndarray, intr: Intrinsics) -> np.ndarray:
    u = intr.fx * xd[..., 0] + intr.skew * xd[..., 1] + intr.cx
    v = intr.fy * xd[..., 1] + intr.cy
    return np.stack([u, v], axis=-1)


def project(P_cam, intr: Intrinsics) -> np.ndarray:
    """Project camera-frame point(s) to distorted pixel coordinates."""
    P = np.asarray(P_cam, dtype=float)
    z = P[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("point is behind the camera (Z <= 0)")
    xy = P[..., :2] / z[..., None]
    return _pixels_from_distorted(distort(xy, intr.dist), intr)


def project_points(P_cam: np.ndarray, intr: Intrinsics, min_depth: float = 1e-6):
    """Non-raising projection: returns ``(uv, valid)`` where ``valid`` marks Z > min_depth."""
    P = np.atleast_2d(np.asarray(P_cam, dtype=float))
    valid = P[:, 2] > min_depth
    z = np.where(valid, P[:, 2], 1.0)
    xy = P[:, :2] / z[:, None]
    uv = _pixels_from_distorted(distort(xy, intr.dist), intr)
    uv[~valid] = np.nan
    return uv, valid


def in_image(uv: np.ndarray, intr: Intrinsics, border: float = 0.0) -> np.ndarray:
    """Mask of pixel coordinates inside ``[-0.5, W-0.5) x [-0.5, H-0.5)`` shrunk by ``border``."""
    u, v = uv[:, 0], uv[:, 1]
    with np.errstate(invalid="ignore"):
        return (
            (u >= -0.5 + border) & (u < intr.width - 0.5 - border)
            & (v >= -0.5 + border) & (v < intr.height - 0.5 - border)
        )


def projection_jacobian(P_cam: np.ndarray, intr: Intrinsics) -> np.ndarray:
    """d(u, v)/dP for camera-frame points, shape (N, 2, 3)."""
    P = np.atleast_2d(np.asarray(P_cam, dtype=float))
    z = P[:, 2]
    xy = P[:, :2] / z[:, None]
    Jd, _ = distort_jacobians(xy, intr.dist)
    Jn = np.zeros((len(P), 2, 3))
    Jn[:, 0, 0] = 1.0 / z
    Jn[:, 1, 1] = 1.0 / z
    Jn[:, 0, 2] = -xy[:, 0] / z
    Jn[:, 1, 2] = -xy[:, 1] / z
    Kp = np.array([[intr.fx, intr.skew], [0.0, intr.fy]])
    return Kp @ Jd @ Jn


def pixel_rays(intr: Intrinsics, uv: np.ndarray) -> np.ndarray:
    """Unit camera-frame rays through distorted pixel coordinates."""
    uv = np.asarray(uv, dtype=float)
    yd = (uv[..., 1] - intr.cy) / intr.fy
    xd = (uv[..., 0] - intr.cx - intr.skew * yd) / intr.fx
    xy = undistort(np.stack([xd, yd], axis=-1), intr.dist)
    rays = np.concatenate([xy, np.ones(xy.shape[:-1] + (1,))], axis=-1)
    return rays / np.linalg.norm(rays, axis=-1, keepdims=True)


# -- intrinsic calibration ------------------------------------------------------


@dataclass
class PlanarObservation:
    board_points: np.ndarray  # (N, 2) metres on the Z=0 plane
    image_points: np.ndarray  # (N, 2) pixels

    def __post_init__(self):
        self.board_points = np.asarray(self.board_points, dtype=float).reshape(-1, 2)
        self.image_points = np.asarray(self.image_points, dtype=float).reshape(-1, 2)
        if len(self.board_points) != len(self.image_points):
            raise ValueError("board and image point lists differ in length")
        if len(self.board_points) < 4:
            raise ValueError("a planar view needs at least 4 points")
        centered = self.board_points - self.board_points.mean(0)
        s = np.linalg.svd(centered, compute_uv=False)
        if s[1] < 1e-9 * max(s[0], 1e-300):
            raise ValueError("board points are collinear")


@dataclass
class IntrinsicReport:
    initial_rms: float
    rms: float
    iterations: int
    cost_trace: list = field(default_factory=list)
    converged: bool = True

    def to_kv(self) -> str:
        return (
            f"initial_rms_px={self.initial_rms:.9g}\nreprojection_rms_px={self.rms:.9g}\n"
            f"iterations={self.iterations}\nconverged={str(self.converged).lower()}\n"
        )


def _hartley(pts: np.ndarray) -> np.ndarray:
    c = pts.mean(0)
    d = np.sqrt(((pts - c) ** 2).sum(1)).mean()
    s = np.sqrt(2) / d
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def estimate_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Normalized DLT homography mapping ``src`` (N,2) to ``dst`` (N,2)."""
    Ts, Td = _hartley(src), _hartley(dst)
    s = (np.column_stack([src, np.ones(len(src))]) @ Ts.T)
    d = (np.column_stack([dst, np.ones(len(dst))]) @ Td.T)
    n = len(src)
    A = np.zeros((2 * n, 9))
    A[0::2, 0:3] = s
    A[0::2, 6:9] = -d[:, :1] * s
    A[1::2, 3:6] = s
    A[1::2, 6:9] = -d[:, 1:2] * s
    _, _, Vt = np.linalg.svd(A)
    Hn = Vt[-1].reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    return H / H[2, 2]


def _v_row(H: np.ndarray, i: int, j: int) -> np.ndarray:
    hi, hj = H[:, i], H[:, j]
    return np.array([
        hi[0] * hj[0],
        hi[0] * hj[1] + hi[1] * hj[0],
        hi[1] * hj[1],
        hi[2] * hj[0] + hi[0] * hj[2],
        hi[2] * hj[1] + hi[1] * hj[2],
        hi[2] * hj[2],
    ])


def closed_form_intrinsics(homographies: Sequence[np.ndarray], image_size: tuple[float, float], zero_skew: bool = True):
    """Intrinsic matrix from the r1/r2 orthonormality constraints of each homography."""
    w, h = image_size
    s = 2.0 / (w + h)
    N = np.array([[s, 0, -s * w / 2], [0, s, -s * h / 2], [0, 0, 1.0]])
    rows = []
    for H in homographies:
        Hn = N @ H
        Hn = Hn / np.linalg.norm(Hn)
        rows.append(_v_row(Hn, 0, 1))
        rows.append(_v_row(Hn, 0, 0) - _v_row(Hn, 1, 1))
    V = np.array(rows)
    if zero_skew:
        V = np.vstack([V, [0, 1.0, 0, 0, 0, 0]])
    _, sv, Vt = np.linalg.svd(V)
    # exactly one null direction is expected; a second tiny singular value means
    # the views do not constrain K (e.g. all boards parallel)
    cond = sv[0] / max(sv[-2], 1e-300)
    if cond > 1e8:
        raise DegenerateGeometryError(
            f"calibration views are degenerate (condition number {cond:.3g}); use boards at distinct orientations"
        )
    b11, b12, b22, b13, b23, b33 = Vt[-1]
    if b11 < 0:
        b11, b12, b22, b13, b23, b33 = -b11, -b12, -b22, -b13, -b23, -b33
    den = b11 * b22 - b12 * b12
    v0 = (b12 * b13 - b11 * b23) / den
    lam = b33 - (b13 * b13 + v0 * (b12 * b13 - b11 * b23)) / b11
    if lam / b11 <= 0 or lam * b11 / den <= 0:
        raise DegenerateGeometryError("closed-form intrinsics are not positive definite")
    alpha = np.sqrt(lam / b11)
    beta = np.sqrt(lam * b11 / den)
    gamma = -b12 * alpha**2 * beta / lam
    u0 = gamma * v0 / beta - b13 * alpha**2 / lam
    Kn = np.array([[alpha, gamma, u0], [0, beta, v0], [0, 0, 1.0]])
    return np.linalg.inv(N) @ Kn


def pose_from_homography(K: np.ndarray, H: np.ndarray) -> SE3:
    M = np.linalg.inv(K) @ H
    lam = 1.0 / np.linalg.norm(M[:, 0])
    if (lam * M[:, 2])[2] < 0:
        lam = -lam
    r1, r2, t = lam * M[:, 0], lam * M[:, 1], lam * M[:, 2]
    R = orthonormalize(np.column_stack([r1, r2, np.cross(r1, r2)]))
    return SE3(R, t)


def _pack(intr: Intrinsics, poses: Sequence[SE3], with_skew: bool):
    head = [intr.fx, intr.fy, intr.cx, intr.cy] + ([intr.skew] if with_skew else []) + list(intr.dist)
    return np.array(head, dtype=float), list(poses)


def _unpack_intr(theta: np.ndarray, with_skew: bool) -> Intrinsics:
    fx, fy, cx, cy = theta[:4]
    skew = theta[4] if with_skew else 0.0
    dist = tuple(theta[5:10] if with_skew else theta[4:9])
    return Intrinsics(fx, fy, cx, cy, skew, dist)


def reprojection_residuals(views: Sequence[PlanarObservation], intr: Intrinsics, poses: Sequence[SE3]) -> np.ndarray:
    """Stacked (predicted - observed) pixel residuals for all views, shape (M, 2)."""
    out = []
    for obs, pose in zip(views, poses):
        X = np.column_stack([obs.board_points, np.zeros(len(obs.board_points))])
        P = pose.apply(X)
        uv, _ = project_points(P, intr)
        out.append(uv - obs.image_points)
    return np.vstack(out)


def _calib_jacobian(views, intr: Intrinsics, poses, with_skew: bool):
    """Residuals and dense Jacobian over [intrinsics, distortion, per-view (dtheta, dt)]."""
    n_intr = 10 if with_skew else 9
    n_par = n_intr + 6 * len(views)
    counts = [len(v.board_points) for v in views]
    J = np.zeros((2 * sum(counts), n_par))
    res = []
    row = 0
    Kp = np.array([[intr.fx, intr.skew], [0.0, intr.fy]])
    for k, (obs, pose) in enumerate(zip(views, poses)):
        X = np.column_stack([obs.board_points, np.zeros(len(obs.board_points))])
        P = pose.apply(X)
        z = P[:, 2]
        xy = P[:, :2] / z[:, None]
        xd = distort(xy, intr.dist)
        uv = _pixels_from_distorted(xd, intr)
        res.append((uv - obs.image_points).reshape(-1))
        n = len(P)
        Jd, Jc = distort_jacobians(xy, intr.dist)
        block = np.zeros((n, 2, n_intr))
        block[:, 0, 0] = xd[:, 0]
        block[:, 1, 1] = yd = xd[:, 1]
        block[:, 0, 2] = 1.0
        block[:, 1, 3] = 1.0
        off = 4
        if with_skew:
            block[:, 0, 4] = yd
            off = 5
        block[:, :, off:off + 5] = Kp @ Jc
        Jp = projection_jacobian(P, intr)
        dP = np.concatenate([-skew_batch(P), np.broadcast_to(np.eye(3), (n, 3, 3))], axis=2)
        Jpose = Jp @ dP
        rows = slice(row, row + 2 * n)
        J[rows, :n_intr] = block.reshape(2 * n, n_intr)
        J[rows, n_intr + 6 * k:n_intr + 6 * k + 6] = Jpose.reshape(2 * n, 6)
        row += 2 * n
    return np.concatenate(res), J


def _apply_step(intr, poses, step, with_skew):
    n_intr = 10 if with_skew else 9
    theta, _ = _pack(intr, poses, with_skew)
    new_intr = _unpack_intr(theta + step[:n_intr], with_skew)
    new_poses = [SE3(so3_exp(step[n_intr + 6 * k:n_intr + 6 * k + 3]), step[n_intr + 6 * k + 3:n_intr + 6 * k + 6]) @ p
                 for k, p in enumerate(poses)]
    return new_intr, new_poses


def calibrate_intrinsics(
    views: Sequence[PlanarObservation],
    image_size: tuple[int, int],
    estimate_skew: bool = False,
    max_iter: int = 100,
    step_tol: float = 1e-10,
):
    """Zhang-style calibration followed by Levenberg-Marquardt refinement.

    Returns ``(intrinsics, poses, report)``; ``poses[i]`` maps board
    coordinates of view ``i`` into the camera frame.
    """
    if len(views) < 3:
        raise InsufficientViewsError(f"intrinsic calibration needs at least 3 views, got {len(views)}")
    Hs = [estimate_homography(v.board_points, v.image_points) for v in views]
    K0 = closed_form_intrinsics(Hs, image_size, zero_skew=not estimate_skew)
    intr = Intrinsics(K0[0, 0], K0[1, 1], K0[0, 2], K0[1, 2], K0[0, 1] if estimate_skew else 0.0)
    poses = [pose_from_homography(intr.K, H) for H in Hs]

    res, J = _calib_jacobian(views, intr, poses, estimate_skew)
    cost = float(res @ res)
    initial_rms = float(np.sqrt(cost / len(res)))
    trace = [cost]
    lam = 1e-3
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        A = J.T @ J
        g = J.T @ res
        D = np.diag(np.diag(A))
        accepted = False
        while lam < 1e12:
            try:
                step = -np.linalg.solve(A + lam * D, g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            cand_intr, cand_poses = _apply_step(intr, poses, step, estimate_skew)
            cand_res, cand_J = _calib_jacobian(views, cand_intr, cand_poses, estimate_skew)
            cand_cost = float(cand_res @ cand_res)
            if np.isfinite(cand_cost) and cand_cost <= cost:
                intr, poses, res, J, cost = cand_intr, cand_poses, cand_res, cand_J, cand_cost
                lam = max(lam / 10, 1e-15)
                accepted = True
                break
            lam *= 10
        trace.append(cost)
        if not accepted or np.linalg.norm(step) < step_tol:
            converged = True
            break
    else:
        converged = False
    rms = float(np.sqrt(cost / len(res)))
    width, height = image_size
    intr = replace(intr, width=None, height=None)
    if 0 <= intr.cx < width and 0 <= intr.cy < height:
        intr = replace(intr, width=int(width), height=int(height))
    report = IntrinsicReport(initial_rms, rms, it, trace, converged)
    log.debug("intrinsic calibration: rms %.4g px after %d iterations", rms, it)
    return intr, poses, report


def load_observations(path) -> list[PlanarObservation]:
    """Read ``view_id,Xw,Yw,u,v`` rows grouped by view id (in first-seen order)."""
    groups: dict[str, list] = defaultdict(list)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["view_id", "Xw", "Yw", "u", "v"]
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != expected:
            raise ValueError(f"{path}: expected header '{','.join(expected)}'")
        for row in reader:
            groups[row["view_id"]].append([float(row[k]) for k in expected[1:]])
    views = []
    for rows in groups.values():
        a = np.array(rows)
        views.append(PlanarObservation(a[:, :2], a[:, 2:]))
    return views


def save_observations(path, views: Sequence[PlanarObservation]) -> None:
    lines = ["view_id,Xw,Yw,u,v"]
    for i, obs in enumerate(views):
        for (X, Y), (u, v) in zip(obs.board_points, obs.image_points):
            lines.append(f"{i},{X:.6f},{Y:.6f},{u:.9f},{v:.9f}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")

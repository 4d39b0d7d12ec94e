"""Depth-continuous LiDAR edges, thermal gradient edges and their association."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .camera import Intrinsics, in_image, project_points, projection_jacobian
from .data import ThermalFrame
from .errors import DegenerateLineError
from .geometry import SE3

log = logging.getLogger(__name__)


# -- LiDAR edges ----------------------------------------------------------------------


@dataclass
class LidarEdge:
    samples: np.ndarray  # (N, 3) LiDAR frame
    direction: np.ndarray  # unit (3,)
    plane_normals: tuple = ()

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float).reshape(-1, 3)
        d = np.asarray(self.direction, dtype=float)
        self.direction = d / np.linalg.norm(d)
        if len(self.samples) < 2:
            raise ValueError("a LiDAR edge needs at least two samples")


@dataclass
class EdgeParams:
    voxel_size: float = 1.0
    voxel_margin: float = 0.25  # neighbourhood grown around each voxel for plane fitting
    inlier_threshold: float = 0.02
    ransac_iterations: int = 200
    score_sample: int = 2000
    max_planes: int = 4
    min_plane_points: int = 30
    min_plane_spread: float = 0.08  # m, std of inliers across their minor in-plane axis
    min_angle_deg: float = 30.0
    max_angle_deg: float = 150.0
    sample_spacing: float = 0.05
    end_trim: float = 0.1  # m removed where an edge's support ends inside a voxel
    support_radius: float = 0.15  # m from the line within which each plane must have points beside a sample
    min_samples: int = 3
    min_points: int = 50
    seed: int = 0


@dataclass
class _Plane:
    normal: np.ndarray
    offset: float  # n . x + offset = 0
    inliers: np.ndarray


def _fit_plane(P: np.ndarray):
    c = P.mean(0)
    _, _, Vt = np.linalg.svd(P - c, full_matrices=False)
    n = Vt[-1]
    return n, -float(n @ c)


def _ransac_planes(P: np.ndarray, params: EdgeParams, rng: np.random.Generator) -> list:
    planes = []
    remaining = np.arange(len(P))
    thr = params.inlier_threshold
    while len(remaining) >= params.min_plane_points and len(planes) < params.max_planes:
        Q = P[remaining]
        idx = rng.integers(0, len(Q), size=(params.ransac_iterations, 3))
        a, b, c = Q[idx[:, 0]], Q[idx[:, 1]], Q[idx[:, 2]]
        n = np.cross(b - a, c - a)
        norm = np.linalg.norm(n, axis=1)
        ok = norm > 1e-9
        if not np.any(ok):
            break
        n = n[ok] / norm[ok, None]
        off = -np.sum(n * a[ok], axis=1)
        # score hypotheses on a subsample; inliers are then taken from all points
        S = Q if len(Q) <= params.score_sample else Q[rng.choice(len(Q), params.score_sample, replace=False)]
        counts = (np.abs(S @ n.T + off) < thr).sum(0)
        best = int(np.argmax(counts))
        inl = np.abs(Q @ n[best] + off[best]) < thr
        if inl.sum() < params.min_plane_points:
            break
        for _ in range(2):
            nn, oo = _fit_plane(Q[inl])
            inl = np.abs(Q @ nn + oo) < thr
        members = remaining[inl]
        # a wider band than the inlier test keeps range-noise tails from posing as planes
        remaining = remaining[np.abs(Q @ nn + oo) >= 2.0 * thr]
        if inl.sum() < params.min_plane_points:
            continue
        if any(np.median(np.abs(P[members] @ pl.normal + pl.offset)) < 3.0 * thr for pl in planes):
            continue
        # reject thin strips such as tangent bands on curved surfaces
        X = Q[inl] - Q[inl].mean(0)
        sv = np.linalg.svd(X, compute_uv=False) / np.sqrt(len(X))
        if sv[1] < params.min_plane_spread:
            continue
        planes.append(_Plane(nn, oo, members))
    return _refine_exclusive(P, planes, params) if planes else planes


def _robust_refit(P: np.ndarray, iters: int = 4):
    """Plane fit trimmed at three robust sigmas of its own residuals."""
    keep = np.ones(len(P), bool)
    n, o = _fit_plane(P)
    for _ in range(iters):
        res = np.abs(P @ n + o)
        sigma = 1.4826 * np.median(res)
        keep = res <= max(3.0 * sigma, 1e-6)
        if keep.sum() < 3:
            break
        n, o = _fit_plane(P[keep])
    return n, o, keep


def _refine_exclusive(P: np.ndarray, planes: list, params: EdgeParams) -> list:
    """Refit each plane without points that also lie near another plane.

    Points of a neighbouring surface close to the intersection pass the inlier
    test of both planes and would tilt the fits toward each other; surfaces too
    small to be detected on their own are trimmed by the robust refit.
    """
    thr = params.inlier_threshold
    for _ in range(2):
        D = np.abs(P @ np.array([p.normal for p in planes]).T + np.array([p.offset for p in planes]))
        refined = []
        for k, pl in enumerate(planes):
            own = D[:, k] < thr
            if len(planes) > 1:
                own &= np.delete(D, k, axis=1).min(axis=1) > 2.0 * thr
            if own.sum() < params.min_plane_points:
                # too little of this surface is unambiguous to trust its fit
                continue
            idx = np.nonzero(own)[0]
            n, o, keep = _robust_refit(P[idx])
            refined.append(_Plane(n, o, idx[keep]))
        planes = refined
        if len(planes) < 2:
            break
    return planes


def _line_support(samples_t: np.ndarray, P: np.ndarray, p0, d, radius: float, half_window: float) -> np.ndarray:
    """Mask of line parameters having a point of ``P`` within ``radius`` of the line nearby."""
    rel = P - p0
    t = rel @ d
    perp = np.linalg.norm(rel - t[:, None] * d, axis=1)
    t = np.sort(t[perp < radius])
    if len(t) == 0:
        return np.zeros(len(samples_t), bool)
    i = np.clip(np.searchsorted(t, samples_t), 1, len(t) - 1) if len(t) > 1 else np.zeros(len(samples_t), int)
    nearest = np.minimum(np.abs(t[i] - samples_t), np.abs(t[np.maximum(i - 1, 0)] - samples_t))
    return nearest <= half_window


def _trim_run_ends(keep: np.ndarray, k: int) -> np.ndarray:
    """Drop ``k`` samples at each end of a supported run unless it touches the voxel boundary.

    A run that stops inside the voxel ends where a third surface takes over;
    the image edge bends there.
    """
    if k <= 0 or not np.any(keep):
        return keep
    out = keep.copy()
    idx = np.flatnonzero(np.diff(np.concatenate([[0], keep.astype(int), [0]])))
    for a, b in zip(idx[::2], idx[1::2]):
        if a > 0:
            out[a:a + k] = False
        if b < len(keep):
            out[max(b - k, a):b] = False
    return out


def _clip_line_to_box(p0, d, lo, hi):
    tmin, tmax = -np.inf, np.inf
    for k in range(3):
        if abs(d[k]) < 1e-12:
            if p0[k] < lo[k] or p0[k] > hi[k]:
                return None
            continue
        t1 = (lo[k] - p0[k]) / d[k]
        t2 = (hi[k] - p0[k]) / d[k]
        tmin = max(tmin, min(t1, t2))
        tmax = min(tmax, max(t1, t2))
    if tmax <= tmin:
        return None
    return tmin, tmax


def extract_lidar_edges(cloud, params: EdgeParams = EdgeParams()) -> list:
    """Intersection lines of adjacent planes, sampled along their support.

    Each voxel's neighbourhood is segmented into planes by iterative RANSAC;
    pairs meeting at 30-150 degrees yield an edge clipped to the voxel and
    kept only where both planes have observed points nearby. Depth
    discontinuities never produce an edge.
    """
    P = np.asarray(cloud, dtype=float).reshape(-1, 3)
    if len(P) < params.min_points:
        return []
    vs = params.voxel_size
    keys = np.floor(P / vs).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    tree = cKDTree(P)
    cos_lo = np.cos(np.radians(params.min_angle_deg))
    cos_hi = np.cos(np.radians(params.max_angle_deg))
    edges = []
    counts = np.bincount(inverse, minlength=len(uniq))
    for vi in range(len(uniq)):
        key = uniq[vi]
        if counts[vi] < params.min_points // 2:
            continue
        lo = key * vs
        hi = lo + vs
        center = lo + 0.5 * vs
        half = 0.5 * vs + params.voxel_margin
        nb = np.array(tree.query_ball_point(center, half * np.sqrt(3), p=2.0))
        if len(nb) < params.min_points:
            continue
        nb = nb[np.all(np.abs(P[nb] - center) <= half, axis=1)]
        if len(nb) < params.min_points:
            continue
        rng = np.random.default_rng([params.seed, *(int(k) & 0xFFFFFFFF for k in key)])
        planes = _ransac_planes(P[nb], params, rng)
        for pa, pb in combinations(planes, 2):
            c = float(pa.normal @ pb.normal)
            if not (cos_hi <= c <= cos_lo):
                continue
            d = np.cross(pa.normal, pb.normal)
            d /= np.linalg.norm(d)
            A = np.vstack([pa.normal, pb.normal, d])
            p0 = np.linalg.solve(A, [-pa.offset, -pb.offset, d @ center])
            seg = _clip_line_to_box(p0, d, lo, hi)
            if seg is None:
                continue
            t0, t1 = seg
            ts = np.arange(t0 + 0.5 * params.sample_spacing, t1, params.sample_spacing)
            if len(ts) < params.min_samples:
                continue
            S = p0 + ts[:, None] * d
            Q = P[nb]
            half = 0.5 * params.sample_spacing
            keep = _line_support(ts, Q[pa.inliers], p0, d, params.support_radius, half)
            keep &= _line_support(ts, Q[pb.inliers], p0, d, params.support_radius, half)
            keep = _trim_run_ends(keep, int(round(params.end_trim / params.sample_spacing)))
            if keep.sum() < params.min_samples:
                continue
            edges.append(LidarEdge(S[keep], d, (pa.normal, pb.normal)))
    return edges


def edge_angle_deg(edge: LidarEdge) -> float:
    """Angle between the edge's supporting planes (0-180 degrees)."""
    na, nb = edge.plane_normals
    return float(np.degrees(np.arccos(np.clip(na @ nb, -1.0, 1.0))))


# -- thermal edges ---------------------------------------------------------------------


@dataclass
class ThermalEdges:
    pixels: np.ndarray  # (N, 2) integer (u, v)
    points: np.ndarray  # (N, 2) sub-pixel (u, v)
    gradients: np.ndarray  # (N, 2) unit gradient direction (gu, gv)
    magnitudes: np.ndarray  # (N,) DN per pixel
    _tree: cKDTree | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.points if len(self.points) else np.zeros((0, 2)))
        return self._tree


def _bilinear(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return ndimage.map_coordinates(img, [v, u], order=1, mode="nearest")


def extract_thermal_edges(frame, low: float, high: float, sigma: float = 1.4, subpixel: bool = True) -> ThermalEdges:
    """Canny edges with per-pixel gradient directions.

    Thresholds are gradient magnitudes in DN per pixel. With ``subpixel`` each
    edge pixel is shifted along its gradient to the parabolic peak of the
    gradient magnitude.
    """
    dn = frame.dn if isinstance(frame, ThermalFrame) else np.asarray(frame)
    if dn.size == 0:
        raise ValueError("empty frame")
    if not 0 < low < high:
        raise ValueError("thresholds must satisfy 0 < low < high")
    img = ndimage.gaussian_filter(dn.astype(float), sigma, mode="nearest")
    gu = ndimage.sobel(img, axis=1, mode="nearest") / 8.0
    gv = ndimage.sobel(img, axis=0, mode="nearest") / 8.0
    mag = np.hypot(gu, gv)
    cand = mag >= low
    cand[:2, :] = cand[-2:, :] = False
    cand[:, :2] = cand[:, -2:] = False
    vv, uu = np.nonzero(cand)
    empty = ThermalEdges(np.zeros((0, 2), int), np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))
    if len(vv) == 0:
        return empty
    m0 = mag[vv, uu]
    du = gu[vv, uu] / m0
    dv = gv[vv, uu] / m0
    m_plus = _bilinear(mag, uu + du, vv + dv)
    m_minus = _bilinear(mag, uu - du, vv - dv)
    # ties go to the pixel on the negative-gradient side
    peak = (m0 >= m_plus) & (m0 > m_minus)
    nms = np.zeros_like(cand)
    nms[vv[peak], uu[peak]] = True
    weak_labels, n_lab = ndimage.label(nms, structure=np.ones((3, 3), bool))
    strong = nms & (mag >= high)
    keep_labels = np.unique(weak_labels[strong])
    keep_labels = keep_labels[keep_labels > 0]
    final = np.isin(weak_labels, keep_labels)
    sel = peak & final[vv, uu]
    u, v = uu[sel], vv[sel]
    g = np.column_stack([du[sel], dv[sel]])
    pts = np.column_stack([u, v]).astype(float)
    if subpixel:
        mp, mm, mc = m_plus[sel], m_minus[sel], m0[sel]
        den = mm - 2.0 * mc + mp
        with np.errstate(divide="ignore", invalid="ignore"):
            off = np.where(den < 0, 0.5 * (mm - mp) / den, 0.0)
        off = np.clip(off, -0.5, 0.5)
        pts = pts + off[:, None] * g
    return ThermalEdges(np.column_stack([u, v]), pts, g, mag[v, u])


# -- local line fit and matching ---------------------------------------------------------


@dataclass
class ImageEdgeLocal:
    q_mean: np.ndarray
    normal: np.ndarray
    scatter: np.ndarray
    direction: np.ndarray
    eigenvalues: np.ndarray  # ascending


def fit_local_line(neighbors) -> ImageEdgeLocal:
    """Total-least-squares line through image points (mean + scatter eigenvectors)."""
    Q = np.asarray(neighbors, dtype=float).reshape(-1, 2)
    if len(Q) < 2:
        raise DegenerateLineError("a line fit needs at least two points")
    q = Q.mean(0)
    D = Q - q
    S = D.T @ D
    if not np.any(S):
        raise DegenerateLineError("all neighbour points coincide")
    w, V = np.linalg.eigh(S)
    return ImageEdgeLocal(q, V[:, 0], S, V[:, 1], w)


def _batch_line_fit(Q: np.ndarray):
    q = Q.mean(1)
    D = Q - q[:, None]
    S = np.einsum("nki,nkj->nij", D, D)
    w, V = np.linalg.eigh(S)
    return q, V[:, :, 0], V[:, :, 1], w, S


@dataclass
class EdgeCorrespondence:
    lidar_point: np.ndarray
    q_mean: np.ndarray
    normal: np.ndarray
    lidar_edge_direction: np.ndarray


@dataclass
class CorrespondenceSet:
    """Column-stored correspondences; iterate or index for single records."""

    lidar_points: np.ndarray  # (M, 3)
    q_means: np.ndarray  # (M, 2)
    normals: np.ndarray  # (M, 2)
    directions: np.ndarray  # (M, 3) LiDAR-frame edge direction
    edge_ids: np.ndarray = None  # (M,)

    def __post_init__(self):
        if self.edge_ids is None:
            self.edge_ids = np.zeros(len(self.lidar_points), dtype=int)

    def __len__(self) -> int:
        return len(self.lidar_points)

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return EdgeCorrespondence(self.lidar_points[i], self.q_means[i], self.normals[i], self.directions[i])
        return CorrespondenceSet(self.lidar_points[i], self.q_means[i], self.normals[i], self.directions[i], self.edge_ids[i])

    @classmethod
    def from_records(cls, records: Sequence[EdgeCorrespondence]) -> "CorrespondenceSet":
        if not records:
            return cls(np.zeros((0, 3)), np.zeros((0, 2)), np.zeros((0, 2)), np.zeros((0, 3)))
        return cls(
            np.array([r.lidar_point for r in records], float),
            np.array([r.q_mean for r in records], float),
            np.array([r.normal for r in records], float),
            np.array([r.lidar_edge_direction for r in records], float),
        )


@dataclass
class MatchParams:
    kappa: int = 5
    gate_px: float = 20.0
    max_cos: float = 0.5  # |n . projected edge direction| must stay below cos(60 deg)
    max_line_rms: float = 0.2  # px, rejects neighbourhoods straddling two edges


def stack_edge_samples(lidar_edges: Sequence[LidarEdge]):
    if not lidar_edges:
        return np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, int)
    pts = np.vstack([e.samples for e in lidar_edges])
    dirs = np.vstack([np.broadcast_to(e.direction, e.samples.shape) for e in lidar_edges])
    ids = np.concatenate([np.full(len(e.samples), i) for i, e in enumerate(lidar_edges)])
    return pts, dirs, ids


def project_edge_samples(points, directions, T_cam_lidar: SE3, intr: Intrinsics):
    """Pixel positions, unit image-plane edge directions and an in-view mask."""
    Pc = T_cam_lidar.apply(points)
    uv, valid = project_points(Pc, intr)
    inside = valid & in_image(uv, intr)
    img_dir = np.full((len(points), 2), np.nan)
    if np.any(inside):
        J = projection_jacobian(Pc[inside], intr)
        dc = directions[inside] @ T_cam_lidar.rotation.T
        dd = np.einsum("nij,nj->ni", J, dc)
        norm = np.linalg.norm(dd, axis=1, keepdims=True)
        img_dir[inside] = dd / np.where(norm > 0, norm, 1.0)
    return uv, img_dir, inside


def match_edges(
    lidar_edges: Sequence[LidarEdge],
    thermal: ThermalEdges,
    T_cam_lidar: SE3,
    intr: Intrinsics,
    params: MatchParams = MatchParams(),
) -> CorrespondenceSet:
    """Associate projected LiDAR edge samples with local thermal edge lines.

    A sample is kept when its ``kappa`` nearest edge pixels form a clean line
    within ``gate_px`` of the projection, and that line is parallel (normal
    orthogonal) to the projected LiDAR edge direction.
    """
    if params.kappa < 2:
        raise ValueError("kappa must be at least 2")
    pts, dirs, ids = stack_edge_samples(lidar_edges)
    empty = CorrespondenceSet(np.zeros((0, 3)), np.zeros((0, 2)), np.zeros((0, 2)), np.zeros((0, 3)), np.zeros(0, int))
    if len(pts) == 0 or len(thermal) < params.kappa:
        return empty
    uv, img_dir, inside = project_edge_samples(pts, dirs, T_cam_lidar, intr)
    sel = np.nonzero(inside)[0]
    if len(sel) == 0:
        return empty
    _, nn = thermal.tree.query(uv[sel], k=params.kappa)
    Q = thermal.points[nn]
    q, normal, _, w, _ = _batch_line_fit(Q)
    dist = np.linalg.norm(uv[sel] - q, axis=1)
    ortho = np.abs(np.sum(normal * img_dir[sel], axis=1))
    line_rms = np.sqrt(np.maximum(w[:, 0], 0.0) / params.kappa)
    ok = (dist < params.gate_px) & (ortho < params.max_cos) & (line_rms < params.max_line_rms) & (w[:, 1] > 0)
    k = sel[ok]
    return CorrespondenceSet(pts[k], q[ok], normal[ok], dirs[k], ids[k])


# -- debug exports -----------------------------------------------------------------------


def thermal_edges_to_csv(edges: ThermalEdges) -> str:
    rows = ["u,v,gx,gy"]
    rows += [f"{u:.4f},{v:.4f},{gx:.6f},{gy:.6f}" for (u, v), (gx, gy) in zip(edges.points, edges.gradients)]
    return "\n".join(rows) + "\n"


def lidar_edges_to_csv(edges: Sequence[LidarEdge]) -> str:
    rows = ["x,y,z,dx,dy,dz"]
    for e in edges:
        dx, dy, dz = e.direction
        rows += [f"{x:.6f},{y:.6f},{z:.6f},{dx:.6f},{dy:.6f},{dz:.6f}" for x, y, z in e.samples]
    return "\n".join(rows) + "\n"

"""Temperature attribution of LiDAR points from paired thermal frames."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .camera import Intrinsics, in_image, project_points
from .data import ThermalFrame
from .errors import ConfigError
from .geometry import SE3, smallest_eigenvector_sym3, voxel_keys
from .radiometry import ZERO_CELSIUS, RadiometricModel, dn_to_temperature

log = logging.getLogger(__name__)

DEFAULT_PAIRING_TOLERANCE = 0.02  # s, one period of a 50 Hz camera


@dataclass
class ThermalPointCloud:
    points: np.ndarray  # (N, 3) metres
    temperature: np.ndarray  # (N,) deg C
    scan_id: np.ndarray  # (N,) int
    confidence: np.ndarray  # (N,) in [0, 1]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        n = len(self.points)
        self.temperature = np.asarray(self.temperature, dtype=float).reshape(n)
        self.scan_id = np.asarray(self.scan_id, dtype=np.int64).reshape(n)
        self.confidence = np.asarray(self.confidence, dtype=float).reshape(n)

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def empty(cls) -> "ThermalPointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0), np.zeros(0))

    @classmethod
    def concatenate(cls, clouds: Sequence["ThermalPointCloud"]) -> "ThermalPointCloud":
        if not clouds:
            return cls.empty()
        return cls(
            np.vstack([c.points for c in clouds]),
            np.concatenate([c.temperature for c in clouds]),
            np.concatenate([c.scan_id for c in clouds]),
            np.concatenate([c.confidence for c in clouds]),
        )

    def transformed(self, T: SE3) -> "ThermalPointCloud":
        return ThermalPointCloud(T.apply(self.points), self.temperature, self.scan_id, self.confidence)

    def subset(self, mask) -> "ThermalPointCloud":
        return ThermalPointCloud(self.points[mask], self.temperature[mask], self.scan_id[mask], self.confidence[mask])


# -- temporal association -------------------------------------------------------------------


@dataclass(frozen=True)
class FramePairing:
    scan_id: int
    frame_id: int
    time_offset: float  # frame time minus scan time


@dataclass
class PairingResult:
    pairs: list
    unpaired: list  # scan ids without a frame inside the tolerance


def pair_streams(scan_times, frame_times, tolerance: float = DEFAULT_PAIRING_TOLERANCE, scan_ids=None, frame_ids=None):
    """Pair every scan with its nearest frame in time, if within ``tolerance``."""
    st = np.asarray(scan_times, dtype=float)
    ft = np.asarray(frame_times, dtype=float)
    sid = np.arange(len(st)) if scan_ids is None else np.asarray(scan_ids)
    fid = np.arange(len(ft)) if frame_ids is None else np.asarray(frame_ids)
    if len(st) == 0 or len(ft) == 0:
        return PairingResult([], [int(s) for s in sid])
    if np.any(np.diff(st) < 0) or np.any(np.diff(ft) < 0):
        raise ValueError("streams must be time-sorted")
    j = np.clip(np.searchsorted(ft, st), 1, len(ft) - 1) if len(ft) > 1 else np.zeros(len(st), int)
    if len(ft) > 1:
        left = j - 1
        j = np.where(np.abs(ft[left] - st) <= np.abs(ft[j] - st), left, j)
    off = ft[j] - st
    pairs, unpaired = [], []
    for k in range(len(st)):
        if abs(off[k]) <= tolerance + 1e-12:
            pairs.append(FramePairing(int(sid[k]), int(fid[j[k]]), float(off[k])))
        else:
            unpaired.append(int(sid[k]))
    return PairingResult(pairs, unpaired)


# -- visibility -----------------------------------------------------------------------------


@dataclass(frozen=True)
class FusionParams:
    bin_px: int = 2
    depth_gate: float = 0.3  # m
    dilation: int = 2  # bins; sparse scans leave gaps in a single-bin z-buffer
    normal_neighbors: int = 6
    max_mixed_c: Optional[float] = 1.0  # deg C spread over the bilinear footprint; None disables
    voxel: Optional[float] = 0.05  # m; None keeps every point
    min_depth: float = 0.05  # m

    def __post_init__(self):
        if self.bin_px < 1 or self.dilation < 0:
            raise ConfigError("bin_px must be >= 1 and dilation >= 0")
        if self.depth_gate <= 0:
            raise ConfigError("depth_gate must be positive")
        if self.voxel is not None and self.voxel <= 0:
            raise ConfigError("voxel must be positive or None")


def occlusion_filter(points_cam: np.ndarray, intr: Intrinsics, params: FusionParams = FusionParams(), occluders=None):
    """Visibility mask from a binned z-buffer.

    A point is hidden when some point falling within ``dilation`` bins of it
    is nearer than its own depth by more than ``depth_gate``. Extra camera-frame
    ``occluders`` join the z-buffer without being classified. Points behind
    the camera or outside the image are reported visible here; projection
    culling handles them.
    """
    P = np.asarray(points_cam, dtype=float).reshape(-1, 3)
    if len(P) == 0:
        raise ValueError("occlusion_filter needs a nonempty cloud")
    Z = P if occluders is None else np.vstack([P, np.asarray(occluders, float).reshape(-1, 3)])
    uv, ok = project_points(Z, intr, params.min_depth)
    ok &= in_image(uv, intr)
    depth = np.linalg.norm(Z, axis=1)
    nb_u = -(-intr.width // params.bin_px)
    nb_v = -(-intr.height // params.bin_px)
    bu = np.zeros(len(Z), dtype=np.int64)
    bv = np.zeros(len(Z), dtype=np.int64)
    bu[ok] = np.clip(np.floor((uv[ok, 0] + 0.5) / params.bin_px), 0, nb_u - 1)
    bv[ok] = np.clip(np.floor((uv[ok, 1] + 0.5) / params.bin_px), 0, nb_v - 1)
    zbuf = np.full((nb_v, nb_u), np.inf)
    np.minimum.at(zbuf, (bv[ok], bu[ok]), depth[ok])
    if params.dilation > 0:
        zbuf = ndimage.minimum_filter(zbuf, size=2 * params.dilation + 1, mode="constant", cval=np.inf)
    n = len(P)
    vis = np.ones(n, dtype=bool)
    own = ok[:n]
    vis[own] = depth[:n][own] <= zbuf[bv[:n][own], bu[:n][own]] + params.depth_gate
    return vis


def estimate_normals(points: np.ndarray, k: int = 6, query=None) -> np.ndarray:
    """Surface normals oriented toward the origin.

    Each normal is the cross product of the offsets to the two nearest
    neighbours; where those three points are close to collinear the PCA normal
    of the ``k`` nearest neighbours is used instead. Normals are computed at
    ``query`` (default: every point) against the neighbourhoods of ``points``.
    """
    P = np.asarray(points, dtype=float)
    Q = P if query is None else np.asarray(query, dtype=float).reshape(-1, 3)
    if len(P) < 3:
        return np.tile([0.0, 0.0, -1.0], (len(Q), 1))
    tree = cKDTree(P)
    _, idx = tree.query(Q, k=3)
    a = P[idx[:, 1]] - Q
    b = P[idx[:, 2]] - Q
    n = np.cross(a, b)
    nn = np.linalg.norm(n, axis=1)
    # sine of the angle between the two offsets
    sin = nn / np.maximum(np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1), 1e-300)
    weak = sin < 0.3
    n /= np.where(weak, 1.0, nn)[:, None]
    if np.any(weak):
        _, j = tree.query(Q[weak], k=min(k, len(P)))
        nb = P[j]
        D = nb - nb.mean(axis=1, keepdims=True)
        _, n[weak] = smallest_eigenvector_sym3(np.einsum("nki,nkj->nij", D, D))
    flip = np.sum(n * Q, axis=1) > 0
    n[flip] *= -1.0
    return n


def incidence_confidence(points_cam: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """``1 - angle / 90 deg`` between the viewing ray and the surface normal."""
    rays = points_cam / np.linalg.norm(points_cam, axis=1, keepdims=True)
    c = np.clip(np.abs(np.sum(rays * normals, axis=1)), 0.0, 1.0)
    return 1.0 - np.arccos(c) / (0.5 * np.pi)


# -- colorization ---------------------------------------------------------------------------


@dataclass
class ColorizeReport:
    n_input: int = 0
    behind: int = 0
    outside: int = 0
    occluded: int = 0
    out_of_range: int = 0
    mixed: int = 0
    kept: int = 0
    kept_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def to_kv(self, prefix: str = "") -> str:
        keys = ("n_input", "behind", "outside", "occluded", "out_of_range", "mixed", "kept")
        return "\n".join(f"{prefix}{k}={getattr(self, k)}" for k in keys)


@lru_cache(maxsize=16)
def dn_per_kelvin(radio: RadiometricModel) -> float:
    """Smallest DN slope over the model's valid range (the radiance curve is convex)."""
    lo = radio.valid_range[0]
    return float(radio.temperature_to_dn(lo + 0.5) - radio.temperature_to_dn(lo - 0.5))


def sample_bilinear(raster: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear raster value at pixel coordinates (centres on integers), edge-clamped."""
    return ndimage.map_coordinates(raster.astype(float), [uv[:, 1], uv[:, 0]], order=1, mode="nearest")


def footprint_spread(raster: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Max minus min of the 2x2 pixels a bilinear sample at ``uv`` reads."""
    h, w = raster.shape
    u0 = np.clip(np.floor(uv[:, 0]).astype(np.int64), 0, w - 1)
    v0 = np.clip(np.floor(uv[:, 1]).astype(np.int64), 0, h - 1)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    r = raster.astype(float)
    corners = np.stack([r[v0, u0], r[v0, u1], r[v1, u0], r[v1, u1]])
    return corners.max(axis=0) - corners.min(axis=0)


def colorize_scan(
    points_cam: np.ndarray,
    frame: ThermalFrame,
    intr: Intrinsics,
    radio: RadiometricModel,
    scan_id: int = 0,
    params: FusionParams = FusionParams(),
    normals: Optional[np.ndarray] = None,
    occluders=None,
):
    """Temperatures for camera-frame points; returns ``(fragment, report)``.

    The fragment stays in the camera frame. Points behind the camera, outside
    the image, hidden by the z-buffer or whose DN lies outside the radiometric
    range are dropped and counted.
    """
    if frame.dn.shape != (intr.height, intr.width):
        raise ConfigError(f"frame is {frame.dn.shape[1]}x{frame.dn.shape[0]}, intrinsics expect {intr.width}x{intr.height}")
    P = np.asarray(points_cam, dtype=float).reshape(-1, 3)
    rep = ColorizeReport(n_input=len(P))
    if len(P) == 0:
        return ThermalPointCloud.empty(), rep
    uv, front = project_points(P, intr, params.min_depth)
    inside = front & in_image(uv, intr)
    rep.behind = int(np.sum(~front))
    rep.outside = int(np.sum(front & ~inside))
    vis = occlusion_filter(P, intr, params, occluders)
    keep = inside & vis
    rep.occluded = int(np.sum(inside & ~vis))
    idx = np.flatnonzero(keep)
    if params.max_mixed_c is not None and len(idx):
        # a footprint straddling a thermal step blends two surfaces
        spread = footprint_spread(frame.dn, uv[idx])
        pure = spread <= params.max_mixed_c * dn_per_kelvin(radio)
        rep.mixed = int(np.sum(~pure))
        idx = idx[pure]
    dn = sample_bilinear(frame.dn, uv[idx])
    T = dn_to_temperature(dn, radio, strict=False)
    good = np.isfinite(T)
    rep.out_of_range = int(np.sum(~good))
    idx, T = idx[good], T[good]
    n_idx = estimate_normals(P, params.normal_neighbors, P[idx]) if normals is None else normals[idx]
    conf = incidence_confidence(P[idx], n_idx)
    rep.kept = len(idx)
    rep.kept_index = idx
    frag = ThermalPointCloud(P[idx], T - ZERO_CELSIUS, np.full(len(idx), scan_id), conf)
    return frag, rep


# -- accumulation ---------------------------------------------------------------------------


def voxel_merge(cloud: ThermalPointCloud, voxel: float) -> ThermalPointCloud:
    """One point per voxel: the one with the highest confidence (earliest on ties)."""
    if len(cloud) == 0:
        return cloud
    keys = voxel_keys(cloud.points, voxel)
    order = np.lexsort((np.arange(len(cloud)), -cloud.confidence))
    _, first = np.unique(keys[order], return_index=True)
    return cloud.subset(np.sort(order[first]))


def accumulate_map(fragments: Sequence[ThermalPointCloud], poses: Sequence[Optional[SE3]], voxel: Optional[float] = 0.05):
    """Rigidly move fragments to the global frame and merge; returns ``(cloud, skipped)``.

    A fragment without a pose is skipped (its index is reported) and the rest
    are still processed.
    """
    moved, skipped = [], []
    for i, frag in enumerate(fragments):
        T = poses[i] if i < len(poses) else None
        if T is None:
            log.error("fragment %d has no pose; skipped", i)
            skipped.append(i)
            continue
        moved.append(frag.transformed(T))
    cloud = ThermalPointCloud.concatenate(moved)
    if voxel is not None:
        cloud = voxel_merge(cloud, voxel)
    return cloud, skipped


# -- export ---------------------------------------------------------------------------------

_PLY_FIELDS = ("x", "y", "z", "temperature", "confidence")


def _columns(cloud: ThermalPointCloud) -> np.ndarray:
    return np.column_stack([cloud.points, cloud.temperature, cloud.confidence]).astype("<f4")


def write_ply(path, cloud: ThermalPointCloud, ascii: bool = False) -> None:
    data = _columns(cloud)
    fmt = "ascii" if ascii else "binary_little_endian"
    header = [f"ply", f"format {fmt} 1.0", f"element vertex {len(data)}"]
    header += [f"property float {name}" for name in _PLY_FIELDS]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if ascii:
            for row in data:
                fh.write((" ".join(f"{v:.9g}" for v in row) + "\n").encode("ascii"))
        else:
            fh.write(data.tobytes())


def read_ply(path) -> np.ndarray:
    """Vertex table ``(N, 5)`` of a file written by :func:`write_ply`."""
    raw = Path(path).read_bytes()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    header = raw[:end].decode("ascii").splitlines()
    n = int(next(h for h in header if h.startswith("element vertex")).split()[-1])
    props = [h.split()[-1] for h in header if h.startswith("property")]
    if tuple(props) != _PLY_FIELDS:
        raise ValueError(f"unexpected PLY properties {props}")
    if "format ascii 1.0" in header:
        body = raw[end:].decode("ascii").split()
        return np.array(body, dtype="<f4").reshape(n, len(props)).astype(float)
    return np.frombuffer(raw[end:], dtype="<f4", count=n * len(props)).reshape(n, len(props)).astype(float)


def write_csv(path, cloud: ThermalPointCloud) -> None:
    data = _columns(cloud)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(",".join(_PLY_FIELDS) + "\n")
        for row in data:
            fh.write(",".join(f"{v:.9g}" for v in row) + "\n")

"""On-disk stream formats, dataset layout and atomic output directories."""

from __future__ import annotations

import contextlib
import hashlib
import logging
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from filelock import FileLock
from scipy.spatial.transform import Rotation

from .data import ImuSample, LidarScan, ThermalFrame
from .errors import StreamError

log = logging.getLogger(__name__)

SCAN_RECORD = np.dtype([("t", "<f8"), ("ox", "<f8"), ("oy", "<f8"), ("oz", "<f8"), ("d", "<f8")])
MANIFEST = "manifest.txt"


# -- key=value ----------------------------------------------------------------------------


def parse_kv(text: str, source: str = "<text>") -> dict:
    """``key=value`` lines up to the first blank line; ``#`` starts a comment."""
    out = {}
    for i, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            break
        if line.startswith("#"):
            continue
        if "=" not in line:
            raise StreamError(f"{source}:{i}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def read_kv(path) -> dict:
    return parse_kv(Path(path).read_text(), str(path))


def format_kv(values: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in values.items())


def fmt_vec(v) -> str:
    return ",".join(repr(float(x)) for x in np.ravel(v))


def parse_vec(s: str, n: Optional[int] = None) -> np.ndarray:
    v = np.array([float(x) for x in s.split(",")])
    if n is not None and v.size != n:
        raise ValueError(f"expected {n} values, got {v.size}")
    return v


# -- IMU -------------------------------------------------------------------------------------

IMU_HEADER = "t,wx,wy,wz,ax,ay,az"


def write_imu_csv(path, samples: Iterable[ImuSample]) -> None:
    rows = [IMU_HEADER]
    for u in samples:
        rows.append(",".join(repr(float(x)) for x in (u.timestamp, *u.angular_rate, *u.specific_force)))
    Path(path).write_text("\n".join(rows) + "\n")


def read_imu_csv(path) -> list:
    """Parse the IMU stream; malformed rows raise :class:`StreamError` with the line number."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != IMU_HEADER:
        raise StreamError(f"{path}:1: expected header {IMU_HEADER!r}")
    out, last = [], -np.inf
    for i, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        try:
            v = [float(x) for x in line.split(",")]
        except ValueError:
            raise StreamError(f"{path}:{i}: non-numeric field in {line!r}") from None
        if len(v) != 7 or not np.all(np.isfinite(v)):
            raise StreamError(f"{path}:{i}: expected 7 finite values")
        if v[0] <= last:
            raise StreamError(f"{path}:{i}: timestamp {v[0]} not increasing")
        last = v[0]
        out.append(ImuSample(v[0], np.array(v[1:4]), np.array(v[4:7])))
    return out


# -- LiDAR scans -------------------------------------------------------------------------------


def write_scan_bin(path, scan: LidarScan) -> None:
    rec = np.empty(len(scan), dtype=SCAN_RECORD)
    rec["t"] = scan.times
    rec["ox"], rec["oy"], rec["oz"] = scan.directions.T
    rec["d"] = scan.depths
    Path(path).write_bytes(rec.tobytes())


def read_scan_bin(path, scan_id: int, t_start: float, t_end: float) -> LidarScan:
    """One scan of ``t_point,ox,oy,oz,d`` float64 records; corrupt data raises :class:`StreamError`."""
    raw = Path(path).read_bytes()
    if len(raw) % SCAN_RECORD.itemsize:
        raise StreamError(f"{path}: size {len(raw)} is not a whole number of records")
    rec = np.frombuffer(raw, dtype=SCAN_RECORD)
    dirs = np.column_stack([rec["ox"], rec["oy"], rec["oz"]])
    t, d = rec["t"].copy(), rec["d"].copy()
    bad = ~np.isfinite(t) | ~np.isfinite(d) | ~np.all(np.isfinite(dirs), axis=1)
    if np.any(bad):
        raise StreamError(f"{path}: record {int(np.argmax(bad))} is not finite")
    if np.any(d <= 0):
        raise StreamError(f"{path}: record {int(np.argmax(d <= 0))} has non-positive depth")
    if np.any(np.abs(np.linalg.norm(dirs, axis=1) - 1.0) > 1e-6):
        raise StreamError(f"{path}: direction vectors are not unit length")
    if np.any(t < t_start - 1e-9) or np.any(t > t_end + 1e-9):
        raise StreamError(f"{path}: point time outside [{t_start}, {t_end}]")
    return LidarScan(dirs, d, t, scan_id, t_start, t_end)


# -- thermal frames ------------------------------------------------------------------------------


def write_pgm16(path, dn: np.ndarray) -> None:
    """Binary 16-bit PGM (big-endian samples, as the format requires)."""
    a = np.asarray(dn)
    if a.ndim != 2 or a.min() < 0 or a.max() > 65535:
        raise ValueError("PGM16 needs a 2-D raster in [0, 65535]")
    head = f"P5\n{a.shape[1]} {a.shape[0]}\n65535\n".encode("ascii")
    Path(path).write_bytes(head + a.astype(">u2").tobytes())


def read_pgm16(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(raw) and not raw[end : end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5" or int(fields[3]) != 65535:
        raise StreamError(f"{path}: not a 16-bit binary PGM")
    w, h = int(fields[1]), int(fields[2])
    body = raw[pos + 1 :]
    if len(body) != 2 * w * h:
        raise StreamError(f"{path}: expected {2 * w * h} bytes of pixel data, found {len(body)}")
    return np.frombuffer(body, dtype=">u2").reshape(h, w).astype(np.uint16)


# -- point clouds and trajectories -----------------------------------------------------------------


def write_points_bin(path, points: np.ndarray) -> None:
    Path(path).write_bytes(np.ascontiguousarray(points, dtype="<f8").tobytes())


def read_points_bin(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) % 24:
        raise StreamError(f"{path}: size is not a multiple of 24 bytes")
    return np.frombuffer(raw, dtype="<f8").reshape(-1, 3).copy()


TRAJECTORY_HEADER = "t,qw,qx,qy,qz,px,py,pz"


def write_trajectory_csv(path, times, rotations, positions) -> None:
    rows = [TRAJECTORY_HEADER]
    if len(times):
        q = Rotation.from_matrix(np.asarray(rotations)).as_quat()  # x, y, z, w
        q[q[:, 3] < 0] *= -1.0
        for t, qq, p in zip(times, q, positions):
            vals = (t, qq[3], qq[0], qq[1], qq[2], *p)
            rows.append(",".join(f"{v:.9f}" for v in vals))
    Path(path).write_text("\n".join(rows) + "\n")


def read_trajectory_csv(path):
    """``(times, rotations, positions)`` from trajectory rows."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.size == 0:
        return np.zeros(0), np.zeros((0, 3, 3)), np.zeros((0, 3))
    R = Rotation.from_quat(data[:, [2, 3, 4, 1]]).as_matrix()
    return data[:, 0], R, data[:, 5:8]


# -- manifest and atomic directories ------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(root) -> Path:
    """``<sha256>  <relative path>`` for every file below ``root``, sorted by path."""
    root = Path(root)
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.name != MANIFEST)
    lines = [f"{sha256_file(p)}  {p.relative_to(root).as_posix()}" for p in files]
    out = root / MANIFEST
    out.write_text("\n".join(lines) + ("\n" if lines else ""))
    return out


def verify_manifest(root) -> list:
    """Relative paths whose checksum no longer matches (missing files included)."""
    root = Path(root)
    bad = []
    for line in (root / MANIFEST).read_text().splitlines():
        digest, rel = line.split("  ", 1)
        p = root / rel
        if not p.is_file() or sha256_file(p) != digest:
            bad.append(rel)
    return bad


@contextlib.contextmanager
def atomic_output_dir(target, merge: bool = False):
    """Yield a scratch directory that replaces ``target`` only if the block succeeds.

    The scratch directory sits next to ``target`` so the final rename stays on
    one filesystem; a lock file serializes concurrent writers of one target.
    With ``merge`` the scratch starts as a copy of the existing target, so
    files the block does not rewrite survive.
    """
    target = Path(target).resolve()
    target.parent.mkdir(parents=True, exist_ok=True)
    with FileLock(str(target) + ".lock"):
        tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
        try:
            if merge and target.is_dir():
                shutil.copytree(target, tmp, dirs_exist_ok=True)
            yield tmp
            write_manifest(tmp)
            os.chmod(tmp, 0o755)
            old = None
            if target.exists():
                old = target.parent / f".{target.name}.old"
                if old.exists():
                    shutil.rmtree(old)
                os.replace(target, old)
            os.replace(tmp, target)
            if old is not None:
                shutil.rmtree(old)
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise


# -- dataset layout ----------------------------------------------------------------------------------


@dataclass
class Dataset:
    root: Path
    imu: list
    scans: list
    frames: list
    skipped: list = field(default_factory=list)  # (scan_id, reason)
    rig: dict = field(default_factory=dict)
    ground_truth: Optional[dict] = None


def scan_filename(scan_id: int) -> str:
    return f"scan_{scan_id:05d}.bin"


def frame_filename(frame_id: int) -> str:
    return f"frame_{frame_id:05d}.pgm"


def write_streams(root, imu, scans, frames) -> None:
    root = Path(root)
    (root / "scans").mkdir(parents=True, exist_ok=True)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    write_imu_csv(root / "imu.csv", imu)
    rows = ["scan_id,t_start,t_end,file"]
    for s in scans:
        write_scan_bin(root / "scans" / scan_filename(s.scan_id), s)
        rows.append(f"{s.scan_id},{float(s.t_start)!r},{float(s.t_end)!r},{scan_filename(s.scan_id)}")
    (root / "scans" / "index.csv").write_text("\n".join(rows) + "\n")
    rows = ["frame_id,t,file"]
    for f in frames:
        write_pgm16(root / "frames" / frame_filename(f.frame_id), f.dn)
        rows.append(f"{f.frame_id},{float(f.timestamp)!r},{frame_filename(f.frame_id)}")
    (root / "frames" / "index.csv").write_text("\n".join(rows) + "\n")


def _read_index(path, n_fields: int) -> list:
    lines = Path(path).read_text().splitlines()
    out = []
    for i, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != n_fields:
            raise StreamError(f"{path}:{i}: expected {n_fields} fields")
        out.append((i, parts))
    return out


def load_dataset(root) -> Dataset:
    """Read every stream; a corrupt scan file is skipped and recorded, other errors abort."""
    root = Path(root)
    for rel in ("imu.csv", "scans/index.csv", "frames/index.csv", "rig.kv"):
        if not (root / rel).is_file():
            raise FileNotFoundError(f"dataset file missing: {root / rel}")
    imu = read_imu_csv(root / "imu.csv")
    scans, skipped = [], []
    for line, (sid, t0, t1, name) in _read_index(root / "scans" / "index.csv", 4):
        try:
            sid, t0, t1 = int(sid), float(t0), float(t1)
        except ValueError:
            raise StreamError(f"{root / 'scans/index.csv'}:{line}: malformed row") from None
        try:
            scans.append(read_scan_bin(root / "scans" / name, sid, t0, t1))
        except (StreamError, OSError) as exc:
            log.error("scan %d skipped: %s", sid, exc)
            # reason relative to the dataset root, so reports do not depend on where it lives
            skipped.append((sid, str(exc).replace(str(root / "scans") + os.sep, "scans/")))
    frames = []
    for line, (fid, t, name) in _read_index(root / "frames" / "index.csv", 3):
        try:
            fid, t = int(fid), float(t)
        except ValueError:
            raise StreamError(f"{root / 'frames/index.csv'}:{line}: malformed row") from None
        frames.append(ThermalFrame(read_pgm16(root / "frames" / name), t, fid))
    gt_path = root / "ground_truth.kv"
    gt = read_kv(gt_path) if gt_path.is_file() else None
    return Dataset(root, imu, scans, frames, skipped, read_kv(root / "rig.kv"), gt)

import numpy as np
import pytest

from thermoscan.data import ImuSample, LidarScan, ThermalFrame
from thermoscan.datasets import (
    atomic_output_dir,
    format_kv,
    load_dataset,
    parse_kv,
    read_imu_csv,
    read_pgm16,
    read_points_bin,
    read_scan_bin,
    read_trajectory_csv,
    verify_manifest,
    write_imu_csv,
    write_pgm16,
    write_points_bin,
    write_scan_bin,
    write_streams,
    write_trajectory_csv,
)
from thermoscan.errors import StreamError
from thermoscan.geometry import so3_exp


def test_kv_round_trip():
    vals = {"a": "1", "b.c": "x=y", "d": "1.5,2"}
    assert parse_kv(format_kv(vals)) == vals
    assert parse_kv("a=1\n\nhuman text without equals\n") == {"a": "1"}
    with pytest.raises(StreamError):
        parse_kv("nonsense\n")


def test_imu_round_trip_and_errors(tmp_path, rng):
    samples = [ImuSample(k * 0.005, rng.normal(size=3), rng.normal(size=3)) for k in range(20)]
    write_imu_csv(tmp_path / "imu.csv", samples)
    back = read_imu_csv(tmp_path / "imu.csv")
    for a, b in zip(samples, back):
        assert a.timestamp == b.timestamp and np.array_equal(a.angular_rate, b.angular_rate)
    text = (tmp_path / "imu.csv").read_text().splitlines()
    (tmp_path / "bad.csv").write_text("\n".join(text[:3] + [text[2]]) + "\n")
    with pytest.raises(StreamError, match=":4:"):
        read_imu_csv(tmp_path / "bad.csv")
    (tmp_path / "bad2.csv").write_text(text[0] + "\n0,1,2\n")
    with pytest.raises(StreamError):
        read_imu_csv(tmp_path / "bad2.csv")


def make_scan(rng, n=50, sid=3):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return LidarScan(d, rng.uniform(1, 10, n), np.sort(rng.uniform(0.3, 0.4, n)), sid, 0.3, 0.4)


def test_scan_round_trip_and_corruption(tmp_path, rng):
    s = make_scan(rng)
    write_scan_bin(tmp_path / "s.bin", s)
    back = read_scan_bin(tmp_path / "s.bin", 3, 0.3, 0.4)
    assert np.array_equal(back.points, s.points) and np.array_equal(back.times, s.times)
    raw = (tmp_path / "s.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-3])
    with pytest.raises(StreamError):
        read_scan_bin(tmp_path / "t.bin", 3, 0.3, 0.4)
    with pytest.raises(StreamError):
        read_scan_bin(tmp_path / "s.bin", 3, 0.35, 0.4)


def test_pgm_round_trip(tmp_path, rng):
    dn = rng.integers(0, 16384, (12, 17)).astype(np.uint16)
    write_pgm16(tmp_path / "f.pgm", dn)
    assert np.array_equal(read_pgm16(tmp_path / "f.pgm"), dn)
    (tmp_path / "g.pgm").write_bytes((tmp_path / "f.pgm").read_bytes()[:-1])
    with pytest.raises(StreamError):
        read_pgm16(tmp_path / "g.pgm")


def test_points_and_trajectory_round_trip(tmp_path, rng):
    P = rng.normal(size=(30, 3))
    write_points_bin(tmp_path / "p.bin", P)
    assert np.array_equal(read_points_bin(tmp_path / "p.bin"), P)
    R = np.array([so3_exp(rng.normal(size=3)) for _ in range(5)])
    t = np.arange(5) * 0.1
    p = rng.normal(size=(5, 3))
    write_trajectory_csv(tmp_path / "traj.csv", t, R, p)
    t2, R2, p2 = read_trajectory_csv(tmp_path / "traj.csv")
    assert np.allclose(t2, t) and np.allclose(R2, R, atol=1e-8) and np.allclose(p2, p, atol=1e-9)


def test_atomic_dir_and_manifest(tmp_path):
    target = tmp_path / "out"
    with atomic_output_dir(target) as d:
        (d / "a.txt").write_text("hello\n")
    assert (target / "a.txt").read_text() == "hello\n" and verify_manifest(target) == []
    with pytest.raises(RuntimeError):
        with atomic_output_dir(target) as d:
            (d / "b.txt").write_text("partial")
            raise RuntimeError("boom")
    # a failed block leaves the previous contents untouched
    assert not (target / "b.txt").exists() and (target / "a.txt").exists()
    with atomic_output_dir(target, merge=True) as d:
        (d / "c.txt").write_text("more\n")
    assert (target / "a.txt").exists() and (target / "c.txt").exists()
    (target / "a.txt").write_text("tampered\n")
    assert verify_manifest(target) == ["a.txt"]


def test_dataset_skips_corrupt_scan(tmp_path, rng):
    root = tmp_path / "ds"
    scans = [make_scan(rng, sid=k) for k in range(3)]
    for k, s in enumerate(scans):
        s.t_start, s.t_end = 0.3, 0.4
    frames = [ThermalFrame(np.zeros((4, 5), np.uint16), 0.35, 0)]
    imu = [ImuSample(k * 0.005, np.zeros(3), np.zeros(3)) for k in range(10)]
    write_streams(root, imu, scans, frames)
    (root / "rig.kv").write_text("image_width=5\n")
    raw = (root / "scans" / "scan_00001.bin").read_bytes()
    (root / "scans" / "scan_00001.bin").write_bytes(raw[:-3])
    ds = load_dataset(root)
    assert [s.scan_id for s in ds.scans] == [0, 2]
    assert ds.skipped[0][0] == 1 and str(tmp_path) not in ds.skipped[0][1]
    assert len(ds.frames) == 1 and len(ds.imu) == 10 and ds.ground_truth is None
    (root / "imu.csv").unlink()
    with pytest.raises(FileNotFoundError):
        load_dataset(root)

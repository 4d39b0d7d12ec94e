"""Command-line entry point: simulate, calibrate, run, report."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

from . import datasets as ds
from .camera import Intrinsics, calibrate_intrinsics, load_observations, save_observations
from .config import PipelineConfig, load_config
from .errors import (
    ConfigError,
    ConvergenceError,
    DegenerateGeometryError,
    InsufficientViewsError,
    SingularFitError,
    StreamError,
    ThermoscanError,
)
from .evaluation import absolute_trajectory_error, attitude_error_deg, surface_temperature
from .extrinsic import ExtrinsicPipelineParams, LidarNoiseParams, SolverOptions, calibrate_extrinsic, extrinsic_from_kv, extrinsic_to_kv
from .fusion import FusionParams, write_csv, write_ply
from .geometry import SE3, so3_exp
from .lio import FilterParams, NavState, update_params_for_noise
from .pipeline import Calibration, RunParams, run_pipeline
from .radiometry import (
    ZERO_CELSIUS,
    dn_to_temperature,
    fit_radiometric_model,
    load_calibration_points,
    model_from_kv,
    model_to_kv,
    save_calibration_points,
)
from . import simulator as sim

log = logging.getLogger("thermoscan")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_IO = 4

MODEL_FILES = ("radiometric.kv", "intrinsics.kv", "extrinsic.kv")


class SolverFailure(Exception):
    """A calibration finished without converging; its outputs are still written."""


# -- simulate -------------------------------------------------------------------------------------


def _scene(name: str):
    return sim.single_edge_scene() if name == "single_edge" else sim.default_scene()


def _calibration_pose(name: str) -> SE3:
    if name == "single_edge":
        return sim.look_at_pose([4.0, 4.0, 1.5], [0.0, 0.0, 1.5])
    return sim.default_calibration_pose()


def _perturb(T: SE3, rot_deg: float, trans: float, rng: np.random.Generator) -> SE3:
    a = rng.normal(size=3)
    b = rng.normal(size=3)
    w = np.radians(rot_deg) * a / np.linalg.norm(a)
    return SE3(so3_exp(w) @ T.rotation, T.translation + trans * b / np.linalg.norm(b))


def cmd_simulate(cfg: PipelineConfig, seed: int, out: Path) -> int:
    c = cfg.simulate
    streams = np.random.SeedSequence(seed).spawn(6)
    rng_scan, rng_imu, rng_frame, rng_bb, rng_board, rng_cal = (np.random.default_rng(s) for s in streams)
    noise = LidarNoiseParams(c.sigma_d, np.radians(c.sigma_omega_deg) ** 2 * np.eye(2))
    rig = sim.SensorRig(
        noise=noise,
        imu_noise=sim.REALISTIC_IMU if c.imu_noise else sim.ImuNoise(),
        points_per_scan=c.points_per_scan,
        read_noise_dn=c.read_noise_dn,
        supersample=c.supersample,
    )
    scene = _scene(c.scene)
    traj = sim.TrajectorySpec(duration=c.duration, imu_rate=c.imu_rate, scan_rate=c.scan_rate)
    log.info("simulating %.1f s: scans, IMU, frames", c.duration)
    scans = sim.simulate_scans(rig, scene, traj, rng_scan)
    imu = sim.simulate_imu(traj, rig.imu_noise, rng=rng_imu)
    frames = sim.simulate_frames(rig, scene, traj, rng_frame, c.frame_rate, c.frame_offset, c.supersample)
    with ds.atomic_output_dir(out) as root:
        ds.write_streams(root, imu, scans, frames)
        for sid in c.corrupt_scans:
            p = root / "scans" / ds.scan_filename(sid)
            if p.exists():
                # fault injection: a record cut short
                p.write_bytes(p.read_bytes()[:-3])
        calib = root / "calibration"
        calib.mkdir()
        bb = sim.simulate_blackbody_dataset(rig.radio, c.blackbody_temps, c.blackbody_noise_dn, rng_bb)
        save_calibration_points(calib / "blackbody.csv", bb)
        held = sim.simulate_blackbody_dataset(rig.radio, c.blackbody_holdout, c.blackbody_noise_dn, rng_bb)
        save_calibration_points(calib / "blackbody_holdout.csv", held)
        views, _ = sim.simulate_checkerboard_views(rig.intr, c.checkerboard_views, c.corner_noise_px, rng_board)
        save_observations(calib / "checkerboard.csv", views)
        cloud, frame, _ = sim.simulate_calibration_capture(
            rig, scene, _calibration_pose(c.scene), c.accumulation_window, rng_cal,
            c.scan_rate, c.calibration_supersample,
        )
        ds.write_points_bin(calib / "extrinsic_cloud.bin", cloud)
        ds.write_pgm16(calib / "extrinsic_frame.pgm", frame.dn)
        T0 = _perturb(rig.T_cam_lidar, c.initial_rot_deg, c.initial_trans, rng_cal)
        (calib / "extrinsic_initial.kv").write_text(extrinsic_to_kv(T0))
        (root / "rig.kv").write_text(ds.format_kv({
            "imu_lidar.rotation": ds.fmt_vec(rig.T_imu_lidar.rotation),
            "imu_lidar.translation": ds.fmt_vec(rig.T_imu_lidar.translation),
            "image_width": rig.intr.width,
            "image_height": rig.intr.height,
            "gravity": ds.fmt_vec(sim.GRAVITY),
        }))
        gt = root / "ground_truth"
        gt.mkdir()
        for s in scans:
            temps = surface_temperature(scene, s.true_points_world, s.plane_ids).astype("<f4")
            (gt / f"temperature_{s.scan_id:05d}.f32").write_bytes(temps.tobytes())
        t_end = np.array([s.t_end for s in scans])
        ds.write_trajectory_csv(gt / "trajectory.csv", t_end, traj.rotation(t_end), traj.position(t_end))
        kv = {"seed": seed, "scene": c.scene}
        kv.update({f"trajectory.{k}": v for k, v in sim.trajectory_to_kv(traj).items()})
        kv["cam_lidar.rotation"] = ds.fmt_vec(rig.T_cam_lidar.rotation)
        kv["cam_lidar.translation"] = ds.fmt_vec(rig.T_cam_lidar.translation)
        kv.update({f"intrinsics.{k}": v for k, v in ds.parse_kv(rig.intr.to_kv()).items()})
        kv.update({f"radiometric.{k}": v for k, v in ds.parse_kv(model_to_kv(rig.radio)).items()})
        kv["imu.gyro_bias"] = ds.fmt_vec(rig.imu_noise.gyro_bias)
        kv["imu.accel_bias"] = ds.fmt_vec(rig.imu_noise.accel_bias)
        (root / "ground_truth.kv").write_text(ds.format_kv(kv))
    print(f"dataset={out}\nscans={len(scans)}\nframes={len(frames)}\nimu_samples={len(imu)}")
    return EXIT_OK


# -- calibrate -------------------------------------------------------------------------------------


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise ConfigError(f"{what} not found: {path}")
    return path


def _dataset_dir(args, cfg: PipelineConfig) -> Path:
    d = args.dataset or cfg.paths.dataset
    if not d:
        raise ConfigError("no dataset given (use --dataset or [paths] dataset)")
    p = Path(d)
    if not p.is_dir():
        raise ConfigError(f"dataset directory not found: {p}")
    return p


def _calibrate_radiometric(cfg, data: Path, root: Path) -> list:
    pts = load_calibration_points(_require(data / "calibration" / "blackbody.csv", "blackbody data"))
    model, report = fit_radiometric_model(pts)
    lines = [report.to_kv().rstrip("\n")]
    worst = 0.0
    held_path = data / "calibration" / "blackbody_holdout.csv"
    if held_path.is_file():
        held = load_calibration_points(held_path)
        T = np.atleast_1d(dn_to_temperature([p.mean_dn for p in held], model, strict=False))
        for i, (p, t) in enumerate(zip(held, T)):
            err = float(t - p.temperature)
            worst = max(worst, abs(err))
            lines.append(f"holdout.{i}.reference_c={p.temperature - ZERO_CELSIUS:.4f}")
            lines.append(f"holdout.{i}.error_c={err:.6f}")
        lines.append(f"holdout_max_abs_error_c={worst:.6f}")
    (root / "radiometric.kv").write_text(model_to_kv(model))
    human = [f"Radiometric fit K={model.K:.6g} B={model.B:.6g} from {len(pts)} set points."]
    if held_path.is_file():
        ok = worst <= cfg.calibrate.max_holdout_error_c
        human.append(f"Held-out error {worst:.3f} C ({'within' if ok else 'outside'} {cfg.calibrate.max_holdout_error_c} C).")
    return lines + ["", *human]


def _calibrate_intrinsic(cfg, data: Path, root: Path) -> list:
    views = load_observations(_require(data / "calibration" / "checkerboard.csv", "checkerboard observations"))
    rig = ds.read_kv(_require(data / "rig.kv", "rig description"))
    size = (int(rig["image_width"]), int(rig["image_height"]))
    if len(views) < 3:
        raise InsufficientViewsError(f"{len(views)} checkerboard views given; capture at least 3 views at different tilts")
    intr, _, report = calibrate_intrinsics(views, size)
    (root / "intrinsics.kv").write_text(intr.to_kv())
    lines = [report.to_kv().rstrip("\n"), "", f"Intrinsics from {len(views)} views, reprojection RMS {report.rms:.3f} px."]
    if not report.converged:
        raise SolverFailure("\n".join(lines))
    return lines


def _calibrate_extrinsic(cfg, data: Path, root: Path, models: Path) -> list:
    c = cfg.calibrate
    intr_path = models / "intrinsics.kv"
    if not intr_path.is_file():
        intr_path = _require(root / "intrinsics.kv", "intrinsics model (run calibrate intrinsic first)")
    intr = Intrinsics.from_kv(ds.read_kv(intr_path))
    cloud = ds.read_points_bin(_require(data / "calibration" / "extrinsic_cloud.bin", "calibration cloud"))
    frame_dn = ds.read_pgm16(_require(data / "calibration" / "extrinsic_frame.pgm", "calibration frame"))
    T0 = extrinsic_from_kv(ds.read_kv(_require(data / "calibration" / "extrinsic_initial.kv", "initial extrinsic")))
    noise = LidarNoiseParams(c.sigma_d, np.radians(c.sigma_omega_deg) ** 2 * np.eye(2), c.pixel_sigma)
    params = ExtrinsicPipelineParams(
        canny_low=c.canny_low, canny_high=c.canny_high, canny_sigma=c.canny_sigma,
        solver=SolverOptions(max_iters=c.max_iters),
    )
    from .data import ThermalFrame

    sol = calibrate_extrinsic(cloud, ThermalFrame(frame_dn), T0, intr, noise, params)
    (root / "extrinsic.kv").write_text(sol.to_kv())
    lines = [
        f"correspondences={sol.n_correspondences}",
        f"iterations={sol.iterations}",
        f"final_cost={sol.final_cost:.9g}",
        f"converged={str(sol.converged).lower()}",
        "",
        f"Extrinsic solve {'converged' if sol.converged else 'did not converge'} after {sol.iterations} iterations "
        f"with {sol.n_correspondences} edge correspondences.",
    ]
    if not sol.converged:
        raise SolverFailure("\n".join(lines))
    return lines


def cmd_calibrate(cfg: PipelineConfig, args, out: Path) -> int:
    data = _dataset_dir(args, cfg)
    models = Path(args.models or cfg.paths.models or out)
    failure = None
    with ds.atomic_output_dir(out, merge=True) as root:
        try:
            if args.mode == "radiometric":
                lines = _calibrate_radiometric(cfg, data, root)
            elif args.mode == "intrinsic":
                lines = _calibrate_intrinsic(cfg, data, root)
            else:
                lines = _calibrate_extrinsic(cfg, data, root, models)
        except SolverFailure as exc:
            # keep the unconverged model for inspection; the exit status reports it
            failure = exc
            lines = str(exc).splitlines()
        (root / f"{args.mode}_report.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    if failure is not None:
        return EXIT_SOLVER
    return EXIT_OK


# -- run ---------------------------------------------------------------------------------------------


def _static_init(imu, gravity) -> NavState:
    """Level attitude from the mean specific force of the first 0.2 s, at rest at the origin."""
    t0 = imu[0].timestamp
    f = np.mean([u.specific_force for u in imu if u.timestamp <= t0 + 0.2], axis=0)
    R, _ = Rotation.align_vectors([-np.asarray(gravity)], [f])
    return NavState(R.as_matrix(), np.zeros(3), np.zeros(3), gravity=gravity)


def _gt_init(gt: dict, gravity) -> NavState:
    traj = sim.trajectory_from_kv({k[len("trajectory."):]: v for k, v in gt.items() if k.startswith("trajectory.")})
    return NavState(traj.rotation(0.0), traj.position(0.0), traj.velocity(0.0), gravity=gravity)


def cmd_run(cfg: PipelineConfig, args, out: Path) -> int:
    data = _dataset_dir(args, cfg)
    models = Path(args.models or cfg.paths.models or "")
    if not str(models) or not models.is_dir():
        raise ConfigError(f"models directory not found: {models or '(unset)'}")
    for name in MODEL_FILES:
        _require(models / name, f"{name.split('.')[0]} model")
    radio = model_from_kv(ds.read_kv(models / "radiometric.kv"))
    intr = Intrinsics.from_kv(ds.read_kv(models / "intrinsics.kv"))
    T_cl = extrinsic_from_kv(ds.read_kv(models / "extrinsic.kv"))
    r = cfg.run
    if r.init == "ground_truth" and not (data / "ground_truth.kv").is_file():
        raise ConfigError("run.init=ground_truth needs ground_truth.kv in the dataset")

    tic = time.perf_counter()
    dset = ds.load_dataset(data)
    load_s = time.perf_counter() - tic
    rig = dset.rig
    T_il = SE3(ds.parse_vec(rig["imu_lidar.rotation"], 9).reshape(3, 3), ds.parse_vec(rig["imu_lidar.translation"], 3))
    gravity = ds.parse_vec(rig.get("gravity", "0,0,-9.81"), 3)
    if not dset.imu:
        raise StreamError("IMU stream is empty")
    x0 = _gt_init(dset.ground_truth, gravity) if r.init == "ground_truth" else _static_init(dset.imu, gravity)
    params = RunParams(
        filter=FilterParams(
            update=update_params_for_noise(r.range_sigma), map_voxel=r.map_voxel, estimate_gravity=r.estimate_gravity,
        ),
        fusion=FusionParams(bin_px=r.bin_px, depth_gate=r.depth_gate, dilation=r.dilation, voxel=r.fusion_voxel or None),
        pairing_tolerance=r.pairing_tolerance,
    )
    calib = Calibration(intr, radio, T_cl, T_il)
    t0 = min([s.t_start for s in dset.scans], default=0.0)
    result = run_pipeline(dset.imu, dset.scans, dset.frames, calib, x0, params, t0=t0)
    skipped = sorted(dset.skipped + result.skipped)

    kv = {
        "scans_total": len(dset.scans) + len(dset.skipped),
        "scans_processed": len(result.records),
        "scans_skipped": len(skipped),
        "skipped_scan_ids": ",".join(str(s) for s, _ in skipped),
        "unpaired_scans": len(result.unpaired),
        "degraded_scans": sum(rec.result.report.degraded for rec in result.records),
        "mean_match_ratio": _fmt(np.mean([rec.result.report.match_ratio for rec in result.records]) if result.records else float("nan")),
        "mean_residual_rms_m": _fmt(np.nanmean([rec.result.report.residual_rms for rec in result.records[1:]]) if len(result.records) > 1 else float("nan")),
    }
    reps = [rec.colorize for rec in result.records if rec.colorize is not None]
    for key in ("kept", "occluded", "mixed", "outside", "out_of_range"):
        kv[f"colorize_{key}"] = sum(getattr(c, key) for c in reps)
    kv["fused_points"] = len(result.cloud)
    human = [f"Processed {len(result.records)} of {kv['scans_total']} scans; fused map holds {len(result.cloud)} points."]
    for sid, why in skipped:
        human.append(f"Skipped scan {sid}: {why}")
    gt_dir = data / "ground_truth"
    if dset.ground_truth is not None and (gt_dir / "trajectory.csv").is_file() and result.records:
        kv.update(_score_run(result, gt_dir))
        human.append(f"ATE {float(kv['ate_m']) * 100:.2f} cm, temperature RMSE {float(kv['temperature_rmse_c']):.3f} C.")

    with ds.atomic_output_dir(out) as root:
        ds.write_trajectory_csv(root / "trajectory.csv", result.times, result.rotations, result.positions)
        write_ply(root / "thermal_map.ply", result.cloud, ascii=r.ply_ascii)
        write_csv(root / "thermal_map.csv", result.cloud)
        (root / "run_report.txt").write_text(ds.format_kv(kv) + "\n" + "\n".join(human) + "\n")
    # wall-clock figures vary between runs, so they go to stdout only
    print(ds.format_kv(kv), end="")
    print(f"timing.load_s={load_s:.3f}")
    for k, v in result.stage_seconds.items():
        print(f"timing.{k}_s={v:.3f}")
    print(f"timing.mean_scan_ms={1000 * result.mean_scan_seconds:.2f}")
    print()
    print("\n".join(human))
    return EXIT_OK


def _fmt(x: float) -> str:
    return f"{float(x):.6g}"


def _score_run(result, gt_dir: Path) -> dict:
    t_gt, R_gt, p_gt = ds.read_trajectory_csv(gt_dir / "trajectory.csv")
    idx = np.searchsorted(t_gt, result.times - 1e-6)
    idx = np.clip(idx, 0, len(t_gt) - 1)
    ok = np.abs(t_gt[idx] - result.times) < 1e-6
    out = {}
    if np.any(ok):
        out["ate_m"] = _fmt(absolute_trajectory_error(result.positions[ok], p_gt[idx[ok]]))
        last = np.flatnonzero(ok)[-1]
        out["final_attitude_error_deg"] = _fmt(attitude_error_deg(result.rotations[last], R_gt[idx[last]]))
    errs = []
    for rec, frag in zip(result.records, result.fragments):
        if rec.colorize is None or len(frag) == 0:
            continue
        p = gt_dir / f"temperature_{rec.result.scan_id:05d}.f32"
        if not p.is_file():
            continue
        truth = np.frombuffer(p.read_bytes(), dtype="<f4").astype(float)
        errs.append(frag.temperature - truth[rec.colorize.kept_index])
    e = np.concatenate(errs) if errs else np.zeros(0)
    out["temperature_rmse_c"] = _fmt(np.sqrt(np.mean(e**2)) if len(e) else float("nan"))
    out["temperature_within_0.3c"] = _fmt(np.mean(np.abs(e) <= 0.3) if len(e) else float("nan"))
    return out


# -- report ------------------------------------------------------------------------------------------


def cmd_report(cfg: PipelineConfig, args, out: Optional[Path]) -> int:
    run_dir = Path(args.run or cfg.paths.run or "")
    report = _require(run_dir / "run_report.txt", "run report")
    bad = ds.verify_manifest(run_dir) if (run_dir / ds.MANIFEST).is_file() else ["manifest.txt"]
    text = report.read_text()
    kv = ds.parse_kv(text, str(report))
    kv["manifest_ok"] = str(not bad).lower()
    summary = ds.format_kv(kv) + "\n" + text.split("\n\n", 1)[-1]
    if bad:
        summary += "".join(f"Checksum mismatch: {b}\n" for b in bad)
    if out is not None:
        with ds.atomic_output_dir(out) as root:
            (root / "report.txt").write_text(summary)
    print(summary, end="")
    return EXIT_IO if bad else EXIT_OK


# -- entry point --------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    def common(parser, suppress):
        # accepted before or after the subcommand
        d = argparse.SUPPRESS if suppress else None
        parser.add_argument("--config", default=d, help="sectioned key=value configuration file")
        parser.add_argument("--seed", type=int, default=argparse.SUPPRESS if suppress else 0, help="random seed for simulation")
        parser.add_argument("--out", default=d, help="output directory (written atomically)")
        parser.add_argument("--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)

    p = argparse.ArgumentParser(prog="thermoscan", description="Thermal LiDAR-inertial mapping toolkit.")
    common(p, False)
    sub = p.add_subparsers(dest="command", required=True)
    common(sub.add_parser("simulate", help="generate a synthetic dataset with ground truth"), True)
    c = sub.add_parser("calibrate", help="fit a radiometric, intrinsic or extrinsic model")
    common(c, True)
    c.add_argument("mode", choices=("radiometric", "intrinsic", "extrinsic"))
    c.add_argument("--dataset")
    c.add_argument("--models", help="directory holding earlier calibration models")
    r = sub.add_parser("run", help="odometry and thermal fusion over a dataset")
    common(r, True)
    r.add_argument("--dataset")
    r.add_argument("--models")
    rp = sub.add_parser("report", help="print and verify a run report")
    common(rp, True)
    rp.add_argument("--run", help="run output directory")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = load_config(args.config)
        out = Path(args.out) if args.out else None
        if args.command != "report" and out is None:
            raise ConfigError("--out is required")
        if args.command == "simulate":
            return cmd_simulate(cfg, args.seed, out)
        if args.command == "calibrate":
            return cmd_calibrate(cfg, args, out)
        if args.command == "run":
            return cmd_run(cfg, args, out)
        return cmd_report(cfg, args, out)
    except (ConfigError, InsufficientViewsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DegenerateGeometryError, ConvergenceError, SingularFitError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (StreamError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ThermoscanError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from thermoscan.camera import (
    Intrinsics,
    PlanarObservation,
    _apply_step,
    _calib_jacobian,
    calibrate_intrinsics,
    distort,
    in_image,
    load_observations,
    pixel_rays,
    project,
    project_points,
    projection_jacobian,
    reprojection_residuals,
    save_observations,
    undistort,
)
from thermoscan.errors import BehindCameraError, DegenerateGeometryError, InsufficientViewsError, UndistortDivergence
from thermoscan.simulator import default_intrinsics, simulate_checkerboard_views

TYPICAL = (-0.2, 0.05, 0.001, -0.0005, 0.0)


def test_optical_axis_projects_to_principal_point():
    intr = Intrinsics(600, 610, 320, 256)
    assert np.allclose(project([0, 0, 1], intr), [320, 256])


def test_similar_triangles():
    intr = Intrinsics(600, 600, 320, 256)
    assert project([1, 0, 2], intr)[0] == pytest.approx(620.0)


def test_projection_matches_componentwise_model(rng):
    intr = Intrinsics(400, 410, 300, 250, 0.0, (-0.25, 0.07, 0.002, -0.001, 0.01))
    k1, k2, p1, p2, k3 = intr.dist
    for _ in range(50):
        P = rng.uniform([-1, -1, 1], [1, 1, 4])
        x, y = P[0] / P[2], P[1] / P[2]
        r2 = x * x + y * y
        rad = 1 + k1 * r2 + k2 * r2**2 + k3 * r2**3
        xd = x * rad + 2 * p1 * x * y + p2 * (r2 + 2 * x * x)
        yd = y * rad + p1 * (r2 + 2 * y * y) + 2 * p2 * x * y
        assert np.allclose(project(P, intr), [intr.fx * xd + intr.cx, intr.fy * yd + intr.cy], atol=1e-10)


def test_behind_camera_raises():
    with pytest.raises(BehindCameraError):
        project([0, 0, -1], Intrinsics(1, 1, 0, 0))
    uv, valid = project_points(np.array([[0, 0, -1.0], [0, 0, 1.0]]), Intrinsics(1, 1, 0, 0))
    assert list(valid) == [False, True] and np.isnan(uv[0]).all()


def test_distort_examples():
    assert np.array_equal(distort([0.3, -0.2], (0,) * 5), [0.3, -0.2])
    assert np.array_equal(distort([0.0, 0.0], (0.3, 0.1, 0.01, 0.02, 0.5)), [0.0, 0.0])
    out = distort([0.1, -0.05], (-0.2, 0, 0, 0, 0))
    assert out[0] == pytest.approx(0.1 * (1 - 0.2 * 0.0125), abs=1e-15)


def test_undistort_identity_and_round_trip(rng):
    p = rng.uniform(-0.5, 0.5, (200, 2))
    assert np.array_equal(undistort(p, (0,) * 5), p)
    xd = distort(p, TYPICAL)
    assert np.max(np.abs(distort(undistort(xd, TYPICAL), TYPICAL) - xd)) < 1e-8


def test_undistort_pathological_diverges():
    with pytest.raises(UndistortDivergence):
        undistort([0.5, 0.0], (-5.0, 0, 0, 0, 0))


@given(arrays(np.float64, 2, elements=st.floats(-0.9, 0.9)))
def test_undistort_property(xy):
    intr = default_intrinsics()
    xd = distort(xy, intr.dist)
    back = undistort(xd, intr.dist)
    assert np.max(np.abs(distort(back, intr.dist) - xd)) < 1e-8


def test_projection_jacobian_fd(rng):
    intr = default_intrinsics()
    for _ in range(20):
        P = rng.uniform([-1, -1, 1], [1, 1, 3])
        J = projection_jacobian(P, intr)[0]
        h = 1e-6
        fd = np.column_stack([(project(P + h * e, intr) - project(P - h * e, intr)) / (2 * h) for e in np.eye(3)])
        assert np.linalg.norm(fd - J) <= 1e-6 * np.linalg.norm(J)


def test_pixel_rays_reproject(rng):
    intr = default_intrinsics()
    uv = rng.uniform([0, 0], [639, 511], (100, 2))
    rays = pixel_rays(intr, uv)
    assert np.allclose(project(rays * 3.0, intr), uv, atol=1e-6)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        Intrinsics(-1, 1, 0, 0)
    with pytest.raises(ValueError):
        Intrinsics(1, 1, 700, 0, width=640, height=512)
    with pytest.raises(ValueError):
        Intrinsics(1, 1, 0, 0, dist=(0, 0))


def test_in_image_bounds():
    intr = Intrinsics(1, 1, 0, 0, width=10, height=5)
    uv = np.array([[-0.5, 0], [9.49, 4.49], [9.5, 0], [0, -0.6]])
    assert list(in_image(uv, intr)) == [True, True, False, False]


def test_noise_free_calibration_exact():
    intr0 = default_intrinsics()
    views, _ = simulate_checkerboard_views(intr0, 10, 0.0, np.random.default_rng(3))
    intr, poses, rep = calibrate_intrinsics(views, (640, 512))
    assert abs(intr.fx / intr0.fx - 1) < 1e-4 and abs(intr.fy / intr0.fy - 1) < 1e-4
    assert rep.rms < 1e-6 and rep.converged


def test_calibration_cost_monotone_and_improves():
    intr0 = default_intrinsics()
    views, _ = simulate_checkerboard_views(intr0, 10, 0.5, np.random.default_rng(5))
    intr, poses, rep = calibrate_intrinsics(views, (640, 512))
    assert np.all(np.diff(rep.cost_trace) <= 1e-12)
    assert rep.rms <= rep.initial_rms
    res = reprojection_residuals(views, intr, poses)
    assert np.sqrt(np.mean(np.sum(res**2, axis=1) / 2)) == pytest.approx(rep.rms, rel=1e-9)


def test_noisy_reprojection_rms_band():
    intr0 = default_intrinsics()
    rng = np.random.default_rng(9)
    for _ in range(20):
        views, _ = simulate_checkerboard_views(intr0, 10, 0.5, rng)
        _, _, rep = calibrate_intrinsics(views, (640, 512))
        assert 0.3 <= rep.rms <= 0.7


def _cost(views, intr, poses, step):
    i2, p2 = _apply_step(intr, poses, step, False)
    r = reprojection_residuals(views, i2, p2).ravel()
    return r @ r


def test_objective_gradient_at_optimum():
    intr0 = default_intrinsics()
    views, _ = simulate_checkerboard_views(intr0, 6, 0.5, np.random.default_rng(21))
    intr, poses, rep = calibrate_intrinsics(views, (640, 512))
    res, J = _calib_jacobian(views, intr, poses, False)
    g = 2 * J.T @ res
    n = J.shape[1]
    # parameter scales: pixels for K, unity for distortion and pose
    scale = np.ones(n)
    scale[:4] = [intr.fx, intr.fy, intr.cx, intr.cy]
    h = 1e-6 * scale
    fd = np.array([
        (_cost(views, intr, poses, h[i] * np.eye(n)[i]) - _cost(views, intr, poses, -h[i] * np.eye(n)[i])) / (2 * h[i])
        for i in range(n)
    ])
    assert np.linalg.norm(g * scale) / (res @ res) < 1e-6
    assert np.linalg.norm(fd * scale) / (res @ res) < 1e-4


def test_calibration_jacobian_matches_fd():
    intr0 = default_intrinsics()
    views, poses = simulate_checkerboard_views(intr0, 3, 0.0, np.random.default_rng(4))
    intr = Intrinsics(intr0.fx * 1.01, intr0.fy * 0.99, 322, 250, 0.0, (-0.1, 0.02, 0.0, 0.0, 0.0))
    res, J = _calib_jacobian(views, intr, poses, False)
    n = J.shape[1]
    for i in range(n):
        h = 1e-6 * (abs([intr.fx, intr.fy, intr.cx, intr.cy][i]) if i < 4 else 1.0)
        e = np.zeros(n)
        e[i] = h
        rp = reprojection_residuals(views, *_apply_step(intr, poses, e, False)).ravel()
        rm = reprojection_residuals(views, *_apply_step(intr, poses, -e, False)).ravel()
        fd = (rp - rm) / (2 * h)
        assert np.linalg.norm(fd - J[:, i]) <= 1e-4 * max(np.linalg.norm(J[:, i]), 1e-12)


def test_view_count_and_degeneracy_errors():
    intr0 = default_intrinsics()
    views, _ = simulate_checkerboard_views(intr0, 2, 0.0, np.random.default_rng(1))
    with pytest.raises(InsufficientViewsError):
        calibrate_intrinsics(views, (640, 512))
    flat, _ = simulate_checkerboard_views(intr0, 5, 0.0, np.random.default_rng(1), parallel=True)
    with pytest.raises(DegenerateGeometryError):
        calibrate_intrinsics(flat, (640, 512))


def test_observation_validation():
    with pytest.raises(ValueError):
        PlanarObservation(np.zeros((3, 2)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        PlanarObservation(np.column_stack([np.arange(5.0), np.zeros(5)]), np.zeros((5, 2)))


def test_observation_and_kv_io(tmp_path):
    intr0 = default_intrinsics()
    views, _ = simulate_checkerboard_views(intr0, 3, 0.5, np.random.default_rng(2))
    save_observations(tmp_path / "obs.csv", views)
    back = load_observations(tmp_path / "obs.csv")
    assert len(back) == 3 and np.allclose(back[1].image_points, views[1].image_points, atol=1e-8)
    vals = dict(line.split("=", 1) for line in intr0.to_kv().splitlines())
    assert Intrinsics.from_kv(vals) == intr0

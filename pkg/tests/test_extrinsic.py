import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from thermoscan.camera import Intrinsics, distort, project
from thermoscan.edges import CorrespondenceSet, EdgeCorrespondence
from thermoscan.errors import BehindCameraError, DegenerateGeometryError
from thermoscan.extrinsic import (
    CalibrationSolution,
    LidarNoiseParams,
    SolverOptions,
    extrinsic_error,
    extrinsic_from_kv,
    extrinsic_to_kv,
    point_covariance,
    point_covariance_batch,
    residual,
    residual_jacobians,
    residual_weights,
    solve_extrinsic,
)
from thermoscan.geometry import SE3, boxplus_s2, skew, so3_exp, tangent_basis
from thermoscan.simulator import default_camera_lidar_extrinsic, default_intrinsics

INTR = default_intrinsics()
T_TRUE = default_camera_lidar_extrinsic()


def random_corrs(rng, n, T=T_TRUE, intr=INTR, directions=None):
    """Correspondences consistent with ``T``: the image line passes through the projection."""
    Pc = np.column_stack([rng.uniform(-3, 3, n), rng.uniform(-2, 2, n), rng.uniform(3, 8, n)])
    P = T.inverse().apply(Pc)
    uv = project(Pc, intr)
    ang = rng.uniform(0, np.pi, n)
    normal = np.column_stack([np.cos(ang), np.sin(ang)])
    tangent = np.column_stack([-normal[:, 1], normal[:, 0]])
    q = uv + rng.uniform(-3, 3, (n, 1)) * tangent
    if directions is None:
        directions = rng.normal(size=(n, 3))
    directions = np.broadcast_to(directions, (n, 3)).astype(float)
    return CorrespondenceSet(P, q, normal, directions)


def test_covariance_range_only():
    w = np.array([0.6, 0.0, 0.8])
    C = point_covariance(w, 10.0, LidarNoiseParams(0.02, np.zeros((2, 2))))
    assert np.allclose(C, 0.02**2 * np.outer(w, w), atol=1e-18)


def test_covariance_bearing_only():
    w = np.array([0.0, 0.6, 0.8])
    s = 1e-3
    C = point_covariance(w, 20.0, LidarNoiseParams(0.0, s**2 * np.eye(2)))
    ev, V = np.linalg.eigh(C)
    assert np.allclose(ev, [0, (20 * s) ** 2, (20 * s) ** 2], atol=1e-15)
    assert abs(abs(V[:, 0] @ w) - 1) < 1e-9


def test_covariance_monte_carlo(rng):
    noise = LidarNoiseParams(0.02, np.radians(0.03) ** 2 * np.eye(2))
    w = rng.normal(size=3)
    w /= np.linalg.norm(w)
    d = 20.0
    n = 100_000
    dd = rng.normal(0, noise.sigma_d, n)
    dw = rng.multivariate_normal(np.zeros(2), noise.sigma_omega, n)
    A = np.column_stack([w, -d * skew(w) @ tangent_basis(w)])
    samples = np.column_stack([dd, dw]) @ A.T
    C = point_covariance(w, d, noise)
    assert np.linalg.norm(np.cov(samples.T) - C) / np.linalg.norm(C) < 0.05


@given(arrays(np.float64, 3, elements=st.floats(-1, 1)).filter(lambda v: np.linalg.norm(v) > 1e-3),
       st.floats(0.1, 100), st.floats(0, 0.1), st.floats(0, 1e-2))
def test_covariance_symmetric_psd(v, d, sd, so):
    C = point_covariance(v / np.linalg.norm(v), d, LidarNoiseParams(sd, so**2 * np.eye(2)))
    assert np.array_equal(C, C.T)
    assert np.linalg.eigvalsh(C).min() >= -1e-12


def test_batch_covariance_matches_single(rng):
    P = rng.normal(size=(20, 3)) * 5
    noise = LidarNoiseParams()
    B = point_covariance_batch(P, noise)
    for p, C in zip(P, B):
        d = np.linalg.norm(p)
        assert np.allclose(C, point_covariance(p / d, d, noise), atol=1e-18)


def test_noise_params_validation():
    with pytest.raises(ValueError):
        LidarNoiseParams(-0.1)
    with pytest.raises(ValueError):
        LidarNoiseParams(0.02, np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        LidarNoiseParams(0.02, -np.eye(2))
    with pytest.raises(ValueError):
        LidarNoiseParams(0.02, np.eye(2) * 1e-8, pixel_sigma=0.0)


def test_residual_examples(rng):
    P = np.array([0.5, -0.2, 4.0])
    uv = project(T_TRUE.apply(P), INTR)
    n = np.array([0.6, 0.8])
    on = EdgeCorrespondence(P, uv, n, np.array([0, 0, 1.0]))
    assert abs(residual(on, T_TRUE, INTR)) < 1e-9
    off = EdgeCorrespondence(P, uv - 2 * n, n, np.array([0, 0, 1.0]))
    assert residual(off, T_TRUE, INTR) == pytest.approx(2.0, abs=1e-9)
    corr = random_corrs(rng, 30)
    r, valid = residual(corr, SE3(so3_exp([0.01, 0.02, 0.0]), [0.01, 0, 0]) @ T_TRUE, INTR)
    T = SE3(so3_exp([0.01, 0.02, 0.0]), [0.01, 0, 0]) @ T_TRUE
    for i in range(len(corr)):
        Pc = T.apply(corr.lidar_points[i])
        xy = distort(Pc[:2] / Pc[2], INTR.dist)
        uv = np.array([INTR.fx * xy[0] + INTR.cx, INTR.fy * xy[1] + INTR.cy])
        assert r[i] == pytest.approx(corr.normals[i] @ (uv - corr.q_means[i]), abs=1e-9)


def test_residual_behind_camera():
    c = EdgeCorrespondence(np.array([0, 0, -1.0]), np.zeros(2), np.array([1.0, 0]), np.array([0, 0, 1.0]))
    with pytest.raises(BehindCameraError):
        residual(c, SE3(), INTR)
    r, valid = residual(CorrespondenceSet.from_records([c]), SE3(), INTR)
    assert not valid[0]


def _fd_jacobians(c, T, h=1e-6):
    JT = np.zeros(6)
    for i in range(6):
        e = np.zeros(6)
        e[i] = h
        JT[i] = (residual(c, T.boxplus(e), INTR) - residual(c, T.boxplus(-e), INTR)) / (2 * h)
    Jw = np.zeros(5)
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        cp = EdgeCorrespondence(c.lidar_point + e, c.q_mean, c.normal, c.lidar_edge_direction)
        cm = EdgeCorrespondence(c.lidar_point - e, c.q_mean, c.normal, c.lidar_edge_direction)
        Jw[i] = (residual(cp, T, INTR) - residual(cm, T, INTR)) / (2 * h)
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        # image noise enters as q + w_I
        cp = EdgeCorrespondence(c.lidar_point, c.q_mean + e, c.normal, c.lidar_edge_direction)
        cm = EdgeCorrespondence(c.lidar_point, c.q_mean - e, c.normal, c.lidar_edge_direction)
        Jw[3 + i] = (residual(cp, T, INTR) - residual(cm, T, INTR)) / (2 * h)
    return JT, Jw


def test_jacobians_match_finite_differences(rng):
    corr = random_corrs(rng, 100)
    T = SE3(so3_exp(rng.normal(size=3) * 0.02), rng.normal(size=3) * 0.02) @ T_TRUE
    for i in range(len(corr)):
        c = corr[i]
        JT, Jw, S = residual_jacobians(c, T, INTR, LidarNoiseParams())
        fT, fw = _fd_jacobians(c, T)
        assert np.linalg.norm(JT - fT) <= 1e-5 * np.linalg.norm(fT)
        assert np.linalg.norm(Jw - fw) <= 1e-5 * np.linalg.norm(fw)
        assert S.shape == (5, 5) and np.allclose(S[3:, 3:], 1.5**2 * np.eye(2))


def test_optical_axis_depth_jacobian_vanishes():
    intr = Intrinsics(500, 500, 320, 256)
    c = EdgeCorrespondence(np.array([0, 0, 5.0]), np.array([320, 256.0]), np.array([0.6, 0.8]), np.array([1.0, 0, 0]))
    JT, _, _ = residual_jacobians(c, SE3(), intr, LidarNoiseParams())
    assert abs(JT[5]) < 1e-15


def test_zero_distortion_reduces_to_pinhole(rng):
    intr = Intrinsics(500, 520, 320, 256)
    c = random_corrs(rng, 1, SE3(), intr)[0]
    JT, _, _ = residual_jacobians(c, SE3(), intr, LidarNoiseParams())
    X, Y, Z = c.lidar_point
    Dpi = np.array([[500 / Z, 0, -500 * X / Z**2], [0, 520 / Z, -520 * Y / Z**2]])
    nD = c.normal @ Dpi
    assert np.allclose(JT, np.concatenate([-nD @ skew(c.lidar_point), nD]), atol=1e-12)


def test_weights_are_inverse_variances(rng):
    corr = random_corrs(rng, 10)
    _, Jw, S = residual_jacobians(corr, T_TRUE, INTR, LidarNoiseParams())
    w = residual_weights(Jw, S)
    for i in range(10):
        assert w[i] == pytest.approx(1.0 / (Jw[i] @ S[i] @ Jw[i]))


def perturbed(T, rot_deg, trans, rng):
    a = rng.normal(size=3)
    b = rng.normal(size=3)
    return SE3(so3_exp(np.radians(rot_deg) * a / np.linalg.norm(a)), trans * b / np.linalg.norm(b)) @ T


def test_noise_free_recovery(rng):
    corr = random_corrs(rng, 200)
    sol = solve_extrinsic(corr, perturbed(T_TRUE, 3.0, 0.05, rng), INTR, LidarNoiseParams(), SolverOptions(huber_k=None))
    rot, tr = extrinsic_error(sol.extrinsic, T_TRUE)
    assert sol.converged
    assert np.max(np.abs(rot)) < 0.01 and np.max(np.abs(tr)) < 1e-3


def test_cost_non_increasing_without_rematch(rng):
    corr = random_corrs(rng, 200)
    # noisy image lines so the optimum cost is nonzero
    corr.q_means = corr.q_means + rng.normal(0, 1.0, corr.q_means.shape)
    sol = solve_extrinsic(corr, perturbed(T_TRUE, 2.0, 0.03, rng), INTR, LidarNoiseParams(), SolverOptions(huber_k=None))
    tr = np.array(sol.cost_trace)
    assert np.all(np.diff(tr) <= 1e-9 * tr[0])


def test_single_direction_is_degenerate(rng):
    corr = random_corrs(rng, 100, directions=np.array([0.0, 0.0, 1.0]))
    with pytest.raises(DegenerateGeometryError):
        solve_extrinsic(corr, T_TRUE, INTR)


def test_too_few_correspondences(rng):
    with pytest.raises(DegenerateGeometryError):
        solve_extrinsic(random_corrs(rng, 4), T_TRUE, INTR)


def test_rigid_invariance(rng):
    corr = random_corrs(rng, 150)
    T0 = perturbed(T_TRUE, 2.0, 0.03, rng)
    G = SE3(so3_exp([0.3, -0.5, 1.1]), [2.0, -1.0, 0.5])
    moved = CorrespondenceSet(G.apply(corr.lidar_points), corr.q_means, corr.normals, corr.directions @ G.rotation.T)
    a = solve_extrinsic(corr, T0, INTR)
    b = solve_extrinsic(moved, T0 @ G.inverse(), INTR)
    rot, tr = extrinsic_error(b.extrinsic @ G, a.extrinsic)
    assert np.max(np.abs(rot)) < 1e-6 and np.max(np.abs(tr)) < 1e-8


def noisy_corrs(rng, n, scale):
    """Correspondences whose LiDAR points and image lines carry scaled sensor noise."""
    noise = LidarNoiseParams().scaled(scale)
    corr = random_corrs(rng, n)
    P = corr.lidar_points
    d = np.linalg.norm(P, axis=1)
    w = P / d[:, None]
    dw = rng.multivariate_normal(np.zeros(2), noise.sigma_omega, n) if scale > 0 else np.zeros((n, 2))
    w2 = np.array([boxplus_s2(wi, di) for wi, di in zip(w, dw)])
    corr.lidar_points = w2 * (d + rng.normal(0, noise.sigma_d, n))[:, None]
    corr.q_means = corr.q_means + rng.normal(0, 1.5 * scale, (n, 2))
    return corr, noise


def test_error_shrinks_with_noise():
    med = []
    for scale in (1.0, 0.5, 0.25):
        rng = np.random.default_rng(99)
        errs = []
        for _ in range(20):
            corr, noise = noisy_corrs(rng, 60, scale)
            sol = solve_extrinsic(corr, perturbed(T_TRUE, 1.0, 0.02, rng), INTR, noise)
            rot, tr = extrinsic_error(sol.extrinsic, T_TRUE)
            errs.append(np.linalg.norm(rot))
        med.append(np.median(errs))
    assert med[0] > med[1] > med[2]


def test_kv_round_trip():
    T = perturbed(T_TRUE, 1.0, 0.01, np.random.default_rng(0))
    vals = dict(line.split("=", 1) for line in extrinsic_to_kv(T).splitlines())
    back = extrinsic_from_kv(vals)
    assert np.array_equal(back.rotation, T.rotation) and np.array_equal(back.translation, T.translation)
    sol = CalibrationSolution(T, 3, 0.5, True, n_correspondences=10)
    vals = dict(line.split("=", 1) for line in sol.to_kv().splitlines())
    assert vals["converged"] == "true" and vals["iterations"] == "3"
    with pytest.raises(ValueError):
        extrinsic_from_kv({"rotation": "1,0,0,0,1,0,0,0,2", "translation": "0,0,0"})

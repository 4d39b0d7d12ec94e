"""LiDAR point noise model, point-to-edge residual and noise-weighted SE(3) calibration."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .camera import Intrinsics, project_points, projection_jacobian
from .errors import BehindCameraError, DegenerateGeometryError
from .geometry import SE3, skew, skew_batch, so3_log, tangent_basis, tangent_basis_batch

log = logging.getLogger(__name__)

DEFAULT_SIGMA_OMEGA = np.radians(0.03) ** 2 * np.eye(2)


@dataclass(frozen=True)
class LidarNoiseParams:
    sigma_d: float = 0.02
    sigma_omega: np.ndarray = field(default_factory=lambda: DEFAULT_SIGMA_OMEGA.copy())
    pixel_sigma: float = 1.5

    def __post_init__(self):
        S = np.array(self.sigma_omega, dtype=float).reshape(2, 2)
        if not np.allclose(S, S.T, atol=1e-15):
            raise ValueError("sigma_omega must be symmetric")
        if np.linalg.eigvalsh(S).min() < -1e-15:
            raise ValueError("sigma_omega must be positive semi-definite")
        # zero ranging noise is accepted so the simulator can run noise-free
        if self.sigma_d < 0:
            raise ValueError("sigma_d must be non-negative")
        if not self.pixel_sigma > 0:
            raise ValueError("pixel_sigma must be positive")
        S.flags.writeable = False
        object.__setattr__(self, "sigma_omega", S)

    @classmethod
    def noiseless(cls, pixel_sigma: float = 1.5) -> "LidarNoiseParams":
        return cls(0.0, np.zeros((2, 2)), pixel_sigma)

    def scaled(self, factor: float) -> "LidarNoiseParams":
        return LidarNoiseParams(self.sigma_d * factor, self.sigma_omega * factor**2, self.pixel_sigma)


def point_covariance(omega, d: float, noise: LidarNoiseParams) -> np.ndarray:
    """3x3 covariance of a LiDAR point ``d * omega`` under range and bearing noise."""
    w = np.asarray(omega, dtype=float)
    if not d > 0:
        raise ValueError("range must be positive")
    A = np.column_stack([w, -d * skew(w) @ tangent_basis(w)])
    S = np.zeros((3, 3))
    S[0, 0] = noise.sigma_d**2
    S[1:, 1:] = noise.sigma_omega
    C = A @ S @ A.T
    return 0.5 * (C + C.T)


def point_covariance_batch(points: np.ndarray, noise: LidarNoiseParams) -> np.ndarray:
    """(N, 3, 3) covariances for LiDAR-frame points."""
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    d = np.linalg.norm(P, axis=1)
    if np.any(d <= 0):
        raise ValueError("range must be positive")
    w = P / d[:, None]
    T = -d[:, None, None] * skew_batch(w) @ tangent_basis_batch(w)
    C = noise.sigma_d**2 * np.einsum("ni,nj->nij", w, w)
    C += T @ noise.sigma_omega @ np.transpose(T, (0, 2, 1))
    return C


# -- residual and Jacobians ------------------------------------------------------------


def _as_arrays(corr):
    P = np.atleast_2d(np.asarray(corr.lidar_points if hasattr(corr, "lidar_points") else corr.lidar_point, float))
    q = np.atleast_2d(np.asarray(corr.q_means if hasattr(corr, "q_means") else corr.q_mean, float))
    n = np.atleast_2d(np.asarray(corr.normals if hasattr(corr, "normals") else corr.normal, float))
    return P, q, n


def residual(corr, T: SE3, intr: Intrinsics):
    """Signed pixel distance ``n . (proj(T P) - q)``.

    Accepts a single correspondence (returns a float, raising
    :class:`BehindCameraError` when the point is behind the camera) or a
    :class:`~thermoscan.edges.CorrespondenceSet` (returns ``(r, valid)``).
    """
    single = not hasattr(corr, "lidar_points")
    P, q, n = _as_arrays(corr)
    uv, valid = project_points(T.apply(P), intr)
    r = np.sum(n * (uv - q), axis=1)
    if single:
        if not valid[0]:
            raise BehindCameraError("correspondence projects behind the camera")
        return float(r[0])
    return r, valid


def residual_jacobians(corr, T: SE3, intr: Intrinsics, noise: LidarNoiseParams):
    """``(J_T, J_w, Sigma)`` for one correspondence or stacked for a set.

    ``J_T`` is with respect to the left perturbation ``[dtheta, dt]``;
    ``J_w`` acts on the stacked LiDAR point noise (3) and image noise (2);
    ``Sigma`` is their joint 5x5 covariance.
    """
    single = not hasattr(corr, "lidar_points")
    P, q, n = _as_arrays(corr)
    Pc = T.apply(P)
    if np.any(Pc[:, 2] <= 1e-6):
        raise BehindCameraError("correspondence projects behind the camera")
    D = projection_jacobian(Pc, intr)  # (N, 2, 3)
    nD = np.einsum("ni,nij->nj", n, D)  # (N, 3)
    J_T = np.concatenate([-np.einsum("nj,njk->nk", nD, skew_batch(Pc)), nD], axis=1)
    J_w = np.concatenate([nD @ T.rotation, -n], axis=1)
    Sigma = np.zeros((len(P), 5, 5))
    Sigma[:, :3, :3] = point_covariance_batch(P, noise)
    Sigma[:, 3:, 3:] = noise.pixel_sigma**2 * np.eye(2)
    if single:
        return J_T[0], J_w[0], Sigma[0]
    return J_T, J_w, Sigma


def residual_weights(J_w: np.ndarray, Sigma: np.ndarray) -> np.ndarray:
    """Scalar inverse variances ``1 / (J_w Sigma J_w^T)`` per residual."""
    var = np.einsum("ni,nij,nj->n", J_w, Sigma, J_w)
    return 1.0 / var


# -- solver ---------------------------------------------------------------------------------


@dataclass
class SolverOptions:
    max_iters: int = 50
    step_tol: float = 1e-8
    rematch_every: int = 5
    max_halvings: int = 8
    max_condition: float = 1e12
    min_correspondences: int = 6
    min_direction_spread_deg: float = 10.0
    # Huber threshold on noise-normalized residuals; None gives the plain quadratic cost
    huber_k: Optional[float] = 1.345
    # per-iteration step caps; re-matching then catches up with the estimate
    max_rotation_step: float = np.radians(1.0)
    max_translation_step: float = 0.02


@dataclass
class CalibrationSolution:
    extrinsic: SE3
    iterations: int
    final_cost: float
    converged: bool
    cost_trace: list = field(default_factory=list)
    n_correspondences: int = 0
    dropped: int = 0
    step_norms: list = field(default_factory=list)

    def to_kv(self) -> str:
        R = self.extrinsic.rotation
        t = self.extrinsic.translation
        lines = [
            "rotation=" + ",".join(repr(float(x)) for x in R.ravel()),
            "translation=" + ",".join(repr(float(x)) for x in t),
            f"converged={'true' if self.converged else 'false'}",
            f"iterations={self.iterations}",
            f"final_cost={float(self.final_cost)!r}",
            f"correspondences={self.n_correspondences}",
        ]
        return "\n".join(lines) + "\n"


def extrinsic_to_kv(T: SE3) -> str:
    return (
        "rotation=" + ",".join(repr(float(x)) for x in T.rotation.ravel()) + "\n"
        "translation=" + ",".join(repr(float(x)) for x in T.translation) + "\n"
    )


def extrinsic_from_kv(values: dict) -> SE3:
    R = np.array([float(x) for x in values["rotation"].split(",")])
    t = np.array([float(x) for x in values["translation"].split(",")])
    if R.size != 9 or t.size != 3:
        raise ValueError("extrinsic needs 9 rotation and 3 translation values")
    R = R.reshape(3, 3)
    if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
        raise ValueError("rotation block is not a proper rotation matrix")
    return SE3(R, t)


def _check_directions(corrs, opts: SolverOptions) -> None:
    if len(corrs) < opts.min_correspondences:
        raise DegenerateGeometryError(
            f"{len(corrs)} correspondences; at least {opts.min_correspondences} are needed"
        )
    d = np.asarray(corrs.directions, float)
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    # largest angle between any edge direction and the dominant one
    _, _, Vt = np.linalg.svd(d, full_matrices=False)
    spread = np.degrees(np.arccos(np.clip(np.abs(d @ Vt[0]), 0.0, 1.0))).max()
    if spread < opts.min_direction_spread_deg:
        raise DegenerateGeometryError(
            f"all matched edges share one direction (spread {spread:.2f} deg); "
            "multi-directional edges are required"
        )


def _robust(e2: np.ndarray, k):
    """Huber cost and IRLS weights for squared normalized residuals."""
    if k is None:
        return e2, np.ones_like(e2)
    e = np.sqrt(e2)
    inlier = e <= k
    cost = np.where(inlier, e2, 2.0 * k * e - k * k)
    h = np.where(inlier, 1.0, k / np.maximum(e, 1e-300))
    return cost, h


def _evaluate(corrs, T: SE3, intr, noise, k=None, weights=None):
    """Residuals and Jacobians at ``T``; ``weights`` (one per correspondence) overrides the noise weights."""
    r, valid = residual(corrs, T, intr)
    sub = corrs[np.nonzero(valid)[0]]
    J_T, J_w, Sigma = residual_jacobians(sub, T, intr, noise)
    w = residual_weights(J_w, Sigma) if weights is None else weights[valid]
    rv = r[valid]
    cost, h = _robust(w * rv**2, k)
    return sub, rv, J_T, w, h, float(np.sum(cost)), int((~valid).sum())


def _epoch_weights(corrs, T: SE3, intr, noise):
    r, valid = residual(corrs, T, intr)
    w = np.zeros(len(valid))
    if valid.any():
        sub = corrs[np.nonzero(valid)[0]]
        _, J_w, Sigma = residual_jacobians(sub, T, intr, noise)
        w[valid] = residual_weights(J_w, Sigma)
    return w


def _cost(corrs, T, intr, weights, k=None):
    r, valid = residual(corrs, T, intr)
    if not np.all(valid):
        return np.inf
    return float(np.sum(_robust(weights * r**2, k)[0]))


def solve_extrinsic(
    corrs,
    T0: SE3,
    intr: Intrinsics,
    noise: LidarNoiseParams = LidarNoiseParams(),
    opts: SolverOptions = SolverOptions(),
    rematch: Optional[Callable[[SE3], object]] = None,
) -> CalibrationSolution:
    """Noise-weighted Gauss-Newton on SE(3) with left-multiplicative updates.

    ``rematch(T)`` optionally recomputes correspondences for the current
    estimate; it is called every ``opts.rematch_every`` iterations.
    """
    T = T0
    _check_directions(corrs, opts)
    trace, steps = [], []
    converged = False
    dropped = 0
    it = 0
    cost = np.inf
    since_match = 0
    # noise weights are frozen for each matching epoch so the cost is non-increasing within it
    weights = _epoch_weights(corrs, T, intr, noise)
    for it in range(1, opts.max_iters + 1):
        if rematch is not None and since_match >= opts.rematch_every:
            corrs = rematch(T)
            _check_directions(corrs, opts)
            weights = _epoch_weights(corrs, T, intr, noise)
            since_match = 0
        since_match += 1
        sub, r, J, w, h, cost, dropped = _evaluate(corrs, T, intr, noise, opts.huber_k, weights)
        if len(sub) < opts.min_correspondences:
            raise DegenerateGeometryError("too few correspondences project in front of the camera")
        if not trace:
            trace.append(cost)
        wh = w * h
        H = J.T @ (wh[:, None] * J)
        g = J.T @ (wh * r)
        cond = np.linalg.cond(H)
        if not np.isfinite(cond) or cond > opts.max_condition:
            raise DegenerateGeometryError(f"normal matrix condition number {cond:.3g} exceeds {opts.max_condition:.0e}")
        delta = -np.linalg.solve(H, g)
        scale = max(
            np.linalg.norm(delta[:3]) / opts.max_rotation_step,
            np.linalg.norm(delta[3:]) / opts.max_translation_step,
            1.0,
        )
        delta = delta / scale
        # weights are held fixed within the step so the line search compares like with like
        accepted = False
        for _ in range(opts.max_halvings + 1):
            T_new = T.boxplus(delta)
            new_cost = _cost(sub, T_new, intr, w, opts.huber_k)
            if new_cost <= cost:
                accepted = True
                break
            delta = 0.5 * delta
        step = float(np.linalg.norm(delta)) if accepted else 0.0
        steps.append(step)
        if accepted:
            T = T_new
            cost = new_cost
        trace.append(cost)
        log.debug("extrinsic iter %d cost %.6g step %.3g n=%d", it, cost, step, len(sub))
        if step < opts.step_tol:
            # a stationary point only counts once fresh matches agree with it
            if rematch is None or since_match == 1:
                converged = True
                break
            since_match = opts.rematch_every
    *_, final_cost, dropped = _evaluate(corrs, T, intr, noise, opts.huber_k)
    if dropped:
        log.info("%d correspondences dropped behind the camera", dropped)
    return CalibrationSolution(T, it, final_cost, converged, trace, len(corrs), dropped, steps)


def extrinsic_error(T_est: SE3, T_true: SE3):
    """Per-axis rotation (degrees, rotation vector of ``R_true^T R_est``) and translation (m) errors."""
    rot = np.degrees(so3_log(T_true.rotation.T @ T_est.rotation))
    trans = T_est.translation - T_true.translation
    return rot, trans


@dataclass
class ExtrinsicPipelineParams:
    canny_low: float = 20.0
    canny_high: float = 40.0
    canny_sigma: float = 1.4
    solver: SolverOptions = field(default_factory=SolverOptions)
    # matching gate per re-matching epoch (px); the last value holds afterwards
    gate_schedule: tuple = (20.0, 10.0, 5.0, 3.0)


def calibrate_extrinsic(
    lidar_points: np.ndarray,
    frame,
    T0: SE3,
    intr: Intrinsics,
    noise: LidarNoiseParams = LidarNoiseParams(),
    params: ExtrinsicPipelineParams = ExtrinsicPipelineParams(),
    edge_params=None,
    match_params=None,
) -> CalibrationSolution:
    """Edge extraction on both sensors, matching and the weighted solve.

    ``lidar_points`` is the accumulated static cloud in the LiDAR frame.
    """
    from .edges import EdgeParams, MatchParams, extract_lidar_edges, extract_thermal_edges, match_edges

    edge_params = edge_params or EdgeParams()
    match_params = match_params or MatchParams()
    lidar_edges = extract_lidar_edges(lidar_points, edge_params)
    if not lidar_edges:
        raise DegenerateGeometryError("no depth-continuous LiDAR edges found")
    thermal = extract_thermal_edges(frame, params.canny_low, params.canny_high, params.canny_sigma)
    log.info("extrinsic: %d LiDAR edges, %d thermal edge pixels", len(lidar_edges), len(thermal))

    epoch = [0]

    def rematch(T):
        gate = params.gate_schedule[min(epoch[0], len(params.gate_schedule) - 1)]
        epoch[0] += 1
        return match_edges(lidar_edges, thermal, T, intr, replace(match_params, gate_px=min(gate, match_params.gate_px)))

    return solve_extrinsic(rematch(T0), T0, intr, noise, params.solver, rematch)

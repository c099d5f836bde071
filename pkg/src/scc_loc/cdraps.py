"""Pose estimation and consensus-driven candidate selection.

Per candidate: lift filtered 2D-2D matches to 2D-3D via the DSM, estimate an
initial pose with RANSAC over a planar-aware minimal solver, refine it with a
damped-Newton minimization carrying roll and pitch penalty terms, and bound
the positional uncertainty from the curvature of the residual landscape.

Across candidates: fuse retrieval similarity, inlier count, reprojection
error and uncertainty into a base reliability, reward spatially clustered
candidates through distance-decaying consensus votes, and pick the highest
total score.  Candidates that fail to converge, lack inliers, or have a
singular normal matrix are hard-gated out of every pool.

Local pose perturbations multiply on the right, ``T * exp(delta)`` with
``delta = (rot, trans)``; the translational tangent then maps to a world
position change through the rotation alone, so the trace of its covariance
block is exactly the positional variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    AllCandidatesGated,
    AllNoData,
    InsufficientCorrespondences,
    NoConsensus,
    SingularHessian,
)
from .geo import CameraModel, DsmRaster, PoseSE3, from_rt, sample_dsm_many
from .retrieval import TileGeometry
from .csatsf import MatchSet

_HESSIAN_COND_LIMIT = 1e12
_FD_STEP = 1e-6


@dataclass
class OptimConfig:
    lambda_roll: float = 1000.0
    lambda_pitch: float = 15.0
    ransac_iters: int = 300
    ransac_thresh_px: float = 2.0
    lm_max_iters: int = 60
    lm_tol: float = 1e-8
    min_inliers: int = 6
    weights: tuple[float, float, float, float] = (0.1, 0.2, 0.35, 0.35)
    d_max: float = 20.0
    tau: float = 0.3
    omega_geo: float = 0.2
    omega_base: float = 0.5
    seed: int = 0
    use_objective_error: bool = False

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < 0) or abs(float(w.sum()) - 1.0) > 1e-9:
            raise ValueError("reliability weights must be nonnegative and sum to 1")
        if self.d_max <= 0:
            raise ValueError("d_max must be positive")


@dataclass
class Lifted:
    """2D-3D correspondence set: query pixels paired with world points."""

    pq: np.ndarray
    points: np.ndarray
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.pq)


@dataclass
class PoseEstimate:
    pose: PoseSE3
    inliers: np.ndarray
    reproj_error: float
    uncertainty: float = math.inf
    cov_pos: np.ndarray | None = None
    converged: bool = False


@dataclass
class CandidateScore:
    """Per-candidate reliability ledger."""

    a_ret: float = 0.0
    n_in: int = 0
    e_err: float = math.inf
    u_unc: float = math.inf
    r_base: float = 0.0
    c_geo: float = 0.0
    r_total: float = 0.0
    location: tuple[float, float, float] | None = None
    valid: bool = False
    gate_reason: str = ""


def lift_to_3d(matches: MatchSet, crop: TileGeometry, dsm: DsmRaster) -> Lifted:
    """Map satellite pixels through the crop geometry and the DSM.

    Matches landing on nodata or outside the raster footprint are dropped
    and counted; an empty survivor set raises :class:`AllNoData`.
    """
    if len(matches) == 0:
        raise AllNoData("no matches to lift")
    xy = crop.pixel_to_world(matches.pdb)
    x_min, y_min, x_max, y_max = dsm.extent
    inside = (
        (xy[:, 0] >= x_min) & (xy[:, 0] <= x_max)
        & (xy[:, 1] >= y_min) & (xy[:, 1] <= y_max)
    )
    z = np.full(len(xy), np.nan)
    if inside.any():
        z[inside] = sample_dsm_many(dsm, xy[inside])
    ok = np.isfinite(z)
    if not ok.any():
        raise AllNoData("every lifted match fell on nodata or off the raster")
    points = np.concatenate([xy[ok], z[ok, None]], axis=1)
    return Lifted(pq=matches.pq[ok].copy(), points=points, dropped=int((~ok).sum()))


def _reproject(pose: PoseSE3, cam: CameraModel, points: np.ndarray):
    """Pixel predictions, per-point errors vs. nothing, and depth validity."""
    p_cam = (points - pose.translation) @ pose.rotation
    z = p_cam[:, 2]
    valid = z > 1e-9
    zs = np.where(valid, z, 1.0)
    u = cam.cx + cam.fx * p_cam[:, 0] / zs
    v = cam.cy + cam.fy * p_cam[:, 1] / zs
    return np.stack([u, v], axis=1), valid


def _reproj_errors(pose, cam, pq, points):
    uv, valid = _reproject(pose, cam, points)
    err = np.linalg.norm(uv - pq, axis=1)
    return np.where(valid, err, np.inf), valid


def _plane_frame(points: np.ndarray):
    """Best-fit plane through the points: origin and orthonormal (u, v, n)."""
    origin = points.mean(axis=0)
    centered = points - origin
    _, svals, vt = np.linalg.svd(centered, full_matrices=True)
    return origin, vt[0], vt[1], vt[2], svals


def _pose_from_plane_homography(
    pq: np.ndarray, points: np.ndarray, cam: CameraModel
) -> PoseSE3 | None:
    """Pose hypothesis from >= 4 near-coplanar 2D-3D correspondences.

    Fits a plane to the world points, estimates the plane-to-image homography
    in normalized camera coordinates, and factors it into rotation and
    camera center.  Returns None for degenerate configurations.
    """
    n = len(pq)
    if n < 4:
        return None
    origin, u_ax, v_ax, n_ax, svals = _plane_frame(points)
    if svals[1] < 1e-9:  # points collinear in the world
        return None
    centered = points - origin
    s = centered @ u_ax
    t = centered @ v_ax

    xn = (pq[:, 0] - cam.cx) / cam.fx
    yn = (pq[:, 1] - cam.cy) / cam.fy

    # Hartley-style conditioning of both planes
    def _normalizer(a: np.ndarray, b: np.ndarray):
        ca, cb = a.mean(), b.mean()
        scale = np.sqrt(2.0) / max(np.hypot(a - ca, b - cb).mean(), 1e-12)
        T = np.array([[scale, 0, -scale * ca], [0, scale, -scale * cb], [0, 0, 1.0]])
        return T, (a - ca) * scale, (b - cb) * scale

    Tp, s_n, t_n = _normalizer(s, t)
    Ti, x_n, y_n = _normalizer(xn, yn)

    A = np.zeros((2 * n, 9))
    A[0::2, 0] = s_n
    A[0::2, 1] = t_n
    A[0::2, 2] = 1.0
    A[0::2, 6] = -x_n * s_n
    A[0::2, 7] = -x_n * t_n
    A[0::2, 8] = -x_n
    A[1::2, 3] = s_n
    A[1::2, 4] = t_n
    A[1::2, 5] = 1.0
    A[1::2, 6] = -y_n * s_n
    A[1::2, 7] = -y_n * t_n
    A[1::2, 8] = -y_n
    try:
        _, svA, vtA = np.linalg.svd(A)
    except np.linalg.LinAlgError:
        return None
    if svA[-2] < 1e-9 * max(svA[0], 1.0):  # nullspace not one-dimensional
        return None
    H = np.linalg.inv(Ti) @ vtA[-1].reshape(3, 3) @ Tp

    w = H[2, 0] * s + H[2, 1] * t + H[2, 2]
    if np.sum(w > 0) < np.sum(w < 0):
        H = -H
    c1, c2 = H[:, 0], H[:, 1]
    scale = math.sqrt(max(np.linalg.norm(c1) * np.linalg.norm(c2), 1e-300))
    if scale < 1e-12:
        return None
    M = H / scale
    C = np.stack([M[:, 0], M[:, 1], np.cross(M[:, 0], M[:, 1])], axis=1)
    U, _, Vt = np.linalg.svd(C)
    R_cw_plane = U @ np.diag([1.0, 1.0, float(np.linalg.det(U @ Vt))]) @ Vt
    basis = np.stack([u_ax, v_ax, np.cross(u_ax, v_ax)], axis=1)
    R_cw = R_cw_plane @ basis.T
    t_wc = origin - R_cw.T @ M[:, 2]
    return from_rt(R_cw.T, t_wc)


def initial_pnp(lifted: Lifted, cam: CameraModel, cfg: OptimConfig) -> PoseEstimate:
    """RANSAC pose initialization with a deterministic seeded sampler.

    The winning minimal hypothesis is refit algebraically on its inliers (an
    overdetermined homography, no iterative polish) and the inlier set
    recounted under the refit pose.  Raises
    :class:`InsufficientCorrespondences` below 4 points and
    :class:`NoConsensus` when the best support stays under ``min_inliers``.
    """
    n = len(lifted)
    if n < 4:
        raise InsufficientCorrespondences(f"{n} correspondences, need >= 4")
    rng = np.random.default_rng(cfg.seed)
    pq, points = lifted.pq, lifted.points
    best_inliers: np.ndarray | None = None
    best_key = (-1, math.inf)
    needed = cfg.ransac_iters
    it = 0
    while it < min(needed, cfg.ransac_iters):
        it += 1
        sample = rng.choice(n, size=4, replace=False)
        pose = _pose_from_plane_homography(pq[sample], points[sample], cam)
        if pose is None:
            continue
        err, _ = _reproj_errors(pose, cam, pq, points)
        inl = err < cfg.ransac_thresh_px
        count = int(inl.sum())
        if count < 4:
            continue
        rms = float(np.sqrt(np.mean(err[inl] ** 2)))
        if count > best_key[0] or (count == best_key[0] and rms < best_key[1]):
            best_key = (count, rms)
            best_inliers = np.flatnonzero(inl)
            best_pose = pose
            # adaptive stopping: iterations to hit 99.99% confidence of one
            # all-inlier sample, floored to keep the search honest
            w = count / n
            denom = math.log(max(1.0 - w**4, 1e-12))
            needed = max(20, int(math.ceil(math.log(1e-4) / denom)))
    if best_inliers is None or best_key[0] < max(4, cfg.min_inliers):
        raise NoConsensus(
            f"best support {max(best_key[0], 0)} below min_inliers {cfg.min_inliers}"
        )

    refit = _pose_from_plane_homography(pq[best_inliers], points[best_inliers], cam)
    pose = best_pose
    inliers = best_inliers
    if refit is not None:
        err, _ = _reproj_errors(refit, cam, pq, points)
        inl = err < cfg.ransac_thresh_px
        if int(inl.sum()) >= len(best_inliers):
            pose = refit
            inliers = np.flatnonzero(inl)
    err, _ = _reproj_errors(pose, cam, pq, points)
    rms = float(np.sqrt(np.mean(err[inliers] ** 2)))
    return PoseEstimate(pose=pose, inliers=inliers, reproj_error=rms)


def _pitch_raw(rotation: np.ndarray) -> float:
    return math.asin(max(-1.0, min(1.0, -float(rotation[2, 0]))))


def _residuals(pose: PoseSE3, cam: CameraModel, pq, points, cfg: OptimConfig) -> np.ndarray:
    uv, valid = _reproject(pose, cam, points)
    rr = (pq - uv).reshape(-1)
    # points drifting behind the camera get a large fixed residual so the
    # step search backs away rather than crashing
    rr = np.where(np.repeat(valid, 2), rr, 1e6)
    roll_res = math.sqrt(cfg.lambda_roll) * float(pose.rotation[2, 0])
    pitch_res = math.sqrt(cfg.lambda_pitch) * (
        _pitch_raw(pose.rotation) - cam.pitch_prior
    )
    return np.concatenate([rr, [roll_res, pitch_res]])


def _jacobian(pose: PoseSE3, cam: CameraModel, pq, points, cfg: OptimConfig) -> np.ndarray:
    """Stacked residual Jacobian w.r.t. the right perturbation.

    Reprojection rows are analytic; the two penalty rows use forward finite
    differences on the perturbation coordinates.
    """
    n = len(points)
    p_cam = (points - pose.translation) @ pose.rotation
    z = np.maximum(p_cam[:, 2], 1e-9)
    J = np.zeros((2 * n + 2, 6))
    # d(pixel)/d(camera point)
    du = np.stack(
        [cam.fx / z, np.zeros(n), -cam.fx * p_cam[:, 0] / z**2], axis=1
    )
    dv = np.stack(
        [np.zeros(n), cam.fy / z, -cam.fy * p_cam[:, 1] / z**2], axis=1
    )
    # d(camera point)/d(delta): [P_c]_x for rotation, -I for translation
    px = np.zeros((n, 3, 3))
    px[:, 0, 1] = -p_cam[:, 2]
    px[:, 0, 2] = p_cam[:, 1]
    px[:, 1, 0] = p_cam[:, 2]
    px[:, 1, 2] = -p_cam[:, 0]
    px[:, 2, 0] = -p_cam[:, 1]
    px[:, 2, 1] = p_cam[:, 0]
    dP = np.concatenate([px, np.broadcast_to(-np.eye(3), (n, 3, 3))], axis=2)
    J[0 : 2 * n : 2] = -np.einsum("nk,nkj->nj", du, dP)
    J[1 : 2 * n : 2] = -np.einsum("nk,nkj->nj", dv, dP)

    base = _residuals(pose, cam, pq, points, cfg)[-2:]
    for k in range(6):
        step = np.zeros(6)
        step[k] = _FD_STEP
        pert = _residuals(pose.compose_right(step), cam, pq, points, cfg)[-2:]
        J[-2:, k] = (pert - base) / _FD_STEP
    return J


def refine_pose(
    init: PoseEstimate, lifted: Lifted, cam: CameraModel, cfg: OptimConfig
) -> PoseEstimate:
    """Damped-Newton minimization of reprojection plus attitude penalties.

    Operates on the inlier subset fixed by the initial estimate.  Terminates
    when the accepted step norm drops below ``lm_tol`` (converged) or after
    ``lm_max_iters`` iterations (flagged unconverged, gated out later).
    """
    inl = init.inliers
    pq, points = lifted.pq[inl], lifted.points[inl]
    pose = init.pose
    r = _residuals(pose, cam, pq, points, cfg)
    cost = float(r @ r)
    damping = 1e-6
    converged = False
    g = None
    for _ in range(cfg.lm_max_iters):
        J = _jacobian(pose, cam, pq, points, cfg)
        g = J.T @ r
        H = J.T @ J
        accepted = False
        cost_prev = cost
        delta = None
        for _ in range(12):
            try:
                delta = np.linalg.solve(H + damping * np.eye(6), -g)
            except np.linalg.LinAlgError:
                damping *= 10.0
                continue
            trial = pose.compose_right(delta)
            r_trial = _residuals(trial, cam, pq, points, cfg)
            cost_trial = float(r_trial @ r_trial)
            if cost_trial <= cost:
                pose, r, cost = trial, r_trial, cost_trial
                damping = max(damping / 3.0, 1e-12)
                accepted = True
                break
            damping *= 4.0
        if not accepted:
            # heavily damped steps this small mean the cost sits at its
            # numerical floor; that is a converged stationary point
            if delta is not None and float(np.linalg.norm(delta)) < max(cfg.lm_tol, 1e-7):
                converged = True
            break
        if float(np.linalg.norm(delta)) < cfg.lm_tol:
            converged = True
            break
        if cost_prev - cost <= 1e-14 * max(cost, 1.0):
            converged = True  # cost at its numerical floor
            break
    if not converged and g is not None:
        if float(np.linalg.norm(g)) <= 1e-7 * max(1.0, math.sqrt(cost)):
            converged = True
    err, _ = _reproj_errors(pose, cam, pq, points)
    if cfg.use_objective_error:
        e_err = cost
    else:
        e_err = float(np.sqrt(np.mean(err**2)))
    return PoseEstimate(
        pose=pose, inliers=inl, reproj_error=e_err, converged=converged
    )


def pose_uncertainty(
    refined: PoseEstimate, lifted: Lifted, cam: CameraModel, cfg: OptimConfig
) -> tuple[float, np.ndarray]:
    """Positional standard deviation from the curvature at the optimum.

    The Gauss-Newton information matrix is inverted and scaled by the
    posterior residual variance; the translational 3x3 block's trace gives
    the squared positional uncertainty.  Raises :class:`SingularHessian`
    when the normal matrix conditions worse than 1e12.
    """
    inl = refined.inliers
    pq, points = lifted.pq[inl], lifted.points[inl]
    r = _residuals(refined.pose, cam, pq, points, cfg)
    J = _jacobian(refined.pose, cam, pq, points, cfg)
    H = J.T @ J
    cond = float(np.linalg.cond(H))
    if not math.isfinite(cond) or cond > _HESSIAN_COND_LIMIT:
        raise SingularHessian(f"normal matrix condition {cond:.3e} exceeds 1e12")
    m = len(r)
    sigma2 = float(r @ r) / max(1, m - 6)
    cov = sigma2 * np.linalg.inv(H)
    cov_pos = cov[3:6, 3:6]
    u_unc = float(np.sqrt(max(np.trace(cov_pos), 0.0)))
    return u_unc, cov_pos


def _minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi - lo < 1e-12:
        return np.full(len(values), 0.5)
    return (values - lo) / (hi - lo)


def base_reliability(
    candidates: list[CandidateScore], cfg: OptimConfig
) -> list[CandidateScore]:
    """Min-max normalize the four metrics over valid candidates and fuse.

    Error-like metrics invert after normalization so that higher always
    means more reliable.  Invalid candidates keep a zero base score and
    never enter the normalization pool.
    """
    valid_idx = [i for i, c in enumerate(candidates) if c.valid]
    if not valid_idx:
        return candidates
    a = _minmax(np.array([candidates[i].a_ret for i in valid_idx], dtype=float))
    nn = _minmax(np.array([candidates[i].n_in for i in valid_idx], dtype=float))
    e = 1.0 - _minmax(np.array([candidates[i].e_err for i in valid_idx], dtype=float))
    u = 1.0 - _minmax(np.array([candidates[i].u_unc for i in valid_idx], dtype=float))
    w1, w2, w3, w4 = cfg.weights
    for j, i in enumerate(valid_idx):
        candidates[i].r_base = float(w1 * a[j] + w2 * nn[j] + w3 * e[j] + w4 * u[j])
    return candidates


def geo_consensus(
    candidates: list[CandidateScore], cfg: OptimConfig
) -> list[CandidateScore]:
    """Distance-decaying votes from nearby reliable candidates.

    Only valid neighbors within ``d_max`` whose base score clears ``tau``
    contribute; the reward is capped at ``omega_base`` times the candidate's
    own base score.
    """
    valid = [c for c in candidates if c.valid]
    for c in valid:
        if c.location is None:
            continue
        vote = 0.0
        for other in valid:
            if other is c or other.location is None:
                continue
            dist = math.hypot(
                c.location[0] - other.location[0], c.location[1] - other.location[1]
            )
            if dist <= cfg.d_max and other.r_base >= cfg.tau:
                vote += other.r_base * (1.0 - dist / cfg.d_max)
        c.c_geo = vote
        c.r_total = c.r_base + min(cfg.omega_geo * vote, cfg.omega_base * c.r_base)
    return candidates


def select_position(candidates: list[CandidateScore]) -> tuple[float, float]:
    """Horizontal position of the highest-total-reliability candidate.

    Ties break to the smaller uncertainty, then the lower candidate index.
    Raises :class:`AllCandidatesGated` when nothing survived gating.
    """
    best = None
    for idx, c in enumerate(candidates):
        if not c.valid or c.location is None:
            continue
        key = (-c.r_total, c.u_unc, idx)
        if best is None or key < best[0]:
            best = (key, c)
    if best is None:
        raise AllCandidatesGated("no valid candidate to select from")
    loc = best[1].location
    return (loc[0], loc[1])

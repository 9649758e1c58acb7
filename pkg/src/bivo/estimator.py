"""Frame-to-frame motion estimation from quad matches.

The motion between two stereo frames minimizes the stereo reprojection
error of triangulated landmarks, wrapped in RANSAC for outlier rejection.
Estimation runs in either temporal direction over the same quad-match
list: forward triangulates the previous pair and projects into the
current one, backward swaps the roles. The two directions are fused by a
rotation-geodesic midpoint and a translation mean.

Pose convention: an estimated pose maps previous-frame coordinates into
current-frame coordinates. accumulate therefore composes each new
camera-in-world pose with the inverse of the step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .features import QuadMatch, match_arrays
from .geometry import (
    DegenerateFusionError,
    Pose,
    StereoRig,
    compose,
    fuse_motions,
    inverse,
    so3_exp,
    triangulate_masked,
)
from .metrics import Trajectory

BEHIND_CAMERA_RESIDUAL = 1e6
BACKWARD_SEED_XOR = 0x9E3779B9
_RANSAC_CONFIDENCE = 0.999
_MAX_CONDITION = 1e12


class EstimationFailedError(RuntimeError):
    """Too few matches or no consensus; the caller substitutes identity."""


@dataclass(frozen=True)
class EstimatorConfig:
    ransac_iterations: int = 200
    inlier_threshold: float = 2.0      # px, per-camera residual norm
    gn_max_iterations: int = 20
    gn_step_tolerance: float = 1e-9
    min_matches: int = 6
    rng_seed: int = 0

    def __post_init__(self):
        if self.ransac_iterations < 1 or self.gn_max_iterations < 1 or self.min_matches < 1:
            raise ValueError("iteration and match counts must be >= 1")
        if self.inlier_threshold <= 0.0 or self.gn_step_tolerance <= 0.0:
            raise ValueError("thresholds must be positive")


@dataclass
class MotionEstimate:
    """A fitted motion with its supporting evidence.

    inliers indexes into the quad-match list the estimate was built from;
    rms_residual is the root mean square of the reprojection residual
    components over those inliers only.
    """

    pose: Pose
    inliers: np.ndarray
    rms_residual: float
    iterations: int
    converged: bool


@dataclass
class JointEstimate:
    forward: MotionEstimate | None
    backward: MotionEstimate | None
    fused: Pose
    fusion_degenerate: bool


def _projection_residuals(rig, rotation, translation, landmarks, observed_left, observed_right):
    """(N, 4) residual rows [left du, left dv, right du, right dv] + validity."""
    p = landmarks @ rotation.T + translation
    z = p[:, 2]
    valid = z > 1e-9
    safe_z = np.where(valid, z, 1.0)
    cu, cv = rig.principal_point
    u_left = rig.focal * p[:, 0] / safe_z + cu
    v = rig.focal * p[:, 1] / safe_z + cv
    u_right = u_left - rig.focal * rig.baseline / safe_z
    res = np.empty((len(p), 4))
    res[:, 0] = observed_left[:, 0] - u_left
    res[:, 1] = observed_left[:, 1] - v
    res[:, 2] = observed_right[:, 0] - u_right
    res[:, 3] = observed_right[:, 1] - v
    res[~valid] = BEHIND_CAMERA_RESIDUAL
    return res, valid


def reprojection_residuals(
    rig: StereoRig,
    pose: Pose,
    landmarks: np.ndarray,
    observed_left: np.ndarray,
    observed_right: np.ndarray,
) -> np.ndarray:
    """Stacked reprojection residuals, 4 entries per landmark.

    The sum of squares is the stereo reprojection objective. Landmarks that
    land at or behind the camera get all four entries set to the
    BEHIND_CAMERA_RESIDUAL sentinel so consensus scoring stays defined.
    """
    landmarks = np.atleast_2d(np.asarray(landmarks, dtype=float))
    observed_left = np.atleast_2d(np.asarray(observed_left, dtype=float))
    observed_right = np.atleast_2d(np.asarray(observed_right, dtype=float))
    if not len(landmarks) == len(observed_left) == len(observed_right):
        raise ValueError("landmarks and observations must have equal length")
    res, _ = _projection_residuals(
        rig, pose.rotation, pose.translation, landmarks, observed_left, observed_right
    )
    return res.ravel()


def reprojection_jacobian(rig: StereoRig, pose: Pose, landmarks: np.ndarray) -> np.ndarray:
    """Analytic Jacobian of the residual vector wrt [rotation, translation].

    The update convention is a left-composed axis-angle increment on the
    rotation and an additive translation. Rows of landmarks behind the
    camera are zero.
    """
    landmarks = np.atleast_2d(np.asarray(landmarks, dtype=float))
    n = len(landmarks)
    dummy = np.zeros((n, 2))
    _, _, jac = _linearize(
        rig, pose.rotation, pose.translation, landmarks, dummy, dummy
    )
    return jac


def _objective(res: np.ndarray, valid: np.ndarray) -> float:
    good = float((res[valid] ** 2).sum())
    return good + float((~valid).sum()) * 4.0 * BEHIND_CAMERA_RESIDUAL**2


def _linearize(rig, rotation, translation, landmarks, observed_left, observed_right):
    """Residual rows, validity, and Jacobian sharing one projection pass."""
    rotated = landmarks @ rotation.T
    p = rotated + translation
    z = p[:, 2]
    valid = z > 1e-9
    safe_z = np.where(valid, z, 1.0)
    iz = 1.0 / safe_z
    cu, cv = rig.principal_point
    f = rig.focal
    u_left = f * p[:, 0] * iz + cu
    v = f * p[:, 1] * iz + cv
    u_right = u_left - f * rig.baseline * iz
    n = len(landmarks)
    res = np.empty((n, 4))
    res[:, 0] = observed_left[:, 0] - u_left
    res[:, 1] = observed_left[:, 1] - v
    res[:, 2] = observed_right[:, 0] - u_right
    res[:, 3] = observed_right[:, 1] - v
    res[~valid] = BEHIND_CAMERA_RESIDUAL

    iz2 = iz * iz
    a = np.zeros((n, 4, 3))
    a[:, 0, 0] = f * iz
    a[:, 0, 2] = -f * p[:, 0] * iz2
    a[:, 1, 1] = f * iz
    a[:, 1, 2] = -f * p[:, 1] * iz2
    a[:, 2, 0] = f * iz
    a[:, 2, 2] = -f * (p[:, 0] - rig.baseline) * iz2
    a[:, 3, 1] = f * iz
    a[:, 3, 2] = -f * p[:, 1] * iz2
    g = np.zeros((n, 3, 6))
    x, y, zz = rotated[:, 0], rotated[:, 1], rotated[:, 2]
    g[:, 0, 1] = zz
    g[:, 0, 2] = -y
    g[:, 1, 0] = -zz
    g[:, 1, 2] = x
    g[:, 2, 0] = y
    g[:, 2, 1] = -x
    g[:, 0, 3] = 1.0
    g[:, 1, 4] = 1.0
    g[:, 2, 5] = 1.0
    jac = -(a @ g)
    jac[~valid] = 0.0
    return res, valid, jac.reshape(4 * n, 6)


def gauss_newton_refine(
    rig: StereoRig,
    landmarks: np.ndarray,
    observed_left: np.ndarray,
    observed_right: np.ndarray,
    initial: Pose,
    cfg: EstimatorConfig,
) -> MotionEstimate:
    """Minimize the stereo reprojection objective from the given pose.

    Stops when the parameter update norm drops below gn_step_tolerance
    (converged) or the iteration budget runs out. A step that would raise
    the objective is halved up to five times before the fit is declared
    non-converged. Degenerate geometry (singular or near-singular normal
    matrix) also yields a non-converged estimate rather than an error.
    """
    landmarks = np.atleast_2d(np.asarray(landmarks, dtype=float))
    observed_left = np.atleast_2d(np.asarray(observed_left, dtype=float))
    observed_right = np.atleast_2d(np.asarray(observed_right, dtype=float))
    n = len(landmarks)
    rotation, translation = initial.rotation, initial.translation
    res, valid, jac = _linearize(
        rig, rotation, translation, landmarks, observed_left, observed_right
    )
    obj = _objective(res, valid)
    converged = False
    iterations = 0
    for _ in range(cfg.gn_max_iterations):
        if n < 3 or int(valid.sum()) < 3:
            break
        iterations += 1
        rows = np.repeat(valid, 4)
        j = jac[rows]
        r = res.ravel()[rows]
        h = j.T @ j
        if not np.isfinite(h).all():
            break
        eigenvalues = np.linalg.eigvalsh(h)
        if eigenvalues[0] <= eigenvalues[-1] / _MAX_CONDITION:
            break
        delta = np.linalg.solve(h, -(j.T @ r))
        if not np.isfinite(delta).all():
            break

        scale = 1.0
        accepted = False
        for _ in range(6):
            cand_rot = so3_exp(scale * delta[:3]) @ rotation
            cand_trans = translation + scale * delta[3:]
            cand_res, cand_valid, cand_jac = _linearize(
                rig, cand_rot, cand_trans, landmarks, observed_left, observed_right
            )
            cand_obj = _objective(cand_res, cand_valid)
            if cand_obj <= obj + 1e-12:
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            break
        rotation, translation = cand_rot, cand_trans
        res, valid, obj, jac = cand_res, cand_valid, cand_obj, cand_jac
        if float(np.linalg.norm(scale * delta)) < cfg.gn_step_tolerance:
            converged = True
            break

    rms = float(np.sqrt(np.mean(res[valid] ** 2))) if valid.any() else float("inf")
    return MotionEstimate(
        pose=Pose(rotation, translation),
        inliers=np.arange(n),
        rms_residual=rms,
        iterations=iterations,
        converged=converged,
    )


def _score_inliers(rig, pose, landmarks, observed_left, observed_right, usable, threshold):
    res, valid = _projection_residuals(
        rig, pose.rotation, pose.translation, landmarks, observed_left, observed_right
    )
    norm_left = np.hypot(res[:, 0], res[:, 1])
    norm_right = np.hypot(res[:, 2], res[:, 3])
    return usable & valid & (norm_left < threshold) & (norm_right < threshold)


def _required_iterations(inlier_ratio: float, cap: int) -> int:
    """Standard adaptive RANSAC bound for a 3-point sample."""
    if inlier_ratio >= 1.0 - 1e-12:
        return 1
    miss = 1.0 - inlier_ratio**3
    if miss >= 1.0 - 1e-12:
        return cap
    return min(cap, max(1, math.ceil(math.log(1.0 - _RANSAC_CONFIDENCE) / math.log(miss))))


def ransac_estimate(
    rig: StereoRig,
    quad_matches: list[QuadMatch],
    direction: str,
    cfg: EstimatorConfig,
) -> MotionEstimate:
    """RANSAC-wrapped Gauss-Newton motion fit over quad matches.

    direction "forward" triangulates landmarks from the previous stereo
    pair and projects them into the current one; "backward" swaps the
    roles, estimating the reverse motion from the same matches. A match is
    an inlier when both per-camera residual norms are under the threshold.
    Trials stop early once the consensus is statistically settled, capped
    at cfg.ransac_iterations; the result is deterministic in cfg.rng_seed.

    Raises EstimationFailedError when fewer than cfg.min_matches inputs
    are usable or no consensus of that size exists.
    """
    if direction not in ("forward", "backward"):
        raise ValueError(f"unknown direction {direction!r}")
    n = len(quad_matches)
    if n < cfg.min_matches:
        raise EstimationFailedError(f"{n} matches < minimum {cfg.min_matches}")
    prev_left, prev_right, cur_left, cur_right = match_arrays(quad_matches)
    if direction == "forward":
        src = (prev_left, prev_right)
        observed_left, observed_right = cur_left, cur_right
    else:
        src = (cur_left, cur_right)
        observed_left, observed_right = prev_left, prev_right
    landmarks, usable = triangulate_masked(rig, src[0], src[1])
    usable_idx = np.nonzero(usable)[0]
    if usable_idx.size < cfg.min_matches:
        raise EstimationFailedError(
            f"only {usable_idx.size} triangulable matches < minimum {cfg.min_matches}"
        )

    rng = np.random.default_rng(cfg.rng_seed)
    best_count = 0
    best_inliers = None
    best_pose = None
    needed = cfg.ransac_iterations
    trials = 0
    while trials < needed:
        trials += 1
        sample = rng.choice(usable_idx, size=3, replace=False)
        fit = gauss_newton_refine(
            rig, landmarks[sample], observed_left[sample], observed_right[sample],
            Pose.identity(), cfg,
        )
        if not fit.converged:
            continue
        inliers = _score_inliers(
            rig, fit.pose, landmarks, observed_left, observed_right, usable,
            cfg.inlier_threshold,
        )
        count = int(inliers.sum())
        if count > best_count and count >= 3:
            # local optimization: a minimal-sample fit on noisy data captures
            # only part of its true consensus, so refine on it once before
            # judging how many trials are still worthwhile
            idx = np.nonzero(inliers)[0]
            refined = gauss_newton_refine(
                rig, landmarks[idx], observed_left[idx], observed_right[idx],
                fit.pose, cfg,
            )
            re_inliers = _score_inliers(
                rig, refined.pose, landmarks, observed_left, observed_right,
                usable, cfg.inlier_threshold,
            )
            if int(re_inliers.sum()) >= count:
                inliers, count = re_inliers, int(re_inliers.sum())
                fit = refined
        if count > best_count:
            best_count = count
            best_inliers = inliers
            best_pose = fit.pose
            needed = min(needed, _required_iterations(count / usable_idx.size, cfg.ransac_iterations))
    if best_count < cfg.min_matches:
        raise EstimationFailedError(
            f"best consensus {best_count} < minimum {cfg.min_matches}"
        )

    inliers = best_inliers
    pose = best_pose
    fit = None
    for _ in range(2):
        idx = np.nonzero(inliers)[0]
        fit = gauss_newton_refine(
            rig, landmarks[idx], observed_left[idx], observed_right[idx], pose, cfg
        )
        pose = fit.pose
        rescored = _score_inliers(
            rig, pose, landmarks, observed_left, observed_right, usable,
            cfg.inlier_threshold,
        )
        if np.array_equal(rescored, inliers):
            break
        inliers = rescored
    if int(inliers.sum()) < cfg.min_matches:
        raise EstimationFailedError("refined consensus fell below the minimum")
    idx = np.nonzero(inliers)[0]
    res, valid = _projection_residuals(
        rig, pose.rotation, pose.translation, landmarks[idx],
        observed_left[idx], observed_right[idx],
    )
    rms = float(np.sqrt(np.mean(res[valid] ** 2)))
    return MotionEstimate(
        pose=pose,
        inliers=idx,
        rms_residual=rms,
        iterations=trials,
        converged=fit.converged,
    )


def estimate_joint(
    rig: StereoRig, quad_matches: list[QuadMatch], cfg: EstimatorConfig
) -> JointEstimate:
    """Estimate both temporal directions and fuse them.

    The backward run reuses the same quad matches with roles swapped and
    an independent seed derived from cfg.rng_seed. The fused motion blends
    the forward estimate with the inverted backward estimate; if either
    direction fails or the rotation fusion is degenerate, the surviving
    forward-sense pose is returned with fusion_degenerate set.

    Raises EstimationFailedError only when both directions fail.
    """
    backward_cfg = replace(cfg, rng_seed=cfg.rng_seed ^ BACKWARD_SEED_XOR)
    try:
        forward = ransac_estimate(rig, quad_matches, "forward", cfg)
    except EstimationFailedError:
        forward = None
    try:
        backward = ransac_estimate(rig, quad_matches, "backward", backward_cfg)
    except EstimationFailedError:
        backward = None

    if forward is None and backward is None:
        raise EstimationFailedError("both temporal directions failed")
    if forward is None:
        return JointEstimate(None, backward, inverse(backward.pose), True)
    if backward is None:
        return JointEstimate(forward, None, forward.pose, True)
    forward_from_backward = inverse(backward.pose)
    try:
        fused = fuse_motions(forward.pose, forward_from_backward)
        degenerate = False
    except DegenerateFusionError:
        fused = forward.pose
        degenerate = True
    return JointEstimate(forward, backward, fused, degenerate)


def accumulate(trajectory: Trajectory, step: Pose) -> Trajectory:
    """Append the pose reached by one motion step.

    step maps previous-frame coordinates into current-frame coordinates,
    so the new camera-in-world pose composes with its inverse.
    """
    nxt = compose(trajectory.poses[-1], inverse(step))
    return Trajectory(
        trajectory.poses + [nxt], trajectory.frame_indices + [trajectory.frame_indices[-1] + 1]
    )

import math

import numpy as np
import pytest

from bivo import estimator as est
from bivo import synth
from bivo.estimator import EstimatorConfig
from bivo.features import QuadMatch
from bivo.geometry import (
    Pose,
    geodesic_distance,
    inverse,
    project_stereo,
    so3_exp,
)
from bivo.metrics import Trajectory
from bivo.synth import DEFAULT_RIG, ScenarioConfig
from conftest import random_pose
from oracles import matrix_chain

CFG = EstimatorConfig()


def frame_pair(seed=0, noise=0.0, outliers=0.0, landmarks=100, yaw=0.004, speed=0.8):
    cfg = ScenarioConfig(
        frame_count=2,
        trajectory_kind="arc",
        speed=speed,
        yaw_rate=yaw,
        landmark_count=landmarks,
        pixel_noise_sigma=noise,
        outlier_fraction=outliers,
        rng_seed=seed,
    )
    _, observations = synth.generate_scenario(DEFAULT_RIG, cfg)
    return observations[0]


def pose_errors(a: Pose, b: Pose):
    return (
        float(np.linalg.norm(a.translation - b.translation)),
        geodesic_distance(a.rotation, b.rotation),
    )


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            EstimatorConfig(ransac_iterations=0)
        with pytest.raises(ValueError):
            EstimatorConfig(inlier_threshold=-1.0)


class TestResiduals:
    def test_zero_at_exact_projections(self, rng):
        pts = np.stack(
            [rng.uniform(-5, 5, 20), rng.uniform(-2, 2, 20), rng.uniform(5, 40, 20)], axis=1
        )
        left, right = project_stereo(DEFAULT_RIG, pts)
        res = est.reprojection_residuals(DEFAULT_RIG, Pose.identity(), pts, left, right)
        assert res.shape == (80,)
        assert np.abs(res).max() == 0.0

    def test_zero_at_ground_truth_motion(self):
        obs = frame_pair(seed=1)
        from bivo.features import match_arrays

        _, _, cl, cr = match_arrays(obs.quad_matches)
        res = est.reprojection_residuals(
            DEFAULT_RIG, obs.true_motion, obs.landmarks_prev, cl, cr
        )
        assert np.abs(res).max() < 1e-9

    def test_translation_shift_closed_form(self):
        rig = synth.StereoRig(100.0, (50.0, 50.0), 0.5, (100, 100))
        x = np.array([[0.0, 0.0, 10.0]])
        left, right = project_stereo(rig, x[0])
        pose = Pose(np.eye(3), np.array([0.1, 0.0, 0.0]))
        res = est.reprojection_residuals(rig, pose, x, left[None], right[None])
        # shifting the point +0.1 m in x moves both projections +1 px in u
        assert abs(res[0] - (-1.0)) < 1e-12
        assert abs(res[2] - (-1.0)) < 1e-12
        assert abs(res[1]) < 1e-12 and abs(res[3]) < 1e-12

    def test_behind_camera_sentinel(self):
        pts = np.array([[0.0, 0.0, 5.0], [0.0, 0.0, -5.0]])
        obs = np.zeros((2, 2))
        res = est.reprojection_residuals(DEFAULT_RIG, Pose.identity(), pts, obs, obs)
        assert np.isfinite(res[:4]).all() and (np.abs(res[:4]) < est.BEHIND_CAMERA_RESIDUAL).all()
        assert (res[4:] == est.BEHIND_CAMERA_RESIDUAL).all()


class TestJacobian:
    def test_matches_central_differences(self, rng):
        h = 1e-6
        for _ in range(50):
            pose = random_pose(rng, max_angle=0.5, trans_scale=1.0)
            pts = np.stack(
                [rng.uniform(-10, 10, 5), rng.uniform(-3, 3, 5), rng.uniform(6, 40, 5)],
                axis=1,
            )
            # keep every perturbed evaluation in front of the camera
            cam = pose.apply(pts)
            if cam[:, 2].min() < 1.0:
                continue
            left, right = project_stereo(DEFAULT_RIG, cam)
            jac = est.reprojection_jacobian(DEFAULT_RIG, pose, pts)
            fd = np.zeros_like(jac)
            for col in range(6):
                delta = np.zeros(6)
                delta[col] = h
                plus = Pose(so3_exp(delta[:3]) @ pose.rotation, pose.translation + delta[3:])
                minus = Pose(so3_exp(-delta[:3]) @ pose.rotation, pose.translation - delta[3:])
                rp = est.reprojection_residuals(DEFAULT_RIG, plus, pts, left, right)
                rm = est.reprojection_residuals(DEFAULT_RIG, minus, pts, left, right)
                fd[:, col] = (rp - rm) / (2.0 * h)
            scale = max(np.abs(jac).max(), 1.0)
            assert np.abs(jac - fd).max() / scale < 1e-5


class TestGaussNewton:
    def test_already_at_optimum(self):
        obs = frame_pair(seed=2)
        from bivo.features import match_arrays

        _, _, cl, cr = match_arrays(obs.quad_matches)
        fit = est.gauss_newton_refine(
            DEFAULT_RIG, obs.landmarks_prev, cl, cr, obs.true_motion, CFG
        )
        assert fit.converged
        assert fit.iterations <= 1
        t_err, r_err = pose_errors(fit.pose, obs.true_motion)
        assert t_err < 1e-9 and r_err < 1e-9

    def test_recovers_motion_from_identity(self, rng):
        # 0.5 m forward plus 2 degrees of yaw, 50 noiseless points
        true = Pose(so3_exp([0.0, math.radians(2.0), 0.0]), np.array([0.0, 0.0, -0.5]))
        pts = np.stack(
            [rng.uniform(-8, 8, 50), rng.uniform(-3, 3, 50), rng.uniform(6, 40, 50)], axis=1
        )
        left, right = project_stereo(DEFAULT_RIG, true.apply(pts))
        fit = est.gauss_newton_refine(DEFAULT_RIG, pts, left, right, Pose.identity(), CFG)
        assert fit.converged
        t_err, r_err = pose_errors(fit.pose, true)
        assert t_err < 1e-6 and r_err < 1e-6

    def test_collinear_landmarks_flagged(self):
        s = np.array([1.0, 2.0, 3.0])
        pts = np.outer(s, np.array([0.2, 0.1, 8.0]))  # three collinear points
        left, right = project_stereo(DEFAULT_RIG, pts)
        fit = est.gauss_newton_refine(DEFAULT_RIG, pts, left, right, Pose.identity(), CFG)
        assert not fit.converged

    def test_objective_never_increases(self, rng):
        obs = frame_pair(seed=3, noise=1.0)
        from bivo.features import match_arrays

        _, _, cl, cr = match_arrays(obs.quad_matches)
        start = random_pose(rng, max_angle=0.05, trans_scale=0.2)
        before = est.reprojection_residuals(DEFAULT_RIG, start, obs.landmarks_prev, cl, cr)
        fit = est.gauss_newton_refine(DEFAULT_RIG, obs.landmarks_prev, cl, cr, start, CFG)
        after = est.reprojection_residuals(DEFAULT_RIG, fit.pose, obs.landmarks_prev, cl, cr)
        assert (after**2).sum() <= (before**2).sum() + 1e-9


class TestRansac:
    def test_clean_data_all_inliers(self):
        obs = frame_pair(seed=4, landmarks=100)
        fit = est.ransac_estimate(DEFAULT_RIG, obs.quad_matches, "forward", CFG)
        assert fit.inliers.size == len(obs.quad_matches)
        t_err, r_err = pose_errors(fit.pose, obs.true_motion)
        assert t_err < 1e-6 and r_err < 1e-6

    def test_outliers_rejected_across_seeds(self):
        good = 0
        for seed in range(10):
            obs = frame_pair(seed=seed, outliers=0.3, landmarks=100)
            cfg = EstimatorConfig(rng_seed=seed)
            fit = est.ransac_estimate(DEFAULT_RIG, obs.quad_matches, "forward", cfg)
            true_idx = set(np.nonzero(obs.truth_mask)[0])
            got = set(fit.inliers.tolist())
            recovered = len(got & true_idx) / len(true_idx)
            t_err, r_err = pose_errors(fit.pose, obs.true_motion)
            if not (got - true_idx) and recovered >= 0.95 and t_err < 1e-3 and r_err < 1e-4:
                good += 1
        assert good >= 9

    def test_too_few_matches(self):
        obs = frame_pair(seed=5)
        with pytest.raises(est.EstimationFailedError):
            est.ransac_estimate(DEFAULT_RIG, obs.quad_matches[:2], "forward", CFG)

    def test_deterministic_under_seed(self):
        obs = frame_pair(seed=6, noise=0.5, outliers=0.2)
        cfg = EstimatorConfig(rng_seed=123)
        a = est.ransac_estimate(DEFAULT_RIG, obs.quad_matches, "forward", cfg)
        b = est.ransac_estimate(DEFAULT_RIG, obs.quad_matches, "forward", cfg)
        assert np.array_equal(a.inliers, b.inliers)
        assert np.array_equal(a.pose.rotation, b.pose.rotation)
        assert np.array_equal(a.pose.translation, b.pose.translation)

    def test_backward_direction_estimates_reverse_motion(self):
        obs = frame_pair(seed=7)
        fit = est.ransac_estimate(DEFAULT_RIG, obs.quad_matches, "backward", CFG)
        t_err, r_err = pose_errors(inverse(fit.pose), obs.true_motion)
        assert t_err < 1e-6 and r_err < 1e-6


class TestJoint:
    def test_noiseless_agreement(self):
        obs = frame_pair(seed=8)
        joint = est.estimate_joint(DEFAULT_RIG, obs.quad_matches, CFG)
        assert not joint.fusion_degenerate
        for candidate in (joint.forward.pose, inverse(joint.backward.pose), joint.fused):
            t_err, r_err = pose_errors(candidate, obs.true_motion)
            assert t_err < 1e-6 and r_err < 1e-6

    def test_direction_duality_on_clean_data(self):
        for seed in range(5):
            obs = frame_pair(seed=seed)
            joint = est.estimate_joint(DEFAULT_RIG, obs.quad_matches, CFG)
            t_err, r_err = pose_errors(inverse(joint.backward.pose), joint.forward.pose)
            assert t_err < 1e-6 and r_err < 1e-6

    def test_fused_is_midpoint(self):
        obs = frame_pair(seed=9, noise=0.5)
        joint = est.estimate_joint(DEFAULT_RIG, obs.quad_matches, CFG)
        fwd = joint.forward.pose
        alt = inverse(joint.backward.pose)
        d_f = geodesic_distance(joint.fused.rotation, fwd.rotation)
        d_b = geodesic_distance(joint.fused.rotation, alt.rotation)
        assert abs(d_f - d_b) < 1e-9
        assert np.allclose(
            joint.fused.translation, 0.5 * (fwd.translation + alt.translation)
        )

    def test_forward_failure_falls_back_to_backward(self, rng):
        # far landmarks: previous-pair disparity is under the triangulation
        # threshold, so the forward direction cannot build landmarks, while
        # a large forward jump makes the current pair fully triangulable
        z_prev = rng.uniform(790.0, 820.0, 40)
        x = rng.uniform(-40.0, 40.0, 40)
        y = rng.uniform(-10.0, 10.0, 40)
        pts_prev = np.stack([x, y, z_prev], axis=1)
        true_motion = Pose(np.eye(3), np.array([0.0, 0.0, -700.0]))
        pl, pr = project_stereo(DEFAULT_RIG, pts_prev)
        cl, cr = project_stereo(DEFAULT_RIG, true_motion.apply(pts_prev))
        matches = [
            QuadMatch(pl[i], pr[i], cl[i], cr[i], "synthetic") for i in range(40)
        ]
        with pytest.raises(est.EstimationFailedError):
            est.ransac_estimate(DEFAULT_RIG, matches, "forward", CFG)
        joint = est.estimate_joint(DEFAULT_RIG, matches, CFG)
        assert joint.forward is None
        assert joint.fusion_degenerate
        t_err, r_err = pose_errors(joint.fused, true_motion)
        assert t_err < 1e-4 and r_err < 1e-6

    def test_both_directions_failing_raises(self):
        obs = frame_pair(seed=10)
        with pytest.raises(est.EstimationFailedError):
            est.estimate_joint(DEFAULT_RIG, obs.quad_matches[:3], CFG)


class TestAccumulate:
    def test_identity_step(self):
        traj = Trajectory([Pose.identity()])
        traj = est.accumulate(traj, Pose.identity())
        assert len(traj) == 2
        assert np.allclose(traj.poses[1].matrix(), np.eye(4))

    def test_two_forward_steps(self):
        # a camera moving +1 m along z has step translation (0, 0, -1) in
        # previous-in-current convention; the world pose advances by +1
        step = Pose(np.eye(3), np.array([0.0, 0.0, -1.0]))
        traj = Trajectory([Pose.identity()])
        traj = est.accumulate(est.accumulate(traj, step), step)
        assert np.allclose(traj.poses[-1].translation, [0.0, 0.0, 2.0])

    def test_matches_matrix_chain(self, rng):
        steps = [random_pose(rng, max_angle=0.4, trans_scale=1.0) for _ in range(12)]
        traj = Trajectory([Pose.identity()])
        for s in steps:
            traj = est.accumulate(traj, s)
        expected = matrix_chain([np.linalg.inv(s.matrix()) for s in steps])
        assert np.abs(traj.poses[-1].matrix() - expected).max() < 1e-9

    def test_round_trip_with_true_motions(self):
        cfg = ScenarioConfig(frame_count=8, trajectory_kind="arc", yaw_rate=0.01, rng_seed=2)
        gt, observations = synth.generate_scenario(DEFAULT_RIG, cfg)
        traj = Trajectory([Pose.identity()])
        for obs in observations:
            traj = est.accumulate(traj, obs.true_motion)
        for a, b in zip(traj.poses, gt.poses):
            assert np.abs(a.matrix() - b.matrix()).max() < 1e-9

"""Synthetic scenes with exact ground truth for verifying the estimator.

The primary product is observation-level data: per consecutive frame pair,
a fresh batch of landmarks sampled in the previous camera's viewing
frustum, their exact stereo projections in both frames, optional Gaussian
pixel noise, and optional injected outliers with a truth mask. A secondary
path renders each landmark as a small Gaussian dot so the feature front
end can be exercised end to end.

Everything is deterministic under the scenario seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import QuadMatch
from .geometry import Pose, StereoRig, compose, inverse, project_stereo_masked, so3_exp
from .metrics import Trajectory

DEFAULT_RIG = StereoRig(
    focal=718.856,
    principal_point=(607.1928, 185.2157),
    baseline=0.5372,
    image_size=(1241, 376),
)

TRAJECTORY_KINDS = ("straight", "arc", "random-walk")

_SAMPLE_MARGIN = 8.0       # px kept clear of the image border when sampling
_VISIBILITY_MARGIN = 2.0   # px required inside all four images
_MIN_TRUE_DISPARITY = 0.6  # keeps genuine matches safely triangulable


class ScenarioInfeasibleError(RuntimeError):
    """No landmark was visible in all four images of some frame pair."""


@dataclass(frozen=True)
class ScenarioConfig:
    frame_count: int = 50
    trajectory_kind: str = "straight"
    speed: float = 1.0                       # meters per frame
    yaw_rate: float = 0.0                    # radians per frame
    landmark_count: int = 300
    depth_range: tuple[float, float] = (5.0, 40.0)
    pixel_noise_sigma: float = 0.0
    outlier_fraction: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.frame_count < 2:
            raise ValueError("need at least two frames")
        if self.trajectory_kind not in TRAJECTORY_KINDS:
            raise ValueError(f"unknown trajectory kind {self.trajectory_kind!r}")
        if self.landmark_count < 1:
            raise ValueError("need at least one landmark")
        near, far = self.depth_range
        if near <= 0.0 or far <= near:
            raise ValueError(f"bad depth range {self.depth_range}")
        if self.pixel_noise_sigma < 0.0:
            raise ValueError("noise sigma must be non-negative")
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise ValueError("outlier fraction must be in [0, 1]")


@dataclass
class FrameObservations:
    """Quad matches for one consecutive frame pair plus their provenance.

    true_motion maps previous-frame coordinates into current-frame
    coordinates. landmarks_prev rows are previous-left-camera coordinates
    for genuine matches and NaN for injected outliers; truth_mask is True
    on genuine rows.
    """

    frame_index: int
    true_motion: Pose
    quad_matches: list[QuadMatch] = field(default_factory=list)
    landmarks_prev: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    truth_mask: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def _yaw(angle: float) -> np.ndarray:
    return so3_exp(np.array([0.0, angle, 0.0]))


def ground_truth_trajectory(cfg: ScenarioConfig) -> Trajectory:
    """Camera-in-world poses, starting at the identity."""
    poses = [Pose.identity()]
    if cfg.trajectory_kind == "straight":
        for i in range(1, cfg.frame_count):
            poses.append(Pose(np.eye(3), np.array([0.0, 0.0, cfg.speed * i])))
    elif cfg.trajectory_kind == "arc":
        step = Pose(_yaw(cfg.yaw_rate), np.array([0.0, 0.0, cfg.speed]))
        for _ in range(1, cfg.frame_count):
            poses.append(compose(poses[-1], step))
    else:
        rng = np.random.default_rng([cfg.rng_seed, 1])
        for _ in range(1, cfg.frame_count):
            spin = rng.normal(0.0, max(cfg.yaw_rate, 1e-12), 3)
            wobble = rng.normal(0.0, 0.1 * max(cfg.speed, 1e-12), 3)
            step = Pose(so3_exp(spin), np.array([0.0, 0.0, cfg.speed]) + wobble)
            poses.append(compose(poses[-1], step))
    return Trajectory(poses)


def _sample_frustum(rig: StereoRig, cfg: ScenarioConfig, rng) -> np.ndarray:
    """Landmarks uniform in left-image coordinates and depth."""
    w, h = rig.image_size
    cu, cv = rig.principal_point
    z = rng.uniform(cfg.depth_range[0], cfg.depth_range[1], cfg.landmark_count)
    u = rng.uniform(_SAMPLE_MARGIN, w - _SAMPLE_MARGIN, cfg.landmark_count)
    v = rng.uniform(_SAMPLE_MARGIN, h - _SAMPLE_MARGIN, cfg.landmark_count)
    return np.stack([(u - cu) * z / rig.focal, (v - cv) * z / rig.focal, z], axis=1)


def _in_bounds(points: np.ndarray, size: tuple[int, int], margin: float) -> np.ndarray:
    w, h = size
    return (
        (points[:, 0] >= margin)
        & (points[:, 0] <= w - 1 - margin)
        & (points[:, 1] >= margin)
        & (points[:, 1] <= h - 1 - margin)
    )


def generate_scenario(
    rig: StereoRig, cfg: ScenarioConfig
) -> tuple[Trajectory, list[FrameObservations]]:
    """Ground-truth trajectory plus per-pair quad matches with provenance.

    Raises ScenarioInfeasibleError naming the frame pair if some pair ends
    up with no landmark visible in all four images.
    """
    if rig.image_size is None:
        raise ValueError("rig must carry an image size to bound the frustum")
    trajectory = ground_truth_trajectory(cfg)
    w, h = rig.image_size
    observations = []
    for k in range(1, cfg.frame_count):
        rng = np.random.default_rng([cfg.rng_seed, 1000 + k])
        true_motion = compose(inverse(trajectory.poses[k]), trajectory.poses[k - 1])

        x_prev = _sample_frustum(rig, cfg, rng)
        pl, pr, ok_prev = project_stereo_masked(rig, x_prev)
        x_cur = true_motion.apply(x_prev)
        cl, cr, ok_cur = project_stereo_masked(rig, x_cur)
        visible = (
            ok_prev
            & ok_cur
            & _in_bounds(pl, rig.image_size, _VISIBILITY_MARGIN)
            & _in_bounds(pr, rig.image_size, _VISIBILITY_MARGIN)
            & _in_bounds(cl, rig.image_size, _VISIBILITY_MARGIN)
            & _in_bounds(cr, rig.image_size, _VISIBILITY_MARGIN)
            & ((pl[:, 0] - pr[:, 0]) > _MIN_TRUE_DISPARITY)
            & ((cl[:, 0] - cr[:, 0]) > _MIN_TRUE_DISPARITY)
        )
        if not visible.any():
            raise ScenarioInfeasibleError(
                f"no landmarks visible in all four images for frame pair {k}"
            )
        landmarks = x_prev[visible]
        corners = [pts[visible].copy() for pts in (pl, pr, cl, cr)]
        n = len(landmarks)

        if cfg.pixel_noise_sigma > 0.0:
            for pts in corners:
                pts += rng.normal(0.0, cfg.pixel_noise_sigma, pts.shape)

        truth_mask = np.ones(n, dtype=bool)
        n_out = int(round(cfg.outlier_fraction * n))
        if n_out:
            chosen = rng.choice(n, size=n_out, replace=False)
            fake = rng.uniform(0.0, 1.0, (n_out, 4, 2)) * np.array([w - 1.0, h - 1.0])
            for slot, pts in enumerate(corners):
                pts[chosen] = fake[:, slot, :]
            truth_mask[chosen] = False
            landmarks = landmarks.copy()
            landmarks[chosen] = np.nan

        quads = [
            QuadMatch(
                prev_left=corners[0][i],
                prev_right=corners[1][i],
                cur_left=corners[2][i],
                cur_right=corners[3][i],
                feature_class="synthetic",
            )
            for i in range(n)
        ]
        observations.append(
            FrameObservations(
                frame_index=k,
                true_motion=true_motion,
                quad_matches=quads,
                landmarks_prev=landmarks,
                truth_mask=truth_mask,
            )
        )
    return trajectory, observations


RENDER_BACKGROUND = 96


def _glyph_params(index: int) -> tuple[int, float, float, float, float]:
    """(glyph kind, contrast, sigma_major, sigma_minor, orientation).

    Four glyph kinds target the four detector classes: a bright blob, a
    dark blob, and two saddle polarities whose checkerboard structure peaks
    the corner response at the glyph center. Contrast, footprint shape, and
    orientation vary per landmark so descriptors are individual; brightness
    alone would leave dots distinguishable only by a single scalar. Saddle
    orientations stay within +-0.35 rad so the corner response keeps its
    sign.
    """
    m1 = (index * 2654435761) % (2**32)
    m2 = (index * 2246822519 + 374761393) % (2**32)
    kind = int(m1 % 4)
    contrast = 64.0 + float((m1 >> 3) % 64)
    sigma_a = 0.8 + 0.7 * ((m1 >> 10) % 1024) / 1023.0
    sigma_b = 0.8 + 0.7 * ((m2 >> 4) % 1024) / 1023.0
    phase = ((m2 >> 16) % 1024) / 1023.0
    if kind < 2:
        angle = np.pi * phase
    else:
        angle = 0.7 * (phase - 0.5)
    return kind, contrast, sigma_a, sigma_b, angle


def render_frame(
    rig: StereoRig,
    landmarks: np.ndarray,
    pose: Pose,
    image_size: tuple[int, int] | None = None,
) -> np.ndarray:
    """Render world landmarks seen by the left camera at the given pose.

    Each visible landmark becomes a small Gaussian-profile glyph at its
    projected location on a mid-grey background, with kind, contrast, and
    footprint keyed to its index in the landmark array, so the same point
    looks the same in every frame it appears in.
    """
    size = image_size or rig.image_size
    if size is None:
        raise ValueError("no image size available for rendering")
    w, h = size
    img = np.full((h, w), float(RENDER_BACKGROUND), dtype=np.float32)
    if len(landmarks) == 0:
        return img.astype(np.uint8)
    cam = inverse(pose).apply(np.asarray(landmarks, dtype=float))
    left, _, valid = project_stereo_masked(rig, cam)
    saddle_gain = float(np.e)  # peaks the saddle lobes at +-contrast
    for idx in np.nonzero(valid)[0]:
        u, v = left[idx]
        if not (-3.0 <= u <= w + 2.0 and -3.0 <= v <= h + 2.0):
            continue
        kind, contrast, sigma_a, sigma_b, angle = _glyph_params(int(idx))
        cos_a, sin_a = np.cos(angle), np.sin(angle)
        ui, vi = int(round(u)), int(round(v))
        for vv in range(max(0, vi - 3), min(h, vi + 4)):
            for uu in range(max(0, ui - 3), min(w, ui + 4)):
                du = (cos_a * (uu - u) + sin_a * (vv - v)) / sigma_a
                dv = (-sin_a * (uu - u) + cos_a * (vv - v)) / sigma_b
                envelope = np.exp(-(du * du + dv * dv) / 2.0)
                if kind == 0:
                    value = contrast * envelope
                elif kind == 1:
                    value = -contrast * envelope
                elif kind == 2:
                    value = contrast * saddle_gain * du * dv * envelope
                else:
                    value = -contrast * saddle_gain * du * dv * envelope
                img[vv, uu] += value
    return np.clip(img, 0.0, 255.0).astype(np.uint8)


def right_camera_pose(rig: StereoRig, left_pose: Pose) -> Pose:
    """World pose of the right camera given the left camera's pose."""
    return compose(left_pose, Pose(np.eye(3), np.array([rig.baseline, 0.0, 0.0])))


def render_stereo_pair(
    rig: StereoRig, landmarks: np.ndarray, pose: Pose
) -> tuple[np.ndarray, np.ndarray]:
    left = render_frame(rig, landmarks, pose)
    right = render_frame(rig, landmarks, right_camera_pose(rig, pose))
    return left, right


def render_landmark_field(rig: StereoRig, cfg: ScenarioConfig, trajectory: Trajectory) -> np.ndarray:
    """One persistent world landmark cloud covering the whole trajectory.

    Samples a batch in every frame's frustum so consecutive frames always
    share scene content; meant for the rendered (image) pipeline where
    landmarks must persist across frames.
    """
    batches = []
    for i, pose in enumerate(trajectory.poses):
        rng = np.random.default_rng([cfg.rng_seed, 5000 + i])
        batches.append(pose.apply(_sample_frustum(rig, cfg, rng)))
    return np.concatenate(batches, axis=0)


_SCENARIO_MAGIC = "# bivo scenario v1"


def _fmt(values) -> str:
    # 17 significant digits round-trips IEEE doubles exactly
    return " ".join(f"{float(v):.17g}" for v in values)


def save_scenario(
    rig: StereoRig, trajectory: Trajectory, observations: list[FrameObservations]
) -> str:
    """Plain-text dump, one pose or match per line; see load_scenario."""
    if rig.image_size is None:
        raise ValueError("rig must carry an image size")
    lines = [_SCENARIO_MAGIC]
    cu, cv = rig.principal_point
    w, h = rig.image_size
    lines.append(f"rig {_fmt([rig.focal, cu, cv, rig.baseline])} {w} {h}")
    lines.append(f"frames {len(trajectory)}")
    for idx, pose in zip(trajectory.frame_indices, trajectory.poses):
        flat = np.hstack([pose.rotation, pose.translation[:, None]]).ravel()
        lines.append(f"pose {idx} {_fmt(flat)}")
    for obs in observations:
        flat = np.hstack([obs.true_motion.rotation, obs.true_motion.translation[:, None]]).ravel()
        lines.append(f"pair {obs.frame_index} {_fmt(flat)}")
        for i, match in enumerate(obs.quad_matches):
            genuine = bool(obs.truth_mask[i])
            coords = _fmt(
                np.concatenate(
                    [match.prev_left, match.prev_right, match.cur_left, match.cur_right]
                )
            )
            if genuine:
                lines.append(
                    f"match {obs.frame_index} 1 {coords} {_fmt(obs.landmarks_prev[i])}"
                )
            else:
                lines.append(f"match {obs.frame_index} 0 {coords}")
    return "\n".join(lines) + "\n"


def load_scenario(text: str) -> tuple[StereoRig, Trajectory, list[FrameObservations]]:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != _SCENARIO_MAGIC:
        raise ValueError("not a scenario file")
    rig = None
    pose_rows: list[tuple[int, Pose]] = []
    pairs: dict[int, FrameObservations] = {}
    raw_matches: dict[int, list[tuple[bool, np.ndarray, np.ndarray]]] = {}
    for ln in lines[1:]:
        parts = ln.split()
        tag = parts[0]
        if tag == "rig":
            f, cu, cv, b = (float(x) for x in parts[1:5])
            rig = StereoRig(f, (cu, cv), b, (int(parts[5]), int(parts[6])))
        elif tag == "frames":
            continue
        elif tag == "pose":
            vals = np.array([float(x) for x in parts[2:14]]).reshape(3, 4)
            pose_rows.append((int(parts[1]), Pose(vals[:, :3], vals[:, 3])))
        elif tag == "pair":
            vals = np.array([float(x) for x in parts[2:14]]).reshape(3, 4)
            k = int(parts[1])
            pairs[k] = FrameObservations(frame_index=k, true_motion=Pose(vals[:, :3], vals[:, 3]))
            raw_matches[k] = []
        elif tag == "match":
            k = int(parts[1])
            genuine = parts[2] == "1"
            coords = np.array([float(x) for x in parts[3:11]])
            landmark = (
                np.array([float(x) for x in parts[11:14]])
                if genuine
                else np.full(3, np.nan)
            )
            raw_matches[k].append((genuine, coords, landmark))
        else:
            raise ValueError(f"unknown scenario line tag {tag!r}")
    if rig is None:
        raise ValueError("scenario file has no rig line")
    for k, rows in raw_matches.items():
        obs = pairs[k]
        obs.quad_matches = [
            QuadMatch(c[0:2], c[2:4], c[4:6], c[6:8], "synthetic") for _, c, _ in rows
        ]
        obs.truth_mask = np.array([g for g, _, _ in rows], dtype=bool)
        obs.landmarks_prev = (
            np.stack([lm for _, _, lm in rows]) if rows else np.zeros((0, 3))
        )
    pose_rows.sort(key=lambda item: item[0])
    trajectory = Trajectory([p for _, p in pose_rows], [i for i, _ in pose_rows])
    observations = [pairs[k] for k in sorted(pairs)]
    return rig, trajectory, observations

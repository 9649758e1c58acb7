import numpy as np
import pytest

from bivo import features as feat
from bivo import synth
from bivo.features import circular_match, detect_features
from bivo.geometry import project_stereo_masked
from bivo.synth import DEFAULT_RIG, ScenarioConfig
from oracles import brute_force_convolve


def dot_image(shape=(48, 48), centers=((24, 24),), intensities=(255,)):
    img = np.zeros(shape, dtype=np.uint8)
    for (v, u), value in zip(centers, intensities):
        img[v - 1 : v + 2, u - 1 : u + 2] = value
    return img


class TestMasks:
    def test_zero_sum(self):
        assert feat.BLOB_MASK.sum() == 0
        assert feat.CORNER_MASK.sum() == 0

    def test_filter_matches_brute_force(self):
        rng = np.random.default_rng(5)
        img = rng.integers(0, 255, size=(20, 20)).astype(np.uint8)
        from scipy import ndimage

        fast = ndimage.correlate(img.astype(np.float32), feat.BLOB_MASK, mode="nearest")
        slow = brute_force_convolve(img, feat.BLOB_MASK)
        assert np.abs(fast - slow).max() < 1e-3


class TestDetection:
    def test_constant_image_has_no_features(self):
        img = np.full((64, 64), 137, dtype=np.uint8)
        assert detect_features(img) == []

    def test_tiny_image_is_empty_not_an_error(self):
        assert detect_features(np.zeros((10, 10), dtype=np.uint8)) == []

    def test_single_dot_single_blob_max(self):
        img = dot_image()
        response = brute_force_convolve(img, feat.BLOB_MASK)
        v, u = np.unravel_index(np.argmax(response), response.shape)
        assert (v, u) == (24, 24)

        blobs = [f for f in detect_features(img) if f.feature_class == "blob-max"]
        assert len(blobs) == 1
        assert abs(blobs[0].u - 24) <= 1.0 and abs(blobs[0].v - 24) <= 1.0

    def test_close_dots_stronger_survives(self):
        img = dot_image(centers=((24, 24), (24, 27)), intensities=(255, 140))
        response = brute_force_convolve(img, feat.BLOB_MASK)
        # brute-force suppression: within one window the larger response wins
        assert response[24, 24] > response[24, 27]

        blobs = [f for f in detect_features(img, nms_radius=5) if f.feature_class == "blob-max"]
        assert len(blobs) == 1
        assert abs(blobs[0].u - 24) <= 1.0

    def test_max_count_and_ordering(self):
        rng = np.random.default_rng(9)
        img = rng.integers(0, 255, size=(120, 160)).astype(np.uint8)
        feats = detect_features(img, max_count=10)
        assert len(feats) == 10
        strengths = [feat._normalized_strength(f) for f in feats]
        assert strengths == sorted(strengths, reverse=True)

    def test_descriptor_shape_and_margin(self):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 255, size=(100, 100)).astype(np.uint8)
        for f in detect_features(img):
            assert f.descriptor.shape == (32,)
            assert feat.DESCRIPTOR_MARGIN - 1 <= f.u <= 100 - feat.DESCRIPTOR_MARGIN
            assert feat.DESCRIPTOR_MARGIN - 1 <= f.v <= 100 - feat.DESCRIPTOR_MARGIN

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        img = rng.integers(0, 255, size=(100, 140)).astype(np.uint8)
        a = detect_features(img)
        b = detect_features(img)
        assert len(a) == len(b)
        for fa, fb in zip(a, b):
            assert (fa.u, fa.v, fa.feature_class) == (fb.u, fb.v, fb.feature_class)


class TestCircularMatchBasics:
    def test_identical_feature_sets_match_to_self(self):
        rng = np.random.default_rng(3)
        img = rng.integers(0, 255, size=(120, 160)).astype(np.uint8)
        feats = detect_features(img, max_count=50)
        assert len(feats) >= 10
        # zero-disparity test rig: disable the positive-disparity gate
        matches = circular_match(feats, feats, feats, feats, min_disparity=-1.0)
        assert len(matches) == len(feats)
        for m, f in zip(matches, feats):
            assert np.allclose(m.cur_left, [f.u, f.v])
            assert np.allclose(m.prev_left, [f.u, f.v])

    def test_feature_only_in_one_image_cannot_close(self):
        rng = np.random.default_rng(4)
        img = rng.integers(0, 255, size=(120, 160)).astype(np.uint8)
        feats = detect_features(img, max_count=30)
        lonely = feats[:1]
        matches = circular_match([], [], lonely, [], min_disparity=-1.0)
        assert matches == []

    def test_empty_inputs(self):
        assert circular_match([], [], [], []) == []


def render_pair_views(cfg):
    traj = synth.ground_truth_trajectory(cfg)
    field = synth.render_landmark_field(DEFAULT_RIG, cfg, traj)
    prev_l, prev_r = synth.render_stereo_pair(DEFAULT_RIG, field, traj.poses[0])
    cur_l, cur_r = synth.render_stereo_pair(DEFAULT_RIG, field, traj.poses[1])
    return traj, field, (prev_l, prev_r, cur_l, cur_r)


@pytest.fixture(scope="module")
def rendered_scene():
    cfg = ScenarioConfig(
        frame_count=2,
        trajectory_kind="arc",
        speed=0.25,
        yaw_rate=0.002,
        landmark_count=90,
        rng_seed=6,
    )
    traj, field, images = render_pair_views(cfg)
    detections = [detect_features(img) for img in images]
    matches = circular_match(*detections)
    return traj, field, detections, matches


def truth_projections(traj, field):
    from bivo.geometry import inverse

    views = []
    for pose in (traj.poses[0], traj.poses[1]):
        cam_left = inverse(pose).apply(field)
        left, right, valid = project_stereo_masked(DEFAULT_RIG, cam_left)
        views.append((left, right, valid))
    return views


class TestCircularMatchRendered:
    def test_matches_hit_ground_truth(self, rendered_scene):
        traj, field, _, matches = rendered_scene
        assert len(matches) >= 40
        (pl, pr, pv), (cl, cr, cv) = truth_projections(traj, field)
        accurate = 0
        for m in matches:
            d = np.linalg.norm(cl - m.cur_left, axis=1)
            j = int(np.argmin(d))
            corners = (
                np.linalg.norm(m.cur_left - cl[j]),
                np.linalg.norm(m.cur_right - cr[j]),
                np.linalg.norm(m.prev_left - pl[j]),
                np.linalg.norm(m.prev_right - pr[j]),
            )
            if max(corners) <= 1.0:
                accurate += 1
        assert accurate / len(matches) >= 0.9

    def test_recall_of_visible_landmarks(self, rendered_scene):
        traj, field, _, matches = rendered_scene
        (pl, pr, pv), (cl, cr, cv) = truth_projections(traj, field)
        w, h = DEFAULT_RIG.image_size
        margin = feat.DESCRIPTOR_MARGIN + 2
        inside = pv & cv
        for pts in (pl, pr, cl, cr):
            inside &= (
                (pts[:, 0] >= margin)
                & (pts[:, 0] <= w - 1 - margin)
                & (pts[:, 1] >= margin)
                & (pts[:, 1] <= h - 1 - margin)
            )
        candidates = np.nonzero(inside)[0]
        assert candidates.size >= 50
        recovered = 0
        cur_left = np.stack([m.cur_left for m in matches])
        for j in candidates:
            d = np.linalg.norm(cur_left - cl[j], axis=1)
            if d.min() <= 1.0:
                recovered += 1
        assert recovered / candidates.size >= 0.8

    def test_epipolar_gate_holds_exactly(self, rendered_scene):
        _, _, _, matches = rendered_scene
        for m in matches:
            assert abs(m.prev_left[1] - m.prev_right[1]) <= 1.0
            assert abs(m.cur_left[1] - m.cur_right[1]) <= 1.0
            assert m.prev_left[0] - m.prev_right[0] >= 0.5
            assert m.cur_left[0] - m.cur_right[0] >= 0.5

    def test_uniqueness_and_determinism(self, rendered_scene):
        _, _, detections, matches = rendered_scene
        for corner in ("prev_left", "prev_right", "cur_left", "cur_right"):
            coords = [tuple(getattr(m, corner)) for m in matches]
            assert len(coords) == len(set(coords))
        again = circular_match(*detections)
        assert len(again) == len(matches)
        for a, b in zip(again, matches):
            assert np.array_equal(a.cur_left, b.cur_left)
            assert np.array_equal(a.prev_right, b.prev_right)

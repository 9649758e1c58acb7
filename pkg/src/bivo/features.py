"""Sparse interest points and circular matching over a stereo frame pair.

An image is a (height, width) uint8 array. Detection runs a 5x5 blob mask
and a 5x5 checkerboard corner mask over the image, keeps local maxima and
minima of each response per class, and describes each keypoint by sampling
the two gradient images on a fixed offset grid. Matching chases each
current-left feature around the loop current-left -> previous-left ->
previous-right -> current-right -> current-left and accepts the match only
when the loop closes on its starting feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import DISPARITY_MIN

BLOB_MASK = np.array(
    [
        [-1, -1, -1, -1, -1],
        [-1, 1, 1, 1, -1],
        [-1, 1, 8, 1, -1],
        [-1, 1, 1, 1, -1],
        [-1, -1, -1, -1, -1],
    ],
    dtype=np.float32,
)

CORNER_MASK = np.array(
    [
        [-1, -1, 0, 1, 1],
        [-1, -1, 0, 1, 1],
        [0, 0, 0, 0, 0],
        [1, 1, 0, -1, -1],
        [1, 1, 0, -1, -1],
    ],
    dtype=np.float32,
)

_SOBEL_U = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float32)
_SOBEL_V = _SOBEL_U.T

FEATURE_CLASSES = ("blob-max", "blob-min", "corner-max", "corner-min")

# 4x4 sampling grid spanning +-5 px; u and v gradients at each node give a
# 32-element descriptor compared under sum of absolute differences.
_GRID = (-5, -2, 2, 5)
DESCRIPTOR_OFFSETS = np.array([(dv, du) for dv in _GRID for du in _GRID])
DESCRIPTOR_MARGIN = 8

TEMPORAL_SEARCH_RADIUS = 50.0
DEFAULT_NMS_RADIUS = 5
DEFAULT_MAX_FEATURES = 2000
DEFAULT_MIN_RESPONSE = 25.0


@dataclass(frozen=True)
class Feature:
    """One detected keypoint with sub-pixel location and descriptor."""

    u: float
    v: float
    feature_class: str
    response: float
    descriptor: np.ndarray


@dataclass(frozen=True)
class QuadMatch:
    """A feature tracked across the four images of a consecutive stereo pair.

    Each corner is a (u, v) pixel array. Matches emitted by circular_match
    satisfy the epipolar gate on both stereo legs and have positive
    disparity above the matcher's threshold.
    """

    prev_left: np.ndarray
    prev_right: np.ndarray
    cur_left: np.ndarray
    cur_right: np.ndarray
    feature_class: str


def _normalized_strength(f: "Feature") -> float:
    scale = np.abs(BLOB_MASK).sum() if f.feature_class.startswith("blob") else np.abs(CORNER_MASK).sum()
    return abs(f.response) / float(scale)


def _subpixel_offset(response: np.ndarray, v: int, u: int) -> tuple[float, float]:
    denom_u = response[v, u - 1] - 2.0 * response[v, u] + response[v, u + 1]
    denom_v = response[v - 1, u] - 2.0 * response[v, u] + response[v + 1, u]
    du = 0.5 * (response[v, u - 1] - response[v, u + 1]) / denom_u if abs(denom_u) > 1e-9 else 0.0
    dv = 0.5 * (response[v - 1, u] - response[v + 1, u]) / denom_v if abs(denom_v) > 1e-9 else 0.0
    return max(-0.5, min(0.5, du)), max(-0.5, min(0.5, dv))


def _bilinear(image: np.ndarray, vs: np.ndarray, us: np.ndarray) -> np.ndarray:
    """Sample an image at fractional coordinates (clamped to the grid)."""
    h, w = image.shape
    vs = np.clip(vs, 0.0, h - 1.001)
    us = np.clip(us, 0.0, w - 1.001)
    v0 = vs.astype(int)
    u0 = us.astype(int)
    fv = vs - v0
    fu = us - u0
    return (
        image[v0, u0] * (1 - fv) * (1 - fu)
        + image[v0, u0 + 1] * (1 - fv) * fu
        + image[v0 + 1, u0] * fv * (1 - fu)
        + image[v0 + 1, u0 + 1] * fv * fu
    )


def _class_candidates(response, want_maxima, nms_radius, min_response, margin_mask):
    size = 2 * nms_radius + 1
    if want_maxima:
        extreme = ndimage.maximum_filter(response, size=size, mode="nearest")
        mask = (response == extreme) & (response > min_response) & margin_mask
    else:
        extreme = ndimage.minimum_filter(response, size=size, mode="nearest")
        mask = (response == extreme) & (response < -min_response) & margin_mask
    vs, us = np.nonzero(mask)
    return vs, us, response[vs, us]


def _greedy_suppress(vs, us, strengths, classes, nms_radius, shape):
    """One winner per suppression window across all classes.

    Candidates are ranked by mask-normalized response magnitude so blob and
    corner strengths are comparable; ties fall to smaller (v, u), then class
    order, keeping the output deterministic.
    """
    order = np.lexsort((classes, us, vs, -strengths))
    taken = np.zeros(shape, dtype=bool)
    h, w = shape
    keep = []
    for idx in order:
        v, u = int(vs[idx]), int(us[idx])
        if taken[v, u]:
            continue
        keep.append(idx)
        v0, v1 = max(0, v - nms_radius), min(h, v + nms_radius + 1)
        u0, u1 = max(0, u - nms_radius), min(w, u + nms_radius + 1)
        taken[v0:v1, u0:u1] = True
    return keep


def detect_features(
    image: np.ndarray,
    nms_radius: int = DEFAULT_NMS_RADIUS,
    max_count: int = DEFAULT_MAX_FEATURES,
    min_response: float = DEFAULT_MIN_RESPONSE,
) -> list[Feature]:
    """Detect blob and corner keypoints, strongest first.

    Local maxima and minima of each filter response form candidates in four
    classes; one winner survives per suppression window, chosen by
    mask-normalized response magnitude so a location keeps only its dominant
    interpretation. Returns an empty list on featureless or too-small
    images. Ties break toward smaller (v, u), keeping output deterministic.
    """
    img = np.asarray(image, dtype=np.float32)
    h, w = img.shape
    if h < 2 * DESCRIPTOR_MARGIN or w < 2 * DESCRIPTOR_MARGIN:
        return []

    blob = ndimage.correlate(img, BLOB_MASK, mode="nearest")
    corner = ndimage.correlate(img, CORNER_MASK, mode="nearest")
    grad_u = ndimage.correlate(img, _SOBEL_U, mode="nearest")
    grad_v = ndimage.correlate(img, _SOBEL_V, mode="nearest")

    margin_mask = np.zeros((h, w), dtype=bool)
    m = DESCRIPTOR_MARGIN
    margin_mask[m : h - m, m : w - m] = True

    blob_scale = float(np.abs(BLOB_MASK).sum())
    corner_scale = float(np.abs(CORNER_MASK).sum())
    all_vs, all_us, all_resp, all_norm, all_cls = [], [], [], [], []
    for cls_idx, (response, scale, want_maxima) in enumerate(
        (
            (blob, blob_scale, True),
            (blob, blob_scale, False),
            (corner, corner_scale, True),
            (corner, corner_scale, False),
        )
    ):
        vs, us, strengths = _class_candidates(
            response, want_maxima, nms_radius, min_response, margin_mask
        )
        all_vs.append(vs)
        all_us.append(us)
        all_resp.append(strengths)
        all_norm.append(np.abs(strengths) / scale)
        all_cls.append(np.full(len(vs), cls_idx))

    vs = np.concatenate(all_vs)
    us = np.concatenate(all_us)
    resp = np.concatenate(all_resp)
    norm = np.concatenate(all_norm)
    cls = np.concatenate(all_cls)

    features = []
    responses = (blob, blob, corner, corner)
    for idx in _greedy_suppress(vs, us, norm, cls, nms_radius, (h, w)):
        v, u, cls_idx = int(vs[idx]), int(us[idx]), int(cls[idx])
        du, dv = _subpixel_offset(responses[cls_idx], v, u)
        # sampling at the refined location keeps descriptors phase-stable
        rows = (v + dv) + DESCRIPTOR_OFFSETS[:, 0]
        cols = (u + du) + DESCRIPTOR_OFFSETS[:, 1]
        descriptor = np.concatenate([_bilinear(grad_u, rows, cols), _bilinear(grad_v, rows, cols)])
        features.append(
            Feature(
                u + du, v + dv, FEATURE_CLASSES[cls_idx], float(resp[idx]), descriptor
            )
        )

    features.sort(key=lambda f: (-_normalized_strength(f), f.v, f.u, f.feature_class))
    return features[:max_count]


class _FeaturePack:
    """Column arrays over a feature list for vectorized candidate search."""

    def __init__(self, feats: list[Feature]):
        self.u = np.array([f.u for f in feats])
        self.v = np.array([f.v for f in feats])
        self.cls = np.array([FEATURE_CLASSES.index(f.feature_class) for f in feats])
        self.desc = (
            np.stack([f.descriptor for f in feats])
            if feats
            else np.zeros((0, 2 * len(DESCRIPTOR_OFFSETS)))
        )

    def best_match(self, feat_u, feat_v, feat_cls, feat_desc, u_lo, u_hi, v_lo, v_hi) -> int:
        """Index of the minimum-SAD candidate in the window, or -1.

        Equal costs resolve to the lowest candidate index.
        """
        window = (
            (self.cls == feat_cls)
            & (self.u >= u_lo)
            & (self.u <= u_hi)
            & (self.v >= v_lo)
            & (self.v <= v_hi)
        )
        candidates = np.nonzero(window)[0]
        if candidates.size == 0:
            return -1
        costs = np.abs(self.desc[candidates] - feat_desc).sum(axis=1)
        return int(candidates[int(np.argmin(costs))])


def circular_match(
    prev_left: list[Feature],
    prev_right: list[Feature],
    cur_left: list[Feature],
    cur_right: list[Feature],
    epipolar_tol: float = 1.0,
    min_disparity: float = DISPARITY_MIN,
    temporal_radius: float = TEMPORAL_SEARCH_RADIUS,
) -> list[QuadMatch]:
    """Match features around the four-image loop and keep closed loops only.

    Stereo legs are restricted to candidates within epipolar_tol rows and
    disparity of at least min_disparity (pass a negative min_disparity to
    admit zero-disparity rigs in tests); temporal legs search a square
    window of temporal_radius. Matching is class-gated and deterministic.
    """
    packs = {
        "pl": _FeaturePack(prev_left),
        "pr": _FeaturePack(prev_right),
        "cl": _FeaturePack(cur_left),
        "cr": _FeaturePack(cur_right),
    }
    big = 1e12
    matches = []
    for start, feat in enumerate(cur_left):
        cls = FEATURE_CLASSES.index(feat.feature_class)
        a = packs["pl"].best_match(
            feat.u, feat.v, cls, feat.descriptor,
            feat.u - temporal_radius, feat.u + temporal_radius,
            feat.v - temporal_radius, feat.v + temporal_radius,
        )
        if a < 0:
            continue
        pl = prev_left[a]
        b = packs["pr"].best_match(
            pl.u, pl.v, cls, pl.descriptor,
            -big, pl.u - min_disparity,
            pl.v - epipolar_tol, pl.v + epipolar_tol,
        )
        if b < 0:
            continue
        pr = prev_right[b]
        c = packs["cr"].best_match(
            pr.u, pr.v, cls, pr.descriptor,
            pr.u - temporal_radius, pr.u + temporal_radius,
            pr.v - temporal_radius, pr.v + temporal_radius,
        )
        if c < 0:
            continue
        cr = cur_right[c]
        d = packs["cl"].best_match(
            cr.u, cr.v, cls, cr.descriptor,
            cr.u + min_disparity, big,
            cr.v - epipolar_tol, cr.v + epipolar_tol,
        )
        if d != start:
            continue
        matches.append(
            QuadMatch(
                prev_left=np.array([pl.u, pl.v]),
                prev_right=np.array([pr.u, pr.v]),
                cur_left=np.array([feat.u, feat.v]),
                cur_right=np.array([cr.u, cr.v]),
                feature_class=feat.feature_class,
            )
        )
    return matches


def match_arrays(matches: list[QuadMatch]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(prev_left, prev_right, cur_left, cur_right) as (N, 2) arrays."""
    if not matches:
        empty = np.zeros((0, 2))
        return empty, empty.copy(), empty.copy(), empty.copy()
    return (
        np.stack([m.prev_left for m in matches]),
        np.stack([m.prev_right for m in matches]),
        np.stack([m.cur_left for m in matches]),
        np.stack([m.cur_right for m in matches]),
    )

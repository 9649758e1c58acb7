"""Rotations, rigid transforms, and rectified stereo projection.

Rotations are plain (3, 3) float arrays. A rigid transform pairs a rotation
with a translation in meters. Landmarks are (3,) or (N, 3) arrays of
camera-frame coordinates; image points are (2,) or (N, 2) arrays of pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ORTHONORMALITY_TOL = 1e-9
DISPARITY_MIN = 0.5

_IDENTITY3 = np.eye(3)
_NEAR_PI_COS = -0.999          # switch to the half-turn log branch
_SMALL_ANGLE = 1e-7
_FUSION_DEGENERATE_MARGIN = 1e-6


class BehindCameraError(ValueError):
    """Projection requested for a point at or behind the camera plane."""


class UnreliableDepthError(ValueError):
    """Triangulation with disparity too small for a usable depth."""


class DegenerateFusionError(ValueError):
    """Rotation fusion attempted on inputs separated by a half turn."""


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix of a 3-vector."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def orthonormality_residual(m: np.ndarray) -> float:
    """Max deviation of m from the rotation manifold (Gram + determinant)."""
    gram = abs(m.T @ m - _IDENTITY3).max()
    return max(gram, abs(np.linalg.det(m) - 1.0))


def is_rotation(m: np.ndarray, tol: float = ORTHONORMALITY_TOL) -> bool:
    m = np.asarray(m, dtype=float)
    return m.shape == (3, 3) and orthonormality_residual(m) <= tol


def project_to_rotation(m: np.ndarray) -> np.ndarray:
    """Nearest rotation in the Frobenius sense (polar factor via SVD)."""
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0.0:
        r = (u * np.array([1.0, 1.0, -1.0])) @ vt
    return r


def _clean_rotation(m: np.ndarray) -> np.ndarray:
    if orthonormality_residual(m) > ORTHONORMALITY_TOL:
        return project_to_rotation(m)
    return m


def so3_exp(axis_angle: np.ndarray) -> np.ndarray:
    """Rodrigues map from an axis-angle 3-vector (radians) to a rotation."""
    v = np.asarray(axis_angle, dtype=float)
    angle = math.sqrt(float(v @ v))
    k = skew(v)
    if angle < _SMALL_ANGLE:
        # series for sin(a)/a and (1-cos(a))/a^2
        return _IDENTITY3 + (1.0 - angle * angle / 6.0) * k + (0.5 - angle * angle / 24.0) * (k @ k)
    k = k / angle
    return _IDENTITY3 + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def so3_log(rotation: np.ndarray) -> np.ndarray:
    """Principal axis-angle logarithm, norm in [0, pi].

    Near a half turn the axis comes from the symmetric part of the matrix,
    using the largest diagonal entry; at exactly pi the sign is fixed so the
    first nonzero component is positive.
    """
    r = np.asarray(rotation, dtype=float)
    cos = min(1.0, max(-1.0, (np.trace(r) - 1.0) / 2.0))
    # vee(R - R^T)/2 == sin(angle) * axis
    sin_axis = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    sin = math.sqrt(float(sin_axis @ sin_axis))

    if cos > _NEAR_PI_COS:
        angle = math.atan2(sin, cos)
        if angle < _SMALL_ANGLE:
            return sin_axis * (1.0 + angle * angle / 6.0)
        return sin_axis * (angle / sin)

    # Half-turn neighbourhood: (R + R^T)/2 = cos*I + (1-cos)*a a^T is well
    # conditioned where the standard formula degrades.
    outer = ((r + r.T) * 0.5 - cos * _IDENTITY3) / (1.0 - cos)
    i = int(np.argmax(np.diag(outer)))
    axis = np.empty(3)
    axis[i] = math.sqrt(max(outer[i, i], 0.0))
    for j in range(3):
        if j != i:
            axis[j] = outer[i, j] / axis[i]
    axis /= math.sqrt(float(axis @ axis))
    if sin > 1e-9:
        if float(axis @ sin_axis) < 0.0:
            axis = -axis
    else:
        for component in axis:
            if abs(component) > 1e-12:
                if component < 0.0:
                    axis = -axis
                break
    angle = math.pi - math.asin(min(1.0, sin))
    return axis * angle


def rotation_angle(rotation: np.ndarray) -> float:
    """Geodesic angle of a rotation, in [0, pi] radians."""
    r = np.asarray(rotation, dtype=float)
    cos = (np.trace(r) - 1.0) / 2.0
    sin_axis = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return math.atan2(math.sqrt(float(sin_axis @ sin_axis)), cos)


def geodesic_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Geodesic distance between two rotations, in radians."""
    return rotation_angle(np.asarray(a).T @ np.asarray(b))


def rotation_midpoint(rf: np.ndarray, rf_prime: np.ndarray) -> np.ndarray:
    """Geodesic midpoint rf * (rf^T rf_prime)^(1/2) on the rotation group.

    The square root is taken as exp(log(.)/2) so the result stays on the
    manifold. Raises DegenerateFusionError when the inputs are a half turn
    apart and the midpoint is ambiguous.
    """
    relative = np.asarray(rf).T @ np.asarray(rf_prime)
    v = so3_log(relative)
    if math.sqrt(float(v @ v)) >= math.pi - _FUSION_DEGENERATE_MARGIN:
        raise DegenerateFusionError("rotations are a half turn apart; midpoint is ambiguous")
    return _clean_rotation(np.asarray(rf) @ so3_exp(0.5 * v))


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform: y = rotation @ x + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        """Homogeneous 4x4 form."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=float)
        return Pose(_clean_rotation(m[:3, :3].copy()), m[:3, 3].copy())

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one (3,) point or a stack of (N, 3) points."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation


def compose(a: Pose, b: Pose) -> Pose:
    """Transform applying b first, then a."""
    rotation = _clean_rotation(a.rotation @ b.rotation)
    return Pose(rotation, a.rotation @ b.translation + a.translation)


def inverse(p: Pose) -> Pose:
    rt = p.rotation.T
    return Pose(rt.copy(), -(rt @ p.translation))


def fuse_motions(tf: Pose, tf_prime: Pose) -> Pose:
    """Blend two estimates of the same motion.

    Rotation is the geodesic midpoint, translation the component-wise mean.
    tf_prime must already be expressed in the forward sense.
    """
    rotation = rotation_midpoint(tf.rotation, tf_prime.rotation)
    return Pose(rotation, 0.5 * (tf.translation + tf_prime.translation))


def translation_distance(a: Pose, b: Pose) -> float:
    return float(np.linalg.norm(a.translation - b.translation))


def pose_distance(a: Pose, b: Pose) -> tuple[float, float]:
    """(translation meters, rotation radians) separation of two transforms."""
    return translation_distance(a, b), geodesic_distance(a.rotation, b.rotation)


@dataclass(frozen=True)
class StereoRig:
    """Rectified stereo calibration shared by both pinhole cameras.

    focal and principal_point are in pixels, baseline in meters.
    image_size is (width, height); None when the calibration source does
    not carry image dimensions.
    """

    focal: float
    principal_point: tuple[float, float]
    baseline: float
    image_size: tuple[int, int] | None = None

    def __post_init__(self):
        if self.focal <= 0.0:
            raise ValueError(f"focal must be positive, got {self.focal}")
        if self.baseline <= 0.0:
            raise ValueError(f"baseline must be positive, got {self.baseline}")
        if self.image_size is not None:
            w, h = self.image_size
            cu, cv = self.principal_point
            if w <= 0 or h <= 0:
                raise ValueError(f"bad image size {self.image_size}")
            if not (0.0 <= cu < w and 0.0 <= cv < h):
                raise ValueError(f"principal point {self.principal_point} outside {self.image_size}")


def project_stereo(rig: StereoRig, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project camera-frame points into the left and right images.

    Accepts one (3,) point or a (N, 3) stack and returns pixel coordinates
    of matching shape. Raises BehindCameraError if any depth is <= 0.
    """
    p = np.asarray(points, dtype=float)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    z = p[:, 2]
    if np.any(z <= 0.0):
        raise BehindCameraError("point depth must be positive for projection")
    cu, cv = rig.principal_point
    u_left = rig.focal * p[:, 0] / z + cu
    v = rig.focal * p[:, 1] / z + cv
    u_right = u_left - rig.focal * rig.baseline / z
    left = np.stack([u_left, v], axis=1)
    right = np.stack([u_right, v], axis=1)
    if single:
        return left[0], right[0]
    return left, right


def project_stereo_masked(
    rig: StereoRig, points: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Like project_stereo but flags invalid depths instead of raising.

    Rows with depth <= 0 carry meaningless coordinates and valid=False.
    """
    p = np.atleast_2d(np.asarray(points, dtype=float))
    z = p[:, 2]
    valid = z > 1e-12
    safe_z = np.where(valid, z, 1.0)
    cu, cv = rig.principal_point
    u_left = rig.focal * p[:, 0] / safe_z + cu
    v = rig.focal * p[:, 1] / safe_z + cv
    u_right = u_left - rig.focal * rig.baseline / safe_z
    return np.stack([u_left, v], axis=1), np.stack([u_right, v], axis=1), valid


def triangulate(
    rig: StereoRig,
    left: np.ndarray,
    right: np.ndarray,
    min_disparity: float = DISPARITY_MIN,
) -> np.ndarray:
    """Back-project rectified stereo observations to camera-frame points.

    Inverse of project_stereo on the valid domain. Raises
    UnreliableDepthError when any disparity is <= min_disparity.
    """
    l = np.asarray(left, dtype=float)
    r = np.asarray(right, dtype=float)
    single = l.ndim == 1
    l = np.atleast_2d(l)
    r = np.atleast_2d(r)
    disparity = l[:, 0] - r[:, 0]
    if np.any(disparity <= min_disparity):
        raise UnreliableDepthError(
            f"disparity <= {min_disparity} px gives no reliable depth"
        )
    cu, cv = rig.principal_point
    z = rig.focal * rig.baseline / disparity
    x = (l[:, 0] - cu) * z / rig.focal
    y = (l[:, 1] - cv) * z / rig.focal
    points = np.stack([x, y, z], axis=1)
    if single:
        return points[0]
    return points


def triangulate_masked(
    rig: StereoRig,
    left: np.ndarray,
    right: np.ndarray,
    min_disparity: float = DISPARITY_MIN,
) -> tuple[np.ndarray, np.ndarray]:
    """Like triangulate but flags sub-threshold disparities instead of raising."""
    l = np.atleast_2d(np.asarray(left, dtype=float))
    r = np.atleast_2d(np.asarray(right, dtype=float))
    disparity = l[:, 0] - r[:, 0]
    valid = disparity > min_disparity
    safe = np.where(valid, disparity, 1.0)
    cu, cv = rig.principal_point
    z = rig.focal * rig.baseline / safe
    x = (l[:, 0] - cu) * z / rig.focal
    y = (l[:, 1] - cv) * z / rig.focal
    return np.stack([x, y, z], axis=1), valid

"""Trajectory containers, self-consistency measures, and ground-truth metrics.

Two families live here. The forward-backward consistency errors need no
ground truth: they multiply poses from a forward-mode run against poses
from a backward-mode run and reduce to the identity exactly when the two
modes agree. The evaluation metrics compare an estimate against ground
truth in the KITTI style (segment-relative errors plus unaligned absolute
translation RMSE).

Convention: a forward trajectory holds camera-in-world poses starting at
the identity. The backward trajectory passed to fb_rpe / fb_ape must be in
its native reversed sense, i.e. the frame-wise inverse of a forward-sense
trajectory; the CLI selfcheck performs that inversion when reading files.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Pose, compose, inverse, rotation_angle

KITTI_SEGMENT_LENGTHS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)


@dataclass
class Trajectory:
    """Time-ordered absolute poses with their frame indices."""

    poses: list[Pose]
    frame_indices: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.frame_indices:
            self.frame_indices = list(range(len(self.poses)))
        if len(self.frame_indices) != len(self.poses):
            raise ValueError("frame_indices and poses length mismatch")
        for a, b in zip(self.frame_indices, self.frame_indices[1:]):
            if b <= a:
                raise ValueError("frame indices must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        """(N, 3) stack of translation components."""
        return np.array([p.translation for p in self.poses])

    def inverted(self) -> "Trajectory":
        """Frame-wise inverse (forward sense <-> native reversed sense)."""
        return Trajectory([inverse(p) for p in self.poses], list(self.frame_indices))


def _check_aligned(forward: Trajectory, backward: Trajectory) -> None:
    if len(forward) != len(backward):
        raise ValueError(
            f"trajectory lengths differ: {len(forward)} vs {len(backward)}"
        )
    if forward.frame_indices != backward.frame_indices:
        raise ValueError("trajectories cover different frame indices")


def fb_rpe(forward: Trajectory, backward: Trajectory) -> list[Pose]:
    """Per-frame forward-backward relative pose errors.

    Element i-1 of the result combines the step of the backward chain with
    the step of the forward chain over frames (i-1, i); it is the identity
    whenever the two modes agree on that step. The backward step is taken
    in the chain's native reversed sense (B_i composed with B_{i-1}^-1).
    """
    _check_aligned(forward, backward)
    errors = []
    for i in range(1, len(forward)):
        backward_step = compose(backward.poses[i], inverse(backward.poses[i - 1]))
        forward_step = compose(inverse(forward.poses[i - 1]), forward.poses[i])
        errors.append(compose(backward_step, forward_step))
    return errors


def fb_ape(forward: Trajectory, backward: Trajectory) -> list[Pose]:
    """Per-frame forward-backward absolute pose errors.

    Element i is the product of the backward and forward absolute poses at
    frame i; identity when the backward pose is the exact inverse of the
    forward pose. Growth over time is typical but not guaranteed.
    """
    _check_aligned(forward, backward)
    return [compose(b, f) for b, f in zip(backward.poses, forward.poses)]


@dataclass
class ReliabilityReport:
    """Forward-backward consistency errors with their scalar magnitudes."""

    frame_indices: list[int]
    relative_errors: list[Pose]
    absolute_errors: list[Pose]
    relative_translation: np.ndarray
    relative_rotation: np.ndarray
    absolute_translation: np.ndarray
    absolute_rotation: np.ndarray


def reliability_report(forward: Trajectory, backward: Trajectory) -> ReliabilityReport:
    rel = fb_rpe(forward, backward)
    ab = fb_ape(forward, backward)
    return ReliabilityReport(
        frame_indices=list(forward.frame_indices),
        relative_errors=rel,
        absolute_errors=ab,
        relative_translation=np.array([np.linalg.norm(e.translation) for e in rel]),
        relative_rotation=np.array([rotation_angle(e.rotation) for e in rel]),
        absolute_translation=np.array([np.linalg.norm(e.translation) for e in ab]),
        absolute_rotation=np.array([rotation_angle(e.rotation) for e in ab]),
    )


RELIABILITY_CSV_HEADER = "frame,fb_ape_trans_m,fb_ape_rot_rad,fb_rpe_trans_m,fb_rpe_rot_rad"


def reliability_csv(report: ReliabilityReport, stride: int = 1) -> str:
    """CSV rows per frame; the relative columns are empty on the first frame."""
    lines = [RELIABILITY_CSV_HEADER]
    for row, frame in enumerate(report.frame_indices):
        if row % stride:
            continue
        rel_t = f"{report.relative_translation[row - 1]:.9g}" if row else ""
        rel_r = f"{report.relative_rotation[row - 1]:.9g}" if row else ""
        lines.append(
            f"{frame},{report.absolute_translation[row]:.9g},"
            f"{report.absolute_rotation[row]:.9g},{rel_t},{rel_r}"
        )
    return "\n".join(lines) + "\n"


@dataclass
class SegmentStats:
    length: float
    t_rel: float          # percent
    r_rel: float          # degrees per 100 m
    count: int


@dataclass
class EvaluationReport:
    """KITTI-style accuracy summary against ground truth."""

    t_rel: float                      # percent
    r_rel: float                      # degrees per 100 m
    t_abs: float = float("nan")       # meters, RMSE
    per_length: list[SegmentStats] = field(default_factory=list)

    def with_ate(self, t_abs: float) -> "EvaluationReport":
        return replace(self, t_abs=t_abs)


def _arc_lengths(trajectory: Trajectory) -> np.ndarray:
    positions = trajectory.positions()
    steps = np.linalg.norm(np.diff(positions, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def kitti_segment_errors(
    gt: Trajectory,
    est: Trajectory,
    distances: tuple[float, ...] = KITTI_SEGMENT_LENGTHS,
) -> EvaluationReport:
    """Segment-relative errors averaged over all start frames and lengths.

    For every start frame and every distance reachable along the ground
    truth arc length, the relative-pose discrepancy over the segment is
    normalized by the segment's actual ground-truth length. Lengths the
    trajectory never reaches simply contribute nothing.
    """
    _check_aligned(gt, est)
    dist = _arc_lengths(gt)
    distances = tuple(sorted(distances))
    t_ratios: dict[float, list[float]] = {d: [] for d in distances}
    r_ratios: dict[float, list[float]] = {d: [] for d in distances}
    n = len(gt)
    for first in range(n):
        inv_gt_first = inverse(gt.poses[first])
        inv_est_first = inverse(est.poses[first])
        for d in distances:
            # tiny slack keeps the boundary frame stable under float jitter
            last = int(np.searchsorted(dist, dist[first] + d - 1e-9))
            if last >= n:
                break
            actual = dist[last] - dist[first]
            if actual <= 1e-9:
                continue
            gt_rel = compose(inv_gt_first, gt.poses[last])
            est_rel = compose(inv_est_first, est.poses[last])
            err = compose(inverse(est_rel), gt_rel)
            t_ratios[d].append(float(np.linalg.norm(err.translation)) / actual)
            r_ratios[d].append(math.degrees(rotation_angle(err.rotation)) / actual)
    per_length = [
        SegmentStats(d, 100.0 * float(np.mean(t_ratios[d])), 100.0 * float(np.mean(r_ratios[d])), len(t_ratios[d]))
        for d in distances
        if t_ratios[d]
    ]
    all_t = [x for d in distances for x in t_ratios[d]]
    all_r = [x for d in distances for x in r_ratios[d]]
    if not all_t:
        return EvaluationReport(t_rel=0.0, r_rel=0.0, per_length=[])
    return EvaluationReport(
        t_rel=100.0 * float(np.mean(all_t)),
        r_rel=100.0 * float(np.mean(all_r)),
        per_length=per_length,
    )


def ate_rmse(gt: Trajectory, est: Trajectory) -> float:
    """Absolute translation RMSE without any trajectory alignment.

    Both inputs must already share the same start frame; a constant offset
    between them shows up 1:1 in the result by design.
    """
    _check_aligned(gt, est)
    diffs = gt.positions() - est.positions()
    return float(np.sqrt(np.mean(np.sum(diffs * diffs, axis=1))))


EVALUATION_CSV_HEADER = "length_m,t_rel_percent,r_rel_deg_per_100m,segment_count"


def evaluation_csv(report: EvaluationReport) -> str:
    lines = [EVALUATION_CSV_HEADER]
    for seg in report.per_length:
        lines.append(f"{seg.length:.9g},{seg.t_rel:.9g},{seg.r_rel:.9g},{seg.count}")
    return "\n".join(lines) + "\n"

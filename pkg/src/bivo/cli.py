"""Command-line front end: run odometry, evaluate, self-check, synthesize.

Commands:
  run        estimate a trajectory from a dataset or a scenario file
  eval       compare an estimated trajectory against ground truth
  selfcheck  forward-backward consistency of two trajectory files
  synth      generate a synthetic scenario (optionally rendered frames)

All trajectories written by `run` are forward-sense camera-in-world poses
in the KITTI twelve-numbers-per-line format, whatever the mode, so the
outputs of the three modes are directly comparable.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import dataset as dataio
from . import synth
from .estimator import (
    EstimationFailedError,
    EstimatorConfig,
    accumulate,
    estimate_joint,
    ransac_estimate,
)
from .features import circular_match, detect_features
from .geometry import Pose, StereoRig, inverse
from .metrics import (
    Trajectory,
    ate_rmse,
    evaluation_csv,
    kitti_segment_errors,
    reliability_csv,
    reliability_report,
)

MODES = ("forward", "backward", "joint")

# spreads the per-frame estimator seeds while staying reproducible
_FRAME_SEED_STRIDE = 7919


@dataclass
class FrameDiagnostics:
    frame: int
    n_matches: int
    forward_inliers: int | None
    forward_rms: float | None
    backward_inliers: int | None
    backward_rms: float | None
    fusion_degenerate: bool
    failed: bool
    detect_ms: float
    estimate_ms: float

    @property
    def total_ms(self) -> float:
        return self.detect_ms + self.estimate_ms


DIAGNOSTICS_CSV_HEADER = (
    "frame,n_matches,fwd_inliers,fwd_rms_px,bwd_inliers,bwd_rms_px,"
    "fusion_degenerate,failed,detect_ms,estimate_ms,total_ms"
)


def diagnostics_csv(rows: list[FrameDiagnostics]) -> str:
    def opt(x, fmt="{:.6g}"):
        return "" if x is None else fmt.format(x)

    lines = [DIAGNOSTICS_CSV_HEADER]
    for r in rows:
        lines.append(
            f"{r.frame},{r.n_matches},{opt(r.forward_inliers, '{}')},{opt(r.forward_rms)},"
            f"{opt(r.backward_inliers, '{}')},{opt(r.backward_rms)},"
            f"{int(r.fusion_degenerate)},{int(r.failed)},"
            f"{r.detect_ms:.3f},{r.estimate_ms:.3f},{r.total_ms:.3f}"
        )
    return "\n".join(lines) + "\n"


def estimate_step(rig: StereoRig, matches, mode: str, cfg: EstimatorConfig):
    """One frame pair in the requested mode.

    Returns (forward-sense step pose, diagnostics fields). A failed frame
    yields the identity step and failed=True so the run can continue.
    """
    forward_inliers = forward_rms = backward_inliers = backward_rms = None
    degenerate = False
    failed = False
    step = Pose.identity()
    try:
        if mode == "forward":
            est = ransac_estimate(rig, matches, "forward", cfg)
            step = est.pose
            forward_inliers, forward_rms = est.inliers.size, est.rms_residual
        elif mode == "backward":
            est = ransac_estimate(rig, matches, "backward", cfg)
            step = inverse(est.pose)
            backward_inliers, backward_rms = est.inliers.size, est.rms_residual
        else:
            joint = estimate_joint(rig, matches, cfg)
            step = joint.fused
            degenerate = joint.fusion_degenerate
            if joint.forward is not None:
                forward_inliers = joint.forward.inliers.size
                forward_rms = joint.forward.rms_residual
            if joint.backward is not None:
                backward_inliers = joint.backward.inliers.size
                backward_rms = joint.backward.rms_residual
    except EstimationFailedError:
        failed = True
    return step, forward_inliers, forward_rms, backward_inliers, backward_rms, degenerate, failed


def _frame_cfg(cfg: EstimatorConfig, base_seed: int, pair_index: int) -> EstimatorConfig:
    return replace(cfg, rng_seed=base_seed + _FRAME_SEED_STRIDE * pair_index)


def run_observation_sequence(
    rig: StereoRig,
    observations,
    mode: str,
    cfg: EstimatorConfig,
    base_seed: int = 0,
) -> tuple[Trajectory, list[FrameDiagnostics]]:
    """Drive the estimator over pre-matched observation batches."""
    trajectory = Trajectory([Pose.identity()])
    rows = []
    for k, obs in enumerate(observations, start=1):
        start = time.perf_counter()
        step, fi, fr, bi, br, degenerate, failed = estimate_step(
            rig, obs.quad_matches, mode, _frame_cfg(cfg, base_seed, k)
        )
        estimate_ms = 1000.0 * (time.perf_counter() - start)
        trajectory = accumulate(trajectory, step)
        rows.append(
            FrameDiagnostics(
                frame=obs.frame_index,
                n_matches=len(obs.quad_matches),
                forward_inliers=fi,
                forward_rms=fr,
                backward_inliers=bi,
                backward_rms=br,
                fusion_degenerate=degenerate,
                failed=failed,
                detect_ms=0.0,
                estimate_ms=estimate_ms,
            )
        )
    return trajectory, rows


def run_image_sequence(
    handle: dataio.DatasetHandle,
    mode: str,
    cfg: EstimatorConfig,
    base_seed: int = 0,
) -> tuple[Trajectory, list[FrameDiagnostics]]:
    """Detect, match, and estimate over an image sequence."""
    trajectory = Trajectory([Pose.identity()])
    rows = []
    left, right = handle.image_pair(0)
    t0 = time.perf_counter()
    prev_feats = (detect_features(left), detect_features(right))
    carry_ms = 1000.0 * (time.perf_counter() - t0)
    for k in range(1, handle.frame_count):
        left, right = handle.image_pair(k)
        t0 = time.perf_counter()
        cur_feats = (detect_features(left), detect_features(right))
        matches = circular_match(prev_feats[0], prev_feats[1], cur_feats[0], cur_feats[1])
        detect_ms = carry_ms + 1000.0 * (time.perf_counter() - t0)
        carry_ms = 0.0

        t0 = time.perf_counter()
        step, fi, fr, bi, br, degenerate, failed = estimate_step(
            handle.rig, matches, mode, _frame_cfg(cfg, base_seed, k)
        )
        estimate_ms = 1000.0 * (time.perf_counter() - t0)
        trajectory = accumulate(trajectory, step)
        rows.append(
            FrameDiagnostics(
                frame=k,
                n_matches=len(matches),
                forward_inliers=fi,
                forward_rms=fr,
                backward_inliers=bi,
                backward_rms=br,
                fusion_degenerate=degenerate,
                failed=failed,
                detect_ms=detect_ms,
                estimate_ms=estimate_ms,
            )
        )
        prev_feats = cur_feats
    return trajectory, rows


def _plot_trajectory(path, est: Trajectory, gt: Trajectory | None, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 6))
    p = est.positions()
    ax.plot(p[:, 0], p[:, 2], label="estimate")
    if gt is not None:
        g = gt.positions()
        ax.plot(g[:, 0], g[:, 2], "--", label="ground truth")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("z [m]")
    ax.set_title(title)
    ax.axis("equal")
    ax.legend()
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)


def _plot_error_vs_length(path, report) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    lengths = [s.length for s in report.per_length]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.plot(lengths, [s.t_rel for s in report.per_length], marker="o")
    ax1.set_xlabel("path length [m]")
    ax1.set_ylabel("translation error [%]")
    ax2.plot(lengths, [s.r_rel for s in report.per_length], marker="o")
    ax2.set_xlabel("path length [m]")
    ax2.set_ylabel("rotation error [deg/100m]")
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)


def _estimator_config(args) -> EstimatorConfig:
    return EstimatorConfig(
        ransac_iterations=args.ransac_iters,
        inlier_threshold=args.inlier_thresh,
        gn_max_iterations=args.gn_max_iters,
        min_matches=args.min_matches,
        rng_seed=args.seed,
    )


def cmd_run(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        if args.scenario:
            rig, gt, observations = synth.load_scenario(Path(args.scenario).read_text())
            trajectory, rows = run_observation_sequence(
                rig, observations, args.mode, _estimator_config(args), args.seed
            )
        else:
            handle = dataio.open_dataset(args.dataset, args.seq)
            gt = handle.ground_truth
            trajectory, rows = run_image_sequence(
                handle, args.mode, _estimator_config(args), args.seed
            )
    except (OSError, ValueError, synth.ScenarioInfeasibleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    traj_path = out / f"trajectory_{args.mode}.txt"
    traj_path.write_text(dataio.write_trajectory(trajectory))
    diag_path = out / f"diagnostics_{args.mode}.csv"
    diag_path.write_text(diagnostics_csv(rows))
    if args.plot:
        _plot_trajectory(out / f"trajectory_{args.mode}.svg", trajectory, gt, f"{args.mode} mode")

    n_failed = sum(r.failed for r in rows)
    if rows and n_failed == len(rows):
        print("error: estimation failed on every frame pair", file=sys.stderr)
        return 1
    mean_total = float(np.mean([r.total_ms for r in rows])) if rows else 0.0
    mean_est = float(np.mean([r.estimate_ms for r in rows])) if rows else 0.0
    print(f"wrote {traj_path} ({len(trajectory)} poses) and {diag_path}")
    print(
        f"mean per-frame runtime: {mean_total:.1f} ms "
        f"(estimation {mean_est:.1f} ms) over {len(rows)} frame pairs, "
        f"{n_failed} failed"
    )
    return 0


def cmd_eval(args) -> int:
    try:
        gt = dataio.read_poses(Path(args.gt).read_text())
        est = dataio.read_poses(Path(args.est).read_text())
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if len(gt) != len(est):
        print(f"error: length mismatch, {len(gt)} vs {len(est)} poses", file=sys.stderr)
        return 1
    distances = tuple(float(d) for d in args.distances.split(","))
    report = kitti_segment_errors(gt, est, distances).with_ate(ate_rmse(gt, est))
    csv_path = Path(args.csv) if args.csv else Path(args.est).with_suffix(".eval.csv")
    csv_path.write_text(evaluation_csv(report))
    if args.plot:
        _plot_error_vs_length(args.plot, report)
    print("t_rel(%) r_rel(deg/100m) t_abs(m)")
    print(f"{report.t_rel:.2f} {report.r_rel:.3f} {report.t_abs:.2f}")
    return 0


def cmd_selfcheck(args) -> int:
    try:
        forward = dataio.read_poses(Path(args.forward).read_text())
        backward_file = dataio.read_poses(Path(args.backward).read_text())
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if len(forward) != len(backward_file):
        print(
            f"error: length mismatch, {len(forward)} vs {len(backward_file)} poses",
            file=sys.stderr,
        )
        return 1
    # the consistency products take the backward chain in its native
    # reversed sense; `run` emits forward-sense files, so bridge with
    # --forward-sense when feeding its output here
    backward = backward_file.inverted() if args.forward_sense else backward_file
    report = reliability_report(forward, backward)
    csv_path = Path(args.csv) if args.csv else Path(args.forward).with_suffix(".selfcheck.csv")
    csv_path.write_text(reliability_csv(report, stride=args.stride))
    print("fb_rpe_trans(m): mean %.6g max %.6g" % (
        report.relative_translation.mean(), report.relative_translation.max(),
    ))
    print("fb_ape_trans(m): mean %.6g max %.6g" % (
        report.absolute_translation.mean(), report.absolute_translation.max(),
    ))
    print(f"wrote {csv_path}")
    return 0


def _rig_from_json(data: dict) -> StereoRig:
    if "rig" not in data:
        return synth.DEFAULT_RIG
    r = data["rig"]
    return StereoRig(
        focal=r["focal"],
        principal_point=(r["cu"], r["cv"]),
        baseline=r["baseline"],
        image_size=(r["width"], r["height"]),
    )


def cmd_synth(args) -> int:
    try:
        data = json.loads(Path(args.config).read_text())
        rig = _rig_from_json(data)
        cfg = synth.ScenarioConfig(**{k: tuple(v) if isinstance(v, list) else v
                                      for k, v in data.items() if k != "rig"})
        trajectory, observations = synth.generate_scenario(rig, cfg)
    except (OSError, ValueError, TypeError, synth.ScenarioInfeasibleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    out = Path(args.out)
    (out / "poses").mkdir(parents=True, exist_ok=True)
    (out / "scenario.txt").write_text(synth.save_scenario(rig, trajectory, observations))
    (out / "poses" / f"{args.seq}.txt").write_text(dataio.write_trajectory(trajectory))
    print(f"wrote {out / 'scenario.txt'} and ground-truth poses for seq {args.seq}")

    if args.render:
        seq_dir = out / "sequences" / args.seq
        (seq_dir / "image_0").mkdir(parents=True, exist_ok=True)
        (seq_dir / "image_1").mkdir(parents=True, exist_ok=True)
        cu, cv = rig.principal_point
        p0 = f"P0: {rig.focal:.9g} 0 {cu:.9g} 0 0 {rig.focal:.9g} {cv:.9g} 0 0 0 1 0\n"
        p1 = (
            f"P1: {rig.focal:.9g} 0 {cu:.9g} {-rig.focal * rig.baseline:.9g} "
            f"0 {rig.focal:.9g} {cv:.9g} 0 0 0 1 0\n"
        )
        (seq_dir / "calib.txt").write_text(p0 + p1)
        field = synth.render_landmark_field(rig, cfg, trajectory)
        for i, pose in enumerate(trajectory.poses):
            left, right = synth.render_stereo_pair(rig, field, pose)
            dataio.save_pgm(seq_dir / "image_0" / f"{i:06d}.pgm", left)
            dataio.save_pgm(seq_dir / "image_1" / f"{i:06d}.pgm", right)
        print(f"rendered {len(trajectory)} stereo frames under {seq_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bivo", description="bidirectional stereo visual odometry"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="estimate a trajectory")
    run.add_argument("--mode", choices=MODES, default="joint")
    source = run.add_mutually_exclusive_group(required=True)
    source.add_argument("--dataset", help="dataset root (with sequences/ and poses/)")
    source.add_argument("--scenario", help="scenario file from the synth command")
    run.add_argument("--seq", default="00", help="sequence id under the dataset root")
    run.add_argument("--out", default=".", help="output directory")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--ransac-iters", type=int, default=200)
    run.add_argument("--inlier-thresh", type=float, default=2.0)
    run.add_argument("--gn-max-iters", type=int, default=20)
    run.add_argument("--min-matches", type=int, default=6)
    run.add_argument("--plot", action="store_true", help="write a top-down SVG")
    run.set_defaults(func=cmd_run)

    ev = sub.add_parser("eval", help="evaluate a trajectory against ground truth")
    ev.add_argument("gt")
    ev.add_argument("est")
    ev.add_argument("--distances", default="100,200,300,400,500,600,700,800")
    ev.add_argument("--csv", help="per-length report path (default: <est>.eval.csv)")
    ev.add_argument("--plot", help="error-vs-length SVG path")
    ev.set_defaults(func=cmd_eval)

    sc = sub.add_parser("selfcheck", help="forward-backward consistency report")
    sc.add_argument("forward")
    sc.add_argument("backward", help="backward trajectory in native reversed sense")
    sc.add_argument("--stride", type=int, default=1)
    sc.add_argument("--csv", help="report path (default: <forward>.selfcheck.csv)")
    sc.add_argument(
        "--forward-sense",
        action="store_true",
        help="backward file is forward-sense output of `run --mode backward`",
    )
    sc.set_defaults(func=cmd_selfcheck)

    sy = sub.add_parser("synth", help="generate a synthetic scenario")
    sy.add_argument("config", help="scenario config JSON")
    sy.add_argument("out", help="output directory")
    sy.add_argument("--seq", default="00")
    sy.add_argument("--render", action="store_true", help="also render PGM frames")
    sy.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())

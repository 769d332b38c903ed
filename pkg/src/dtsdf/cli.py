"""Command-line interface: pipeline runs, rendering, evaluation, synthesis.

Exit codes: 0 success, 1 input error, 2 tracking lost under the halt policy.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .camera import Intrinsics, Pose
from .config import RunConfig
from .dataset import (
    SequenceFormatError,
    load_frames,
    load_sequence,
    read_trajectory,
    write_color_png,
    write_depth_png,
    write_trajectory,
    write_tum_sequence,
)
from .evaluation import Trajectory, memory_stats, post_fusion_mae, rpe
from .pipeline import FrameStats, TrackingLost, run_pipeline
from .render import raycast, save_direction_mask_png
from .synthetic import oracle_render, scene_from_spec, trajectory_from_spec
from .voxelgrid import DIRECTIONAL, VoxelStore


def _load_scene_spec(path):
    with open(path) as f:
        spec = json.load(f)
    scene = scene_from_spec(spec)
    timestamps, poses = trajectory_from_spec(spec.get("trajectory", {}))
    intr = None
    if "intrinsics" in spec:
        intr = Intrinsics(**spec["intrinsics"])
    seed = int(spec.get("seed", 0))
    return scene, timestamps, poses, intr, seed


def _scene_frames(scene, timestamps, poses, intrinsics, seed):
    rng = np.random.default_rng(seed)
    frames = []
    for ts, pose in zip(timestamps, poses):
        frame = oracle_render(scene, pose, intrinsics, rng=rng)
        frame.timestamp = float(ts)
        frames.append(frame)
    return frames


def _gather_input(config: RunConfig):
    """Frames, ground truth, and intrinsics from a dataset dir or scene spec."""
    if (config.dataset is None) == (config.scene is None):
        raise ValueError("exactly one of 'dataset' or 'scene' must be configured")
    if config.dataset is not None:
        manifest = load_sequence(config.dataset)
        intr = config.make_intrinsics(manifest.intrinsics)
        manifest.intrinsics = intr
        frames, gt_poses = load_frames(manifest, max_dt=config.max_dt,
                                       max_frames=config.max_frames)
        gt_ts = np.array([f.timestamp for f in frames]) if gt_poses else None
        return frames, gt_ts, gt_poses, intr
    scene, ts, poses, intr, seed = _load_scene_spec(config.scene)
    intr = config.make_intrinsics(intr or _DEFAULT_SCENE_INTRINSICS)
    frames = _scene_frames(scene, ts, poses, intr, seed if config.seed == 0
                           else config.seed)
    if config.max_frames is not None:
        frames = frames[:config.max_frames]
        ts = ts[:config.max_frames]
        poses = poses[:config.max_frames]
    return frames, np.asarray(ts), list(poses), intr


_DEFAULT_SCENE_INTRINSICS = Intrinsics(fx=130.0, fy=130.0, cx=79.5, cy=59.5,
                                       width=160, height=120)


def _write_stats_csv(path, stats):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(FrameStats.CSV_FIELDS)
        for row in stats:
            writer.writerow(row.csv_row())


def cmd_run(args):
    config = RunConfig.from_file(args.config).apply_overrides(
        mode=args.mode, voxel_size=args.voxel_size, theta=args.theta,
        seed=args.seed, out=args.out)
    frames, gt_ts, gt_poses, intr = _gather_input(config)
    os.makedirs(config.out, exist_ok=True)
    config.dump(os.path.join(config.out, "config.json"))

    if config.axis_align and frames:
        # pre-rotate the map so the dominant plane is axis-aligned
        from .evaluation import estimate_axis_alignment, _rotation_between
        frames[0].compute_derived(intr)
        align = estimate_axis_alignment(
            frames[0], inlier_threshold=2 * config.voxel_size,
            seed=config.seed)
        if align.found_plane:
            first = gt_poses[0] if gt_poses else Pose.identity()
            n_world = first.rotate(align.normal)
            axis = np.zeros(3)
            ax = int(np.argmax(np.abs(n_world)))
            axis[ax] = np.sign(n_world[ax])
            pre = Pose(_rotation_between(n_world, axis), np.zeros(3))
            if gt_poses:
                gt_poses = [pre.compose(p) for p in gt_poses]
            print(f"axis alignment: rotated map by "
                  f"{np.degrees(pose_angle(pre)):.1f} deg")

    store = config.make_store()
    pipeline_cfg = config.pipeline_config(
        use_gt_poses=config.use_gt_poses,
        gt_poses=gt_poses if config.use_gt_poses else None,
        initial_pose=gt_poses[0] if gt_poses else None,
    )
    timestamps, poses, stats, _ = run_pipeline(store, frames, intr, pipeline_cfg)

    write_trajectory(os.path.join(config.out, "trajectory.txt"), timestamps, poses)
    if gt_poses:
        write_trajectory(os.path.join(config.out, "groundtruth.txt"),
                         gt_ts if gt_ts is not None else timestamps, gt_poses)
    _write_stats_csv(os.path.join(config.out, "stats.csv"), stats)
    store.save_snapshot(os.path.join(config.out, "volume.dtsv"))
    from .figures import timings_figure
    timings_figure(stats, os.path.join(config.out, "timings.png"))
    lost = sum(1 for s in stats if s.lost)
    print(f"run complete: {len(frames)} frames, {store.block_count()} blocks, "
          f"{lost} lost; outputs in {config.out}")
    return 0


def pose_angle(pose: Pose) -> float:
    cos_angle = (np.trace(pose.rotation) - 1.0) / 2.0
    return float(np.arccos(np.clip(cos_angle, -1.0, 1.0)))


def _parse_pose(text) -> Pose:
    vals = [float(x) for x in text.replace(",", " ").split()]
    if len(vals) != 7:
        raise ValueError("pose must be 'tx ty tz qx qy qz qw'")
    return Pose.from_quaternion(vals[:3], vals[3:])


def cmd_render(args):
    store = VoxelStore.load_snapshot(args.snapshot)
    if args.pose is not None:
        pose = _parse_pose(args.pose)
    else:
        ts, poses = read_trajectory(args.trajectory)
        pose = poses[args.index]
    if args.config:
        config = RunConfig.from_file(args.config)
        intr = config.make_intrinsics(_DEFAULT_SCENE_INTRINSICS)
        render_params = config.render_params()
        combine_params = config.combine_params()
    else:
        intr = _DEFAULT_SCENE_INTRINSICS
        render_params = None
        combine_params = None
    os.makedirs(args.out, exist_ok=True)
    volume = store
    if store.mode == DIRECTIONAL:
        from .combine import combine_full
        volume = combine_full(store, pose, intr, combine_params)
    rr = raycast(volume, pose, intr, render_params)
    write_depth_png(os.path.join(args.out, "depth.png"), rr.depth)
    write_color_png(os.path.join(args.out, "color.png"), rr.color)
    save_direction_mask_png(os.path.join(args.out, "directions.png"),
                            rr.direction_mask)
    print(f"rendered {int(rr.valid.sum())} valid pixels to {args.out}")
    return 0


def _read_traj(path) -> Trajectory:
    ts, poses = read_trajectory(path)
    return Trajectory(ts, poses)


def cmd_eval_rpe(args):
    est = _read_traj(args.est)
    gt = _read_traj(args.gt)
    report = rpe(est, gt, window=args.window, max_dt=args.max_dt)
    os.makedirs(args.out, exist_ok=True)
    report.write_json(os.path.join(args.out, "rpe.json"))
    report.write_csv(os.path.join(args.out, "rpe.csv"), value_name="rpe_mm")
    from .figures import per_frame_error_figure
    per_frame_error_figure(report, os.path.join(args.out, "rpe.png"),
                           f"relative pose error (window {args.window})")
    print(json.dumps(report.summary(), sort_keys=True))
    return 0


def cmd_eval_mae(args):
    config = RunConfig.from_file(args.config)
    frames, _, _, intr = _gather_input(config)
    store = VoxelStore.load_snapshot(args.snapshot)
    ts, poses = read_trajectory(args.trajectory)
    if len(poses) != len(frames):
        raise ValueError(f"trajectory has {len(poses)} poses but the input "
                         f"provides {len(frames)} frames")
    report = post_fusion_mae(store, frames, Trajectory(ts, poses), intr,
                             config.combine_params(), config.render_params())
    os.makedirs(args.out, exist_ok=True)
    report.write_json(os.path.join(args.out, "mae.json"))
    report.write_csv(os.path.join(args.out, "mae.csv"), value_name="mae_mm")
    from .figures import per_frame_error_figure
    per_frame_error_figure(report, os.path.join(args.out, "mae.png"),
                           "post-fusion depth MAE")
    print(json.dumps(report.summary(), sort_keys=True))
    return 0


def cmd_synth(args):
    scene, ts, poses, intr, seed = _load_scene_spec(args.scene)
    if args.seed is not None:
        seed = args.seed
    intr = intr or _DEFAULT_SCENE_INTRINSICS
    frames = _scene_frames(scene, ts, poses, intr, seed)
    write_tum_sequence(args.out, ts, poses, frames)
    print(f"wrote {len(frames)} frames to {args.out}")
    return 0


def cmd_stats(args):
    store = VoxelStore.load_snapshot(args.snapshot)
    stats = memory_stats(store)
    if args.compare:
        other = memory_stats(VoxelStore.load_snapshot(args.compare))
        stats["compare"] = other
        if other["block_count"]:
            stats["block_ratio"] = stats["block_count"] / other["block_count"]
    print(json.dumps(stats, indent=2, sort_keys=True))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "stats.json"), "w") as f:
            json.dump(stats, f, indent=2, sort_keys=True)
            f.write("\n")
        from .figures import memory_figure
        memory_figure(stats, os.path.join(args.out, "memory.png"),
                      compare=stats.get("compare"))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dtsdf",
        description="Directional TSDF fusion, rendering, tracking, and evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="fuse (and track) a sequence")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", choices=["regular", "directional"])
    p.add_argument("--voxel-size", type=float, dest="voxel_size")
    p.add_argument("--theta", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("render", help="raycast a volume snapshot to images")
    p.add_argument("--snapshot", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--pose", help="'tx ty tz qx qy qz qw'")
    group.add_argument("--trajectory", help="TUM trajectory file")
    p.add_argument("--index", type=int, default=0,
                   help="pose index when --trajectory is used")
    p.add_argument("--config", help="config providing intrinsics/render params")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval-rpe", help="relative pose error of a trajectory")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--window", type=int, default=30)
    p.add_argument("--max-dt", type=float, default=0.02, dest="max_dt")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_rpe)

    p = sub.add_parser("eval-mae", help="post-fusion depth MAE of a snapshot")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--config", required=True,
                   help="config naming the dataset/scene the run consumed")
    p.add_argument("--trajectory", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_mae)

    p = sub.add_parser("synth", help="materialize a scene spec as a TUM sequence")
    p.add_argument("--scene", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="allocation statistics of a snapshot")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--compare", help="second snapshot for the ratio")
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrackingLost as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, SequenceFormatError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

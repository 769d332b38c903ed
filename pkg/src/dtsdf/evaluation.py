"""Trajectory and map-quality metrics.

Covers the relative pose error over a fixed frame window, the post-fusion
per-frame mean absolute depth error (re-render the finished map at every
estimated pose and compare against the input depth), allocation statistics,
and the dominant-plane axis-alignment estimate used to pre-rotate maps.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .camera import Frame, Intrinsics, Pose
from .combine import CombineParams, combine_full
from .dataset import match_streams
from .render import RenderParams, raycast
from .voxelgrid import (
    DIRECTIONAL,
    Direction,
    REGULAR,
    VOXEL_RECORD_BYTES,
    BLOCK_VOXELS,
    VoxelStore,
)


@dataclass
class Trajectory:
    timestamps: np.ndarray
    poses: list

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if self.timestamps.size != len(self.poses):
            raise ValueError("timestamp/pose count mismatch")
        if self.timestamps.size > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")

    def __len__(self):
        return len(self.poses)


@dataclass
class MetricReport:
    values: np.ndarray
    units: str
    extras: dict = field(default_factory=dict)

    @property
    def n(self):
        return int(self.values.size)

    @property
    def mean(self):
        return float(np.mean(self.values)) if self.values.size else float("nan")

    @property
    def ci95(self):
        """1.96 * stddev / sqrt(n) over the per-frame values."""
        if self.values.size < 2:
            return 0.0
        return float(1.96 * np.std(self.values, ddof=1) / np.sqrt(self.values.size))

    def summary(self):
        out = {"mean": self.mean, "ci95": self.ci95, "n": self.n, "units": self.units}
        out.update(self.extras)
        return out

    def write_json(self, path):
        with open(path, "w") as f:
            json.dump(self.summary(), f, indent=2, sort_keys=True)
            f.write("\n")

    def write_csv(self, path, value_name="value"):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["frame_index", value_name])
            for i, v in enumerate(self.values):
                writer.writerow([i, repr(float(v))])


def _relative(a: Pose, b: Pose) -> Pose:
    return a.inverse().compose(b)


def rpe(est: Trajectory, gt: Trajectory, window: int = 30,
        max_dt: float = 0.02) -> MetricReport:
    """Relative pose error over a fixed window, in millimeters.

    For each index i with i+window in range, the error motion is
    (Q_i^-1 Q_{i+w})^-1 (P_i^-1 P_{i+w}) with Q ground truth and P estimate;
    the per-frame value is its translation norm. Gauge-invariant: a rigid
    transform applied to either whole trajectory cancels out. Rotation-angle
    statistics are reported alongside.
    """
    ei, gi = match_streams(est.timestamps, gt.timestamps, max_dt)
    if ei.size <= window:
        raise ValueError(
            f"associated trajectory of length {ei.size} is too short for "
            f"window {window}")
    trans = []
    rots = []
    for k in range(ei.size - window):
        p_rel = _relative(est.poses[ei[k]], est.poses[ei[k + window]])
        q_rel = _relative(gt.poses[gi[k]], gt.poses[gi[k + window]])
        err = _relative(q_rel, p_rel)
        trans.append(np.linalg.norm(err.translation) * 1000.0)
        cos_angle = (np.trace(err.rotation) - 1.0) / 2.0
        rots.append(np.arccos(np.clip(cos_angle, -1.0, 1.0)))
    trans = np.asarray(trans)
    rots = np.asarray(rots)
    rot_ci = (1.96 * np.std(rots, ddof=1) / np.sqrt(rots.size)) if rots.size > 1 else 0.0
    return MetricReport(values=trans, units="mm", extras={
        "window": window,
        "rotation_mean_rad": float(np.mean(rots)),
        "rotation_ci95_rad": float(rot_ci),
    })


def post_fusion_mae(store: VoxelStore, frames: list[Frame], trajectory: Trajectory,
                    intrinsics: Intrinsics, combine_params: CombineParams | None = None,
                    render_params: RenderParams | None = None) -> MetricReport:
    """Per-frame mean absolute depth error of the finished map, in millimeters.

    After fusing the whole sequence, every estimated pose gets a fresh render
    (directional stores are recombined at that pose, bypassing the
    conditional triggers) compared to the input depth over mutually valid
    pixels. Frames without coverage are skipped and counted.
    """
    if len(frames) != len(trajectory):
        raise ValueError("one pose per frame required")
    combine_params = combine_params or CombineParams()
    render_params = render_params or RenderParams()
    values = []
    skipped = 0
    for frame, pose in zip(frames, trajectory.poses):
        if store.mode == DIRECTIONAL:
            volume = combine_full(store, pose, intrinsics, combine_params)
        else:
            volume = store
        rendered = raycast(volume, pose, intrinsics, render_params)
        mutual = rendered.valid & (frame.depth > 0)
        if not np.any(mutual):
            skipped += 1
            continue
        values.append(np.mean(np.abs(rendered.depth[mutual] - frame.depth[mutual]))
                      * 1000.0)
    report = MetricReport(values=np.asarray(values), units="mm",
                          extras={"skipped_frames": skipped,
                                  "zero_coverage": len(values) == 0})
    return report


def memory_stats(store: VoxelStore) -> dict:
    """Exact allocation statistics of a store."""
    rows = store.all_rows()
    per_direction = {d.name: 0 for d in Direction}
    if rows.size:
        dirs, counts = np.unique(store.keys[rows, 3], return_counts=True)
        for d, c in zip(dirs, counts):
            per_direction[Direction(int(d)).name] = int(c)
    blocks = int(rows.size)
    return {
        "mode": store.mode,
        "voxel_size": store.voxel_size,
        "block_count": blocks,
        "voxel_count": blocks * BLOCK_VOXELS,
        "bytes": blocks * BLOCK_VOXELS * VOXEL_RECORD_BYTES,
        "per_direction": per_direction,
    }


@dataclass
class AxisAlignment:
    pose: Pose
    found_plane: bool
    inlier_fraction: float = 0.0
    normal: np.ndarray | None = None


def estimate_axis_alignment(frame: Frame, inlier_threshold: float,
                            iterations: int = 200, seed: int = 0,
                            min_inlier_fraction: float = 0.2,
                            max_points: int = 20_000) -> AxisAlignment:
    """Rotation aligning the frame's dominant plane normal to the nearest axis.

    Seeded RANSAC plane fit on the vertex map; returns identity with
    found_plane=False when the input is degenerate or no plane reaches the
    inlier floor.
    """
    if frame.vertex_map is None:
        raise ValueError("frame is missing the vertex map; call compute_derived first")
    pts = frame.vertex_map[frame.depth > 0]
    if pts.shape[0] < 3:
        return AxisAlignment(pose=Pose.identity(), found_plane=False)
    rng = np.random.default_rng(seed)
    if pts.shape[0] > max_points:
        pts = pts[rng.choice(pts.shape[0], size=max_points, replace=False)]

    best_count = 0
    best = None
    n_pts = pts.shape[0]
    for _ in range(iterations):
        idx = rng.choice(n_pts, size=3, replace=False)
        p0, p1, p2 = pts[idx]
        n = np.cross(p1 - p0, p2 - p0)
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            continue
        n = n / norm
        count = int(np.count_nonzero(np.abs((pts - p0) @ n) < inlier_threshold))
        if count > best_count:
            best_count = count
            best = (p0, n)

    if best is None or best_count < min_inlier_fraction * n_pts:
        return AxisAlignment(pose=Pose.identity(), found_plane=False,
                             inlier_fraction=best_count / n_pts if n_pts else 0.0)

    # refine on the inlier set: smallest singular vector of the centered points
    p0, n = best
    inliers = pts[np.abs((pts - p0) @ n) < inlier_threshold]
    centroid = inliers.mean(axis=0)
    _, _, vt = np.linalg.svd(inliers - centroid, full_matrices=False)
    n = vt[-1]
    if n @ best[1] < 0:
        n = -n

    axis = int(np.argmax(np.abs(n)))
    target = np.zeros(3)
    target[axis] = np.sign(n[axis])
    rot = _rotation_between(n, target)
    return AxisAlignment(pose=Pose(rot, np.zeros(3)), found_plane=True,
                         inlier_fraction=best_count / n_pts, normal=n)


def _rotation_between(a, b):
    """Minimal rotation taking unit vector a to unit vector b (Rodrigues)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    v = np.cross(a, b)
    s = np.linalg.norm(v)
    c = float(a @ b)
    if s < 1e-12:
        if c > 0:
            return np.eye(3)
        # antiparallel: rotate half a turn about any perpendicular axis
        helper = np.array([1.0, 0, 0]) if abs(a[0]) < 0.9 else np.array([0, 1.0, 0])
        axis = np.cross(a, helper)
        axis /= np.linalg.norm(axis)
        return _rodrigues(axis, np.pi)
    axis = v / s
    return _rodrigues(axis, np.arctan2(s, c))


def _rodrigues(axis, angle):
    k = np.array([[0, -axis[2], axis[1]],
                  [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)

"""End-to-end per-frame loop: combine, render, track, allocate, fuse.

Frame 0 is fused at the initial pose. Every later frame first refreshes the
view-dependent combined TSDF (full recombination when a trigger fires,
incremental update of changed blocks otherwise), renders the model from the
last pose, tracks against it, and fuses at the tracked pose. Regular-mode
stores skip combination and are raycast directly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .camera import Frame, Intrinsics, Pose
from .combine import (
    CombineParams,
    CombineState,
    combine_full,
    combine_incremental,
    should_recombine,
)
from .fusion import FusionParams, allocate_for_frame, fuse_frame
from .render import RenderParams, raycast, render_pyramid
from .tracking import IcpParams, TrackResult, track
from .voxelgrid import DIRECTIONAL, VoxelStore


class TrackingLost(RuntimeError):
    """Raised when tracking fails and the policy is to halt."""


@dataclass
class PipelineConfig:
    fusion: FusionParams = field(default_factory=FusionParams)
    combine: CombineParams = field(default_factory=CombineParams)
    icp: IcpParams = field(default_factory=IcpParams)
    render: RenderParams = field(default_factory=RenderParams)
    initial_pose: Pose | None = None
    use_gt_poses: bool = False
    gt_poses: list | None = None
    on_lost: str = "fuse-skip"  # or "halt"
    recycle_every: int = 0
    normal_depth_jump: float | None = None  # None: use the truncation distance
    bilateral_filter: bool = False


@dataclass
class FrameStats:
    index: int
    timestamp: float
    recombined: bool = False
    tracked: bool = False
    converged: bool = True
    lost: bool = False
    inlier_fraction: float = 0.0
    residual: float = 0.0
    blocks: int = 0
    recycled: int = 0
    t_allocate: float = 0.0
    t_fuse: float = 0.0
    t_combine: float = 0.0
    t_raycast: float = 0.0
    t_track: float = 0.0

    CSV_FIELDS = ("index", "timestamp", "recombined", "tracked", "converged",
                  "lost", "inlier_fraction", "residual", "blocks", "recycled",
                  "t_allocate", "t_fuse", "t_combine", "t_raycast", "t_track")

    def csv_row(self):
        return [getattr(self, f) for f in self.CSV_FIELDS]


def run_pipeline(store: VoxelStore, frames: list[Frame], intrinsics: Intrinsics,
                 config: PipelineConfig | None = None):
    """Run fusion (and tracking unless ground-truth poses are supplied).

    Returns (timestamps, poses, stats, changed_keys_of_last_frame). Poses are
    world-from-camera, one per frame; with the fuse-skip policy a lost frame
    carries the previous pose forward and is flagged in its stats row.
    """
    if not frames:
        raise ValueError("frame list is empty")
    config = config or PipelineConfig()
    if config.use_gt_poses and (config.gt_poses is None
                                or len(config.gt_poses) != len(frames)):
        raise ValueError("use_gt_poses requires one ground-truth pose per frame")

    directional = store.mode == DIRECTIONAL
    normal_jump = (config.normal_depth_jump if config.normal_depth_jump is not None
                   else store.trunc_dist)
    state = CombineState()
    volume = None
    changed = np.empty(0, dtype=np.int64)
    pose = config.initial_pose if config.initial_pose is not None else Pose.identity()

    timestamps = []
    poses = []
    stats: list[FrameStats] = []

    for i, frame in enumerate(frames):
        st = FrameStats(index=i, timestamp=frame.timestamp)
        if frame.vertex_map is None or frame.normal_map is None:
            frame.compute_derived(intrinsics, normal_depth_jump=normal_jump,
                                  bilateral=config.bilateral_filter)

        fuse_this_frame = True
        if config.use_gt_poses:
            pose = config.gt_poses[i]
        elif i > 0:
            last_pose = pose
            if directional:
                t0 = time.perf_counter()
                if volume is None or should_recombine(state, last_pose, config.combine):
                    volume = combine_full(store, last_pose, intrinsics,
                                          config.combine, frame_index=i)
                    state.mark_combined(last_pose)
                    st.recombined = True
                else:
                    combine_incremental(volume, store, changed, intrinsics,
                                        config.combine)
                st.t_combine = time.perf_counter() - t0
                target = volume
            else:
                target = store

            t0 = time.perf_counter()
            rendered = raycast(target, last_pose, intrinsics, config.render)
            model = render_pyramid(rendered, config.icp.levels)
            st.t_raycast = time.perf_counter() - t0

            t0 = time.perf_counter()
            result: TrackResult = track(frame, model, init=last_pose,
                                        params=config.icp, intrinsics=intrinsics)
            st.t_track = time.perf_counter() - t0
            st.tracked = True
            st.converged = result.converged
            st.inlier_fraction = result.inlier_fraction
            st.residual = result.mean_residual
            if result.converged:
                pose = result.pose
            else:
                st.lost = True
                if config.on_lost == "halt":
                    stats.append(st)
                    raise TrackingLost(
                        f"tracking lost at frame {i}: {result.message}")
                fuse_this_frame = False  # fuse-skip: carry the pose forward

        if fuse_this_frame:
            t0 = time.perf_counter()
            allocate_for_frame(store, frame, pose, config.fusion)
            st.t_allocate = time.perf_counter() - t0
            t0 = time.perf_counter()
            fstats = fuse_frame(store, frame, pose, intrinsics, config.fusion)
            st.t_fuse = time.perf_counter() - t0
            changed = fstats.changed_packed
        else:
            changed = np.empty(0, dtype=np.int64)

        if config.recycle_every > 0 and (i + 1) % config.recycle_every == 0:
            st.recycled = store.recycle_free_blocks()

        st.blocks = store.block_count()
        state.advance()
        timestamps.append(frame.timestamp)
        poses.append(pose)
        stats.append(st)

    return np.asarray(timestamps), poses, stats, changed

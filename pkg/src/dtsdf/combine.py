"""View-dependent combination of the directional volumes into a single TSDF.

For a fixed camera position the six directional channels can be merged into
one conflict-free regular TSDF: each directional voxel contributes with a
weight built from its local SDF gradient (does the stored surface actually
face this camera?), falling back to the direction's axis vector where no
gradient is defined. The result is raycastable like a plain TSDF but is only
valid near the pose it was combined for, so recombination is triggered by
small-motion bounds and staleness counters rather than every frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Intrinsics, Pose, pose_delta
from .fusion import direction_weight
from .voxelgrid import (
    BLOCK_VOXELS,
    DIRECTION_VECTORS,
    DIRECTIONAL,
    Direction,
    REGULAR,
    VoxelStore,
    pack_keys,
    unpack_keys,
)

_AXIS_NEIGHBOR_OFFSETS = np.array([
    [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1],
], dtype=np.int64)


@dataclass
class CombineParams:
    """Recombination triggers and combination constants."""

    boot_frames: int = 5
    stale_frames: int = 50
    max_translation: float = 0.05
    max_rotation: float = 0.05 * np.pi / 2
    frustum_margin_frac: float = 0.125
    eps_grad: float = 1e-6
    max_distance: float = 5.0
    mask_rel_threshold: float = 0.1


@dataclass
class CombineState:
    """Counters driving conditional recombination."""

    frames_since_start: int = 0
    frames_since_last_update: int = 0
    last_pose: Pose | None = None

    def advance(self):
        self.frames_since_start += 1
        self.frames_since_last_update += 1

    def mark_combined(self, pose: Pose):
        self.frames_since_last_update = 0
        self.last_pose = pose


def should_recombine(state: CombineState, pose: Pose,
                     params: CombineParams | None = None) -> bool:
    """Whether the combined TSDF must be rebuilt for the given camera pose.

    True during boot-up, after going stale, or when the camera moved beyond
    the small-motion bounds since the last combination.
    """
    params = params or CombineParams()
    if state.frames_since_start < params.boot_frames:
        return True
    if state.frames_since_last_update > params.stale_frames:
        return True
    if state.last_pose is None:
        return True
    dt, dr = pose_delta(pose, state.last_pose)
    return dt > params.max_translation or dr > params.max_rotation


class CombinedVolume(VoxelStore):
    """Pose-stamped single-channel TSDF blended from the directional store.

    Serializes through the regular-mode snapshot format; the per-voxel
    direction mask records which channels contributed (bit d set when
    direction d exceeded the relative-weight threshold).
    """

    _ARRAY_FIELDS = VoxelStore._ARRAY_FIELDS + ("dir_mask",)

    def __init__(self, voxel_size: float, trunc_dist: float, dir_threshold: float,
                 stamped_pose: Pose, frame_of_combination: int = 0,
                 max_blocks: int = 200_000):
        self.dir_mask = np.zeros((64, BLOCK_VOXELS), dtype=np.uint8)
        super().__init__(mode=REGULAR, voxel_size=voxel_size, trunc_dist=trunc_dist,
                         dir_threshold=dir_threshold, max_blocks=max_blocks)
        self.stamped_pose = stamped_pose
        self.frame_of_combination = frame_of_combination

    def direction_mask_at(self, voxel_indices):
        g = np.asarray(voxel_indices, dtype=np.int64)
        block = g >> 3
        local = g - (block << 3)
        flat = local[..., 0] + 8 * local[..., 1] + 64 * local[..., 2]
        packed = pack_keys(block, np.full(g.shape[:-1], int(Direction.UNDIRECTED),
                                          dtype=np.int64))
        rows = self._index.lookup(packed)
        present = rows >= 0
        out = self.dir_mask[np.where(present, rows, 0), flat]
        return np.where(present, out, 0).astype(np.uint8)


def _padded_block_field(store: VoxelStore, rows, dir_code):
    """Block SDF/observed with one-voxel face padding from neighbor blocks.

    Returns float sdf and bool observed arrays of shape (n, 10, 10, 10) in
    (z, y, x) axis order; only face pads are filled, which is all central
    differences need.
    """
    n = rows.size
    sdf = np.zeros((n, 10, 10, 10))
    obs = np.zeros((n, 10, 10, 10), dtype=bool)
    w = store.weight[rows].reshape(n, 8, 8, 8)
    sdf[:, 1:9, 1:9, 1:9] = store.sdf[rows].reshape(n, 8, 8, 8)
    obs[:, 1:9, 1:9, 1:9] = w > 0
    base = store.keys[rows, :3].astype(np.int64) * 8  # (n, 3) in (x, y, z)
    j, i = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
    face = np.stack([i.ravel(), j.ravel()], axis=-1)  # (64, 2) fast/slow in-face axes
    # axis: 0=x, 1=y, 2=z; padded layout indexes (z, y, x)
    for axis in range(3):
        others = [a for a in range(3) if a != axis]
        for side, coord in ((0, -1), (1, 8)):
            g = np.empty((n, 64, 3), dtype=np.int64)
            g[..., axis] = base[:, None, axis] + coord
            g[..., others[0]] = base[:, None, others[0]] + face[None, :, 0]
            g[..., others[1]] = base[:, None, others[1]] + face[None, :, 1]
            s, o = store.gather_sdf(g.reshape(-1, 3), dir_code)
            # the (slow, fast) in-face axes line up with the padded layout
            s = s.reshape(n, 8, 8)
            o = o.reshape(n, 8, 8)
            pad_idx = 0 if side == 0 else 9
            if axis == 0:
                sdf[:, 1:9, 1:9, pad_idx] = s
                obs[:, 1:9, 1:9, pad_idx] = o
            elif axis == 1:
                sdf[:, 1:9, pad_idx, 1:9] = s
                obs[:, 1:9, pad_idx, 1:9] = o
            else:
                sdf[:, pad_idx, 1:9, 1:9] = s
                obs[:, pad_idx, 1:9, 1:9] = o
    return sdf, obs


def _direction_combine_weights(store: VoxelStore, rows, dir_code, rays,
                               eps_grad: float):
    """Combination weight of every voxel of the given directional rows.

    rays: unit view directions camera->voxel, shape (n, 512, 3). Uses the
    central-difference gradient at integer voxel positions (the six axis
    neighbors); where the gradient is undefined or vanishes, the direction's
    axis vector replaces it without the membership factor.
    """
    w_d = store.weight[rows].astype(np.float64)
    observed = w_d > 0
    n = rows.size

    sdf_pad, obs_pad = _padded_block_field(store, rows, dir_code)
    grads = np.empty((n, 8, 8, 8, 3))
    grads[..., 0] = (sdf_pad[:, 1:9, 1:9, 2:] - sdf_pad[:, 1:9, 1:9, :-2]) / 2.0
    grads[..., 1] = (sdf_pad[:, 1:9, 2:, 1:9] - sdf_pad[:, 1:9, :-2, 1:9]) / 2.0
    grads[..., 2] = (sdf_pad[:, 2:, 1:9, 1:9] - sdf_pad[:, :-2, 1:9, 1:9]) / 2.0
    defined = (obs_pad[:, 1:9, 1:9, 2:] & obs_pad[:, 1:9, 1:9, :-2]
               & obs_pad[:, 1:9, 2:, 1:9] & obs_pad[:, 1:9, :-2, 1:9]
               & obs_pad[:, 2:, 1:9, 1:9] & obs_pad[:, :-2, 1:9, 1:9])
    grads = grads.reshape(n, BLOCK_VOXELS, 3)
    defined = defined.reshape(n, BLOCK_VOXELS) & observed

    norm = np.linalg.norm(grads, axis=-1)
    have_grad = defined & (norm > eps_grad)
    n_hat = grads / np.where(norm > 0, norm, 1.0)[..., None]

    w_dir = direction_weight(n_hat, dir_code, store.dir_threshold)
    facing = np.maximum(np.sum(n_hat * -rays, axis=-1), 0.0)
    w_gradient = w_dir * facing * w_d

    axis_facing = np.maximum(-(rays @ DIRECTION_VECTORS[int(dir_code)]), 0.0)
    w_fallback = w_d * axis_facing

    w = np.where(have_grad, w_gradient, w_fallback)
    return np.where(observed, w, 0.0)


def _unit_rays(centers, cam_center):
    r = centers - np.asarray(cam_center, dtype=np.float64)
    rn = np.linalg.norm(r, axis=-1)
    return r / np.where(rn > 0, rn, 1.0)[..., None]


def combination_weight(store: VoxelStore, dir_code, point, camera_center,
                       eps_grad: float = 1e-6) -> float:
    """Combination weight of the single voxel whose center is at point."""
    from .voxelgrid import voxel_index_of_world

    g = voxel_index_of_world(np.asarray(point, dtype=np.float64)[None, :],
                             store.voxel_size)[0]
    block = g >> 3
    packed = pack_keys(block[None, :], np.array([int(dir_code)]))
    row = store.rows_of(packed)[0]
    if row < 0:
        raise ValueError("voxel is not allocated for this direction")
    local = g - (block << 3)
    flat = int(local[0] + 8 * local[1] + 64 * local[2])
    if store.weight[row, flat] <= 0:
        raise ValueError("voxel is unobserved for this direction")
    rows = np.array([row])
    rays = _unit_rays(store.voxel_centers_world(rows), camera_center)
    w = _direction_combine_weights(store, rows, dir_code, rays, eps_grad)
    return float(w[0, flat])


def _voxel_frustum_mask(centers, pose: Pose, intrinsics: Intrinsics,
                        params: CombineParams, trunc_dist: float):
    """Which voxel centers fall inside the expanded camera frustum."""
    cam = (centers - pose.translation) @ pose.rotation
    z = cam[..., 2]
    front = z > 1e-9
    zsafe = np.where(front, z, 1.0)
    u = cam[..., 0] / zsafe * intrinsics.fx + intrinsics.cx
    v = cam[..., 1] / zsafe * intrinsics.fy + intrinsics.cy
    mu = intrinsics.width * params.frustum_margin_frac
    mv = intrinsics.height * params.frustum_margin_frac
    return (front & (z <= params.max_distance + trunc_dist)
            & (u >= -mu) & (u < intrinsics.width + mu)
            & (v >= -mv) & (v < intrinsics.height + mv))


def _spatial_keys_in_frustum(store: VoxelStore, pose: Pose, intrinsics: Intrinsics,
                             params: CombineParams):
    """Spatial (direction-stripped) block keys with any corner near the frustum."""
    rows = store.all_rows()
    if rows.size == 0:
        return np.empty(0, dtype=np.int64)
    coords = store.keys[rows, :3].astype(np.int64)
    spatial = np.unique(pack_keys(coords, np.full(rows.size, int(Direction.UNDIRECTED))))
    s_coords, _ = unpack_keys(spatial)
    bs = store.block_size
    corners = (s_coords.astype(np.float64)[:, None, :] + np.array(
        [[i, j, k] for k in (0, 1) for j in (0, 1) for i in (0, 1)],
        dtype=np.float64)[None, :, :]) * bs
    keep = np.any(_voxel_frustum_mask(corners, pose, intrinsics, params,
                                      store.trunc_dist), axis=1)
    return spatial[keep]


def _recombine_spatial_blocks(volume: CombinedVolume, store: VoxelStore,
                              spatial_packed, pose: Pose, intrinsics: Intrinsics,
                              params: CombineParams) -> int:
    """Recompute combined entries for the given spatial blocks at pose."""
    if spatial_packed.size == 0:
        return 0
    spatial_packed = np.unique(spatial_packed)
    volume.allocate_packed(spatial_packed)
    vol_rows = volume.rows_of(spatial_packed)
    volume._reset_rows(vol_rows)

    s_coords, _ = unpack_keys(spatial_packed)
    n = spatial_packed.size
    num_sdf = np.zeros((n, BLOCK_VOXELS))
    num_col = np.zeros((n, BLOCK_VOXELS, 3))
    den = np.zeros((n, BLOCK_VOXELS))
    max_w = np.zeros((n, BLOCK_VOXELS))
    per_dir = []

    # geometry shared by all six directions of a spatial block
    from .voxelgrid import _LOCAL_OFFSETS
    centers_all = (s_coords.astype(np.float64) * store.block_size)[:, None, :] \
        + _LOCAL_OFFSETS[None, :, :] * store.voxel_size
    rays_all = _unit_rays(centers_all, pose.translation)
    frustum_all = _voxel_frustum_mask(centers_all, pose, intrinsics, params,
                                      store.trunc_dist)

    for d in range(6):
        dir_rows = store.rows_of(pack_keys(s_coords, np.full(n, d)))
        present = dir_rows >= 0
        if not np.any(present):
            per_dir.append(None)
            continue
        rows_d = dir_rows[present]
        idx = np.nonzero(present)[0]
        w = _direction_combine_weights(store, rows_d, Direction(d), rays_all[idx],
                                       params.eps_grad)
        w *= frustum_all[idx]
        num_sdf[idx] += w * store.sdf[rows_d]
        num_col[idx] += w[..., None] * store.color[rows_d]
        den[idx] += w
        max_w[idx] = np.maximum(max_w[idx], w)
        per_dir.append((idx, w))

    observed = den > 0
    safe_den = np.where(observed, den, 1.0)
    volume.sdf[vol_rows] = np.where(observed, num_sdf / safe_den, 0.0)
    volume.weight[vol_rows] = np.where(observed, den, 0.0)
    volume.color[vol_rows] = np.where(observed[..., None], num_col / safe_den[..., None], 0.0)
    volume.color_weight[vol_rows] = volume.weight[vol_rows]

    mask = np.zeros((n, BLOCK_VOXELS), dtype=np.uint8)
    for d, entry in enumerate(per_dir):
        if entry is None:
            continue
        idx, w = entry
        bit = (w > params.mask_rel_threshold * max_w[idx]) & (w > 0)
        mask[idx] |= bit.astype(np.uint8) << d
    volume.dir_mask[vol_rows] = mask
    return int(np.count_nonzero(observed))


def combine_full(store: VoxelStore, pose: Pose, intrinsics: Intrinsics,
                 params: CombineParams | None = None,
                 frame_index: int = 0) -> CombinedVolume:
    """Build the combined TSDF for every directional voxel near the frustum.

    The frustum is expanded by the configured margin (one eighth of the image
    size per side) so small camera motions stay inside the combined volume
    until a recombination trigger fires.
    """
    if store.mode != DIRECTIONAL:
        raise ValueError("combination requires a directional store; "
                         "regular stores are raycast directly")
    params = params or CombineParams()
    volume = CombinedVolume(voxel_size=store.voxel_size, trunc_dist=store.trunc_dist,
                            dir_threshold=store.dir_threshold, stamped_pose=pose,
                            frame_of_combination=frame_index,
                            max_blocks=max(store.max_blocks, 1))
    spatial = _spatial_keys_in_frustum(store, pose, intrinsics, params)
    _recombine_spatial_blocks(volume, store, spatial, pose, intrinsics, params)
    return volume


def combine_incremental(volume: CombinedVolume, store: VoxelStore, changed_packed,
                        intrinsics: Intrinsics,
                        params: CombineParams | None = None) -> int:
    """Refresh combined entries for blocks whose directional data changed.

    Recomputes the changed spatial blocks and their face neighbors (whose
    gradients may have moved) at the volume's stamped pose, so the result
    matches a full recombination at that pose. Newly observed blocks are
    added to the volume here. Returns the number of observed combined voxels
    recomputed.
    """
    params = params or CombineParams()
    changed_packed = np.asarray(changed_packed, dtype=np.int64)
    if changed_packed.size == 0:
        return 0
    coords, _ = unpack_keys(changed_packed)
    coords = np.unique(coords, axis=0)
    # gradients reach one voxel across block faces
    neighborhood = (coords[:, None, :]
                    + np.concatenate([np.zeros((1, 3), dtype=np.int64),
                                      _AXIS_NEIGHBOR_OFFSETS])[None, :, :])
    neighborhood = neighborhood.reshape(-1, 3)
    spatial = np.unique(pack_keys(
        neighborhood, np.full(neighborhood.shape[0], int(Direction.UNDIRECTED))))
    # only blocks that exist in some direction can contribute
    present = np.zeros(spatial.shape[0], dtype=bool)
    s_coords, _ = unpack_keys(spatial)
    for d in range(6):
        present |= store.rows_of(pack_keys(s_coords, np.full(spatial.shape[0], d))) >= 0
    spatial = spatial[present]
    if spatial.size == 0:
        return 0
    pose = volume.stamped_pose
    bs = store.block_size
    s2_coords, _ = unpack_keys(spatial)
    corners = (s2_coords.astype(np.float64)[:, None, :] + np.array(
        [[i, j, k] for k in (0, 1) for j in (0, 1) for i in (0, 1)],
        dtype=np.float64)[None, :, :]) * bs
    keep = np.any(_voxel_frustum_mask(corners, pose, intrinsics, params,
                                      store.trunc_dist), axis=1)
    spatial = spatial[keep]
    return _recombine_spatial_blocks(volume, store, spatial, pose, intrinsics, params)

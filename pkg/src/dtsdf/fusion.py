"""Depth and color integration into the voxel store.

Fusion is a weighted cumulative moving average per voxel. Each allocated
voxel in the camera frustum is projected into the frame, associated with its
nearest pixel, and updated from that pixel's depth point, normal, and color.
Measurements more than one truncation distance in front of the surface take
the free-space carving path instead, guarded against depth discontinuities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import Frame, Intrinsics, Pose
from .voxelgrid import (
    BLOCK_SIDE,
    DIRECTED,
    DIRECTION_VECTORS,
    DIRECTIONAL,
    Direction,
    REGULAR,
    VoxelStore,
    pack_keys,
)


@dataclass
class FusionParams:
    """Tunables of the integration pass.

    dir_threshold and trunc_dist default to the store's values when None.
    carve_guard_radius is the pixel radius of the depth-discontinuity check
    that must pass before a free-space update is applied.
    """

    carve_weight: float = 1.0
    carve_guard_radius: int = 2
    max_integration_distance: float = 5.0
    dir_threshold: float | None = None
    trunc_dist: float | None = None

    def resolve(self, store: VoxelStore):
        theta = self.dir_threshold if self.dir_threshold is not None else store.dir_threshold
        trunc = self.trunc_dist if self.trunc_dist is not None else store.trunc_dist
        if not np.pi / 4 < theta <= np.pi / 2:
            raise ValueError("direction threshold must lie in (pi/4, pi/2]")
        if self.carve_guard_radius < 0:
            raise ValueError("carve_guard_radius must be >= 0")
        return theta, trunc


@dataclass
class FusionStats:
    fused_voxels: int = 0
    carved_voxels: int = 0
    newly_observed_voxels: int = 0
    changed_packed: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))


def direction_weight(normals, direction, threshold: float):
    """Membership weight in [0, 1] of surface normals for one direction slot.

    With alpha the angle between the normal and the direction's axis vector,
    the weight is clamp((threshold - alpha) / (2*threshold - pi/2), 0, 1):
    1 on the exclusive region alpha <= pi/2 - threshold, linear down to 0 at
    alpha = threshold. Two adjacent directions sum to 1 across their overlap
    for normals in a coordinate plane.
    """
    if threshold <= np.pi / 4:
        raise ValueError("direction threshold must exceed pi/4 (degenerate overlap)")
    n = np.asarray(normals, dtype=np.float64)
    cosa = np.clip(n @ DIRECTION_VECTORS[int(direction)], -1.0, 1.0)
    alpha = np.arccos(cosa)
    return np.clip((threshold - alpha) / (2.0 * threshold - np.pi / 2.0), 0.0, 1.0)


def direction_weights(normals, threshold: float):
    """Membership weights for all six directions: shape (..., 6)."""
    if threshold <= np.pi / 4:
        raise ValueError("direction threshold must exceed pi/4 (degenerate overlap)")
    n = np.asarray(normals, dtype=np.float64)
    cosa = np.clip(n @ DIRECTION_VECTORS.T, -1.0, 1.0)
    alpha = np.arccos(cosa)
    return np.clip((threshold - alpha) / (2.0 * threshold - np.pi / 2.0), 0.0, 1.0)


def point_plane_sdf(p, x, n, trunc_dist: float):
    """Signed distance of voxel centers x to the tangent plane at p, in
    truncation units: <p - x, n> / trunc. Unclamped; values > 1 classify the
    voxel as observed free space."""
    p = np.asarray(p, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.sum((p - x) * n, axis=-1) / trunc_dist


def behind_surface_ramp(d):
    """Down-weight of measurements behind the surface: 1 for d >= 0, linear
    to 0.25 at d = -1."""
    d = np.asarray(d, dtype=np.float64)
    return np.where(d >= 0.0, 1.0, 1.0 + 0.75 * np.maximum(d, -1.0))


def depth_fusion_weight(normal, view_ray, d):
    """Base fusion weight: observation-angle cosine times the behind-surface
    ramp. The directional membership factor is applied by the caller in
    directional mode."""
    n = np.asarray(normal, dtype=np.float64)
    r = np.asarray(view_ray, dtype=np.float64)
    cos_view = np.maximum(np.sum(n * -r, axis=-1), 0.0)
    return cos_view * behind_surface_ramp(d)


def color_weight(w_new, p, x, trunc_dist: float):
    """Color confidence: the depth weight faded by distance of the voxel from
    the measured point, reaching 0 at one truncation distance."""
    dist = np.linalg.norm(np.asarray(p, dtype=np.float64) - np.asarray(x, dtype=np.float64),
                          axis=-1)
    return np.asarray(w_new, dtype=np.float64) * (1.0 - np.minimum(1.0, dist / trunc_dist))


def carve_guard_mask(depth, trunc_dist: float, radius: int):
    """Pixels where free-space carving is allowed: no depth difference larger
    than trunc_dist within the given pixel radius. Invalid neighbors block
    carving; outside the image the edge value is replicated."""
    depth = np.asarray(depth, dtype=np.float64)
    valid = depth > 0
    if radius <= 0:
        return valid.copy()
    hi = np.where(valid, depth, np.inf)
    lo = np.where(valid, depth, -np.inf)
    h, w = depth.shape
    wmax = np.full_like(depth, -np.inf)
    wmin = np.full_like(depth, np.inf)
    for dv in range(-radius, radius + 1):
        for du in range(-radius, radius + 1):
            vs = np.clip(np.arange(h) + dv, 0, h - 1)
            us = np.clip(np.arange(w) + du, 0, w - 1)
            wmax = np.maximum(wmax, hi[vs][:, us])
            wmin = np.minimum(wmin, lo[vs][:, us])
    return valid & (wmax - depth <= trunc_dist) & (depth - wmin <= trunc_dist)


def _frame_pixel_data(frame: Frame, pose: Pose, params: FusionParams, theta, trunc,
                      directional: bool):
    """Per-pixel quantities shared by allocation and fusion."""
    if frame.vertex_map is None or frame.normal_map is None:
        raise ValueError("frame is missing derived vertex/normal maps; "
                         "call Frame.compute_derived first")
    depth = frame.depth
    normal_valid = np.linalg.norm(frame.normal_map, axis=-1) > 0.5
    valid = (depth > 0) & (depth <= params.max_integration_distance) & normal_valid

    points_w = frame.vertex_map @ pose.rotation.T + pose.translation
    normals_w = frame.normal_map @ pose.rotation.T
    # observation-angle cosine, computed in the camera frame
    vnorm = np.linalg.norm(frame.vertex_map, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        rays_c = frame.vertex_map / np.where(vnorm > 0, vnorm, 1.0)[..., None]
    cos_view = np.maximum(-np.sum(frame.normal_map * rays_c, axis=-1), 0.0)

    dir_w = direction_weights(normals_w, theta) if directional else None
    guard = carve_guard_mask(depth, trunc, params.carve_guard_radius)
    return valid, points_w, normals_w, cos_view, dir_w, guard


def allocate_for_frame(store: VoxelStore, frame: Frame, pose: Pose,
                       params: FusionParams | None = None) -> int:
    """Allocate blocks along the truncation band of every valid measurement.

    For each valid pixel with a valid normal, the segment of one truncation
    distance on either side of the depth point along the view ray is sampled
    and all intersected blocks are allocated: in directional mode one entry
    per direction with positive membership weight, otherwise the undirected
    entry. Returns the number of newly allocated blocks.
    """
    params = params or FusionParams()
    theta, trunc = params.resolve(store)
    directional = store.mode == DIRECTIONAL
    valid, points_w, normals_w, _, dir_w, _ = _frame_pixel_data(
        frame, pose, params, theta, trunc, directional)

    p = points_w[valid]
    if p.size == 0:
        return 0
    rays = p - pose.translation
    rays /= np.linalg.norm(rays, axis=-1, keepdims=True)

    n_steps = int(np.ceil(2.0 * trunc / (0.5 * store.voxel_size))) + 1
    ts = np.linspace(-trunc, trunc, n_steps)
    samples = p[:, None, :] + rays[:, None, :] * ts[None, :, None]  # (N, S, 3)
    blocks = np.floor(samples / store.block_size).astype(np.int64)

    if not directional:
        packed = pack_keys(blocks.reshape(-1, 3),
                           np.full(blocks.shape[0] * n_steps, int(Direction.UNDIRECTED)))
        return store.allocate_packed(packed)

    dir_w_valid = dir_w[valid]  # (N, 6)
    chunks = []
    for d in DIRECTED:
        mask = dir_w_valid[:, d] > 0
        if not np.any(mask):
            continue
        blk = blocks[mask].reshape(-1, 3)
        chunks.append(pack_keys(blk, np.full(blk.shape[0], int(d))))
    if not chunks:
        return 0
    return store.allocate_packed(np.concatenate(chunks))


def _candidate_rows(store: VoxelStore, pose: Pose, intrinsics: Intrinsics,
                    max_distance: float, margin_px: float = 1.0):
    """Rows whose block could project into the image (corner-based cull)."""
    rows = store.all_rows()
    if rows.size == 0:
        return rows
    origin = store.block_origin_world(rows)
    bs = store.block_size
    corners = origin[:, None, :] + (np.array(
        [[i, j, k] for k in (0, 1) for j in (0, 1) for i in (0, 1)], dtype=np.float64)
        * bs)[None, :, :]
    cam = (corners - pose.translation) @ pose.rotation
    z = cam[..., 2]
    in_front = z > 1e-6
    any_front = np.any(in_front, axis=1)
    if not np.any(any_front):
        return rows[:0]
    rows = rows[any_front]
    cam, z, in_front = cam[any_front], z[any_front], in_front[any_front]

    zsafe = np.where(in_front, z, 1.0)
    u = np.where(in_front, cam[..., 0] / zsafe * intrinsics.fx + intrinsics.cx, np.nan)
    v = np.where(in_front, cam[..., 1] / zsafe * intrinsics.fy + intrinsics.cy, np.nan)
    # a block whose corners straddle the camera plane may project outside the
    # finite corner box; keep it whenever any corner is in front and close
    straddles = ~np.all(in_front, axis=1)
    umin, umax = np.nanmin(u, axis=1), np.nanmax(u, axis=1)
    vmin, vmax = np.nanmin(v, axis=1), np.nanmax(v, axis=1)
    zmin = np.min(np.where(in_front, z, np.inf), axis=1)
    overlap = ((zmin <= max_distance)
               & (straddles | ((umax >= -margin_px) & (umin < intrinsics.width + margin_px)
                               & (vmax >= -margin_px) & (vmin < intrinsics.height + margin_px))))
    return rows[overlap]


def fuse_frame(store: VoxelStore, frame: Frame, pose: Pose, intrinsics: Intrinsics,
               params: FusionParams | None = None, chunk_rows: int = 1024) -> FusionStats:
    """Integrate one frame into the store by voxel projection.

    Voxels associated with a pixel more than one truncation distance in front
    of the measured surface are carved toward free space (subject to the
    discontinuity guard, with no directional factor); voxels within the band
    are fused by weighted running average of SDF and color. Returns statistics
    including the keys of all blocks whose contents changed.
    """
    params = params or FusionParams()
    theta, trunc = params.resolve(store)
    directional = store.mode == DIRECTIONAL
    valid, points_w, normals_w, cos_view, dir_w, guard = _frame_pixel_data(
        frame, pose, params, theta, trunc, directional)

    stats = FusionStats()
    rows_all = _candidate_rows(store, pose, intrinsics,
                               params.max_integration_distance + trunc)
    if rows_all.size == 0:
        return stats

    h, w = frame.depth.shape
    changed_rows = []
    t_w = pose.translation
    max_w = store.max_weight

    for start in range(0, rows_all.size, chunk_rows):
        rows = rows_all[start:start + chunk_rows]
        centers = store.voxel_centers_world(rows)  # (M, 512, 3)
        cam = (centers - t_w) @ pose.rotation
        z = cam[..., 2]
        front = z > 1e-6
        zsafe = np.where(front, z, 1.0)
        u = np.rint(np.where(front, cam[..., 0] / zsafe * intrinsics.fx + intrinsics.cx, -1.0))
        v = np.rint(np.where(front, cam[..., 1] / zsafe * intrinsics.fy + intrinsics.cy, -1.0))
        in_img = front & (u >= 0) & (u < w) & (v >= 0) & (v < h)
        if not np.any(in_img):
            continue
        ui = np.where(in_img, u, 0).astype(np.int64)
        vi = np.where(in_img, v, 0).astype(np.int64)

        # compress to voxels whose associated pixel carries a measurement
        ir, iv = np.nonzero(in_img & valid[vi, ui])
        if ir.size == 0:
            continue
        u_s = ui[ir, iv]
        v_s = vi[ir, iv]
        p = points_w[v_s, u_s]
        n = normals_w[v_s, u_s]
        c = centers[ir, iv]
        # frame normals face the camera; the point-to-plane distance wants the
        # surface-inward normal so that the free-space side comes out positive
        d = np.sum((c - p) * n, axis=-1) / trunc

        carve = guard[v_s, u_s] & (d > 1.0)
        w_meas = cos_view[v_s, u_s] * behind_surface_ramp(d)
        if directional:
            w_meas = w_meas * dir_w[v_s, u_s, store.keys[rows, 3][ir]]
        fuse = (d >= -1.0) & (d <= 1.0) & (w_meas > 0)

        upd = carve | fuse
        if not np.any(upd):
            continue
        sel = np.nonzero(upd)[0]
        rws = rows[ir[sel]]
        vx = iv[sel]
        # one shared running-average update: carving contributes value +1 at
        # constant weight, the in-band path the clamped distance at w_meas
        meas_sdf = np.where(carve[sel], 1.0, np.clip(d[sel], -1.0, 1.0))
        meas_w = np.where(carve[sel], params.carve_weight, w_meas[sel])

        w_old = store.weight[rws, vx].astype(np.float64)
        new_w = w_old + meas_w
        store.sdf[rws, vx] = (store.sdf[rws, vx] * w_old + meas_sdf * meas_w) / new_w
        store.weight[rws, vx] = np.minimum(new_w, max_w)

        stats.carved_voxels += int(np.count_nonzero(carve))
        stats.fused_voxels += int(np.count_nonzero(fuse))
        stats.newly_observed_voxels += int(np.count_nonzero(w_old <= 0))
        store.carve_passes[np.unique(rows[ir[carve]])] += 1
        changed_rows.append(np.unique(rws))

        if frame.color is not None and np.any(fuse):
            fs = np.nonzero(fuse)[0]
            dist = np.linalg.norm(p[fs] - c[fs], axis=-1)
            wc = w_meas[fs] * (1.0 - np.minimum(1.0, dist / trunc))
            has_c = wc > 0
            if np.any(has_c):
                cs = fs[has_c]
                rws_c = rows[ir[cs]]
                vx_c = iv[cs]
                c_px = frame.color[v_s[cs], u_s[cs]]
                wc_old = store.color_weight[rws_c, vx_c].astype(np.float64)
                new_wc = wc_old + wc[has_c]
                store.color[rws_c, vx_c] = (
                    store.color[rws_c, vx_c] * wc_old[:, None]
                    + c_px * wc[has_c][:, None]) / new_wc[:, None]
                store.color_weight[rws_c, vx_c] = np.minimum(new_wc, max_w)

    if changed_rows:
        rows = np.concatenate(changed_rows)
        stats.changed_packed = pack_keys(store.keys[rows, :3].astype(np.int64),
                                         store.keys[rows, 3].astype(np.int64))
    return stats

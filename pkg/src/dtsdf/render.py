"""Per-pixel raycasting of a (combined or regular) TSDF into image maps.

Rays march from the near plane: large steps through unobserved space,
SDF-proportional steps inside the positive band, and a fixed-point refinement
on the interpolated SDF once the first positive-to-negative transition
between observed samples is found.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .camera import Intrinsics, Pose, compute_normals, pose_delta
from .combine import CombinedVolume, CombineParams
from .voxelgrid import DIRECTIONAL, Direction, VoxelStore, voxel_index_of_world


@dataclass
class RenderParams:
    near: float = 0.1
    max_range: float = 6.0
    refine_iterations: int = 8
    refine_tol_voxels: float = 0.1
    unobserved_step_frac: float = 0.8   # of the truncation distance
    min_step_frac: float = 0.5          # of the voxel size


@dataclass
class RenderResult:
    """Rendered model maps in the world frame; invalid pixels have depth 0."""

    depth: np.ndarray
    vertex_map: np.ndarray
    normal_map: np.ndarray
    color: np.ndarray
    direction_mask: np.ndarray
    valid: np.ndarray
    pose: Pose
    intrinsics: Intrinsics


def _pixel_rays(pose: Pose, intrinsics: Intrinsics):
    """Unit world-frame ray directions and the z component of the camera ray."""
    h, w = intrinsics.height, intrinsics.width
    v, u = np.mgrid[0:h, 0:w]
    d_cam = np.stack([(u - intrinsics.cx) / intrinsics.fx,
                      (v - intrinsics.cy) / intrinsics.fy,
                      np.ones((h, w))], axis=-1).reshape(-1, 3)
    norm = np.linalg.norm(d_cam, axis=-1)
    d_cam_unit = d_cam / norm[:, None]
    d_world = d_cam_unit @ pose.rotation.T
    return d_world, d_cam_unit[:, 2]


def raycast(volume: VoxelStore, pose: Pose, intrinsics: Intrinsics,
            params: RenderParams | None = None) -> RenderResult:
    """Render depth, vertices, normals, color, and contributing directions.

    volume is a combined TSDF or a regular-mode store; directional stores
    must be combined first. When a combined volume is rendered from a pose
    outside its small-motion validity bounds a warning is emitted.
    """
    params = params or RenderParams()
    if volume.mode == DIRECTIONAL:
        raise ValueError("raycast needs a regular or combined volume; "
                         "run the view combination on directional stores first")
    if isinstance(volume, CombinedVolume):
        bounds = CombineParams()
        dt, dr = pose_delta(volume.stamped_pose, pose)
        if dt > bounds.max_translation or dr > bounds.max_rotation:
            warnings.warn(
                f"raycast pose is {dt:.3f} m / {dr:.3f} rad from the combination "
                "pose; the combined volume may be stale", stacklevel=2)

    h, w = intrinsics.height, intrinsics.width
    n = h * w
    dirs, ray_z = _pixel_rays(pose, intrinsics)
    origin = pose.translation

    trunc = volume.trunc_dist
    vs = volume.voxel_size
    min_step = params.min_step_frac * vs
    unobs_step = params.unobserved_step_frac * trunc
    tol = params.refine_tol_voxels * vs / trunc

    t = np.full(n, params.near / np.maximum(ray_z, 1e-6))
    t_prev = t.copy()
    prev_sdf = np.zeros(n)
    prev_obs = np.zeros(n, dtype=bool)
    hit_t = np.zeros(n)
    found = np.zeros(n, dtype=bool)
    alive = t * ray_z <= params.max_range

    while np.any(alive):
        idx = np.nonzero(alive)[0]
        p = origin + dirs[idx] * t[idx, None]
        # cheap gate: skip the 8-corner interpolation in unallocated space
        near_block = volume.any_block_at(p)
        sdf = np.zeros(idx.size)
        obs = np.zeros(idx.size, dtype=bool)
        if np.any(near_block):
            sdf[near_block], _, obs[near_block] = volume.trilinear(
                p[near_block], Direction.UNDIRECTED)

        transition = obs & prev_obs[idx] & (prev_sdf[idx] > 0) & (sdf <= 0)
        hit_idx = idx[transition]
        # start the refinement at the secant point of the bracketing samples
        s0 = prev_sdf[hit_idx]
        s1 = sdf[transition]
        frac = s0 / np.maximum(s0 - s1, 1e-12)
        hit_t[hit_idx] = t_prev[hit_idx] + frac * (t[hit_idx] - t_prev[hit_idx])
        found[hit_idx] = True
        alive[hit_idx] = False

        step = np.where(obs,
                        np.where(sdf > 0, np.maximum(min_step, sdf * trunc), min_step),
                        unobs_step)
        cont = idx[~transition]
        prev_sdf[cont] = sdf[~transition]
        prev_obs[cont] = obs[~transition]
        t_prev[cont] = t[cont]
        t[cont] += step[~transition]
        dead = cont[t[cont] * ray_z[cont] > params.max_range]
        alive[dead] = False

    # fixed-point refinement on the interpolated SDF from the negative sample
    if np.any(found):
        ridx = np.nonzero(found)[0]
        t_r = hit_t[ridx].copy()
        converged = np.zeros(ridx.size, dtype=bool)
        failed = np.zeros(ridx.size, dtype=bool)
        for _ in range(params.refine_iterations):
            open_ = ~converged & ~failed
            if not np.any(open_):
                break
            p = origin + dirs[ridx[open_]] * t_r[open_, None]
            sdf, _, obs = volume.trilinear(p, Direction.UNDIRECTED)
            sub_fail = ~obs
            sub_conv = obs & (np.abs(sdf) <= tol)
            move = obs & ~sub_conv
            upd = t_r[open_]
            upd[move] += sdf[move] * trunc
            t_r[open_] = upd
            full = np.nonzero(open_)[0]
            failed[full[sub_fail]] = True
            converged[full[sub_conv]] = True
        good = converged & ~failed & (t_r > 0)
        found[ridx[~good]] = False
        hit_t[ridx] = t_r

    depth = np.zeros(n)
    vertex = np.zeros((n, 3))
    normal = np.zeros((n, 3))
    color = np.zeros((n, 3))
    dmask = np.zeros(n, dtype=np.uint8)
    valid = found.copy()

    if np.any(found):
        fidx = np.nonzero(found)[0]
        pts = origin + dirs[fidx] * hit_t[fidx, None]

        # gradient of the interpolated field at half-voxel offsets
        grad = np.zeros((fidx.size, 3))
        grad_ok = np.ones(fidx.size, dtype=bool)
        for axis in range(3):
            for sign, slot in ((1.0, 0), (-1.0, 1)):
                off = np.zeros(3)
                off[axis] = sign * 0.5 * vs
                s, _, obs = volume.trilinear(pts + off, Direction.UNDIRECTED)
                grad[:, axis] += sign * s
                grad_ok &= obs
        gnorm = np.linalg.norm(grad, axis=-1)
        grad_ok &= gnorm > 1e-12
        nrm = grad / np.where(gnorm > 0, gnorm, 1.0)[:, None]
        # a usable surface normal faces the camera
        grad_ok &= np.sum(nrm * -dirs[fidx], axis=-1) > 0

        col, col_ok = volume.sample_color(pts, Direction.UNDIRECTED)
        msk = volume.direction_mask_at(voxel_index_of_world(pts, vs))

        keep = grad_ok
        sel = fidx[keep]
        depth[sel] = hit_t[sel] * ray_z[sel]
        vertex[sel] = pts[keep]
        normal[sel] = nrm[keep]
        color[sel] = np.where(col_ok[keep, None], col[keep], 0.0)
        dmask[sel] = msk[keep]
        valid[:] = False
        valid[sel] = True

    return RenderResult(
        depth=depth.reshape(h, w),
        vertex_map=vertex.reshape(h, w, 3),
        normal_map=normal.reshape(h, w, 3),
        color=color.reshape(h, w, 3),
        direction_mask=dmask.reshape(h, w),
        valid=valid.reshape(h, w),
        pose=pose,
        intrinsics=intrinsics,
    )


DIRECTION_COLORS = np.array([
    [0.90, 0.10, 0.10],  # X+
    [0.10, 0.90, 0.90],  # X-
    [0.10, 0.80, 0.10],  # Y+
    [0.85, 0.10, 0.85],  # Y-
    [0.15, 0.25, 0.95],  # Z+
    [0.95, 0.85, 0.10],  # Z-
])


def direction_mask_palette():
    """RGB palette for all 64 direction-bit combinations; mixtures blend."""
    palette = np.zeros((64, 3))
    for mask in range(1, 64):
        active = [d for d in range(6) if mask & (1 << d)]
        palette[mask] = DIRECTION_COLORS[active].mean(axis=0)
    return palette


def save_direction_mask_png(path, mask):
    """Write the contributing-direction map as an indexed-color PNG."""
    from PIL import Image

    palette = (direction_mask_palette() * 255.0 + 0.5).astype(np.uint8)
    img = Image.fromarray(np.asarray(mask, dtype=np.uint8), mode="P")
    img.putpalette(np.concatenate([palette, np.zeros((256 - 64, 3), dtype=np.uint8)])
                   .astype(np.uint8).tobytes())
    img.save(path)


def downsample_depth(depth, valid):
    """Half-resolution depth averaging valid pixels of each 2x2 cell."""
    h, w = depth.shape
    h2, w2 = h // 2, w // 2
    d = depth[:h2 * 2, :w2 * 2].reshape(h2, 2, w2, 2)
    m = valid[:h2 * 2, :w2 * 2].reshape(h2, 2, w2, 2)
    cnt = m.sum(axis=(1, 3))
    tot = np.where(m, d, 0.0).sum(axis=(1, 3))
    out = np.where(cnt > 0, tot / np.maximum(cnt, 1), 0.0)
    return out, cnt > 0


def render_pyramid(result: RenderResult, levels: int, normal_depth_jump: float = 0.1):
    """Multi-resolution model maps: level 0 is the input, each further level
    halves resolution with valid-aware depth averaging and fresh normals."""
    if levels < 1:
        raise ValueError("pyramid needs at least one level")
    max_levels = int(np.floor(np.log2(min(result.intrinsics.width,
                                          result.intrinsics.height))))
    if levels > max_levels:
        raise ValueError(f"{levels} pyramid levels exceed log2 of the smaller "
                         f"image dimension ({max_levels})")
    out = [result]
    depth, valid = result.depth, result.valid
    for lv in range(1, levels):
        depth, valid = downsample_depth(depth, valid)
        intr = result.intrinsics.scaled(2 ** lv)
        vmap_cam = np.zeros(depth.shape + (3,))
        vv, uu = np.mgrid[0:intr.height, 0:intr.width]
        vmap_cam[..., 0] = (uu - intr.cx) * depth / intr.fx
        vmap_cam[..., 1] = (vv - intr.cy) * depth / intr.fy
        vmap_cam[..., 2] = depth
        vmap_cam = np.where(valid[..., None], vmap_cam, 0.0)
        nmap_cam = compute_normals(vmap_cam, max_depth_jump=normal_depth_jump)
        vertex_w = np.where(valid[..., None],
                            vmap_cam @ result.pose.rotation.T + result.pose.translation,
                            0.0)
        normal_w = nmap_cam @ result.pose.rotation.T
        out.append(RenderResult(
            depth=depth,
            vertex_map=vertex_w,
            normal_map=normal_w,
            color=np.zeros(depth.shape + (3,)),
            direction_mask=np.zeros(depth.shape, dtype=np.uint8),
            valid=valid,
            pose=result.pose,
            intrinsics=intr,
        ))
    return out

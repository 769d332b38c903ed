"""Frame-to-model camera tracking: projective point-to-plane ICP.

The incoming depth frame is registered against raycast model maps with
coarse-to-fine Gauss-Newton on the 6-dof twist. Correspondences come from
projective association into the model camera; the normal equations are the
standard point-to-plane system J = [n; p x n] per correspondence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Frame, Intrinsics, Pose, compute_normals, orthonormalize_rotation
from .render import RenderResult, downsample_depth


@dataclass
class IcpParams:
    levels: int = 3
    iterations: tuple = (10, 7, 4)  # coarse to fine
    distance_threshold: float = 0.1
    normal_threshold: float = np.deg2rad(20.0)
    convergence_eps: float = 1e-5
    min_inlier_fraction: float = 0.1
    # an exactly planar scene measures ~1e-35 here; weakly constrained but
    # solvable geometry sits around 1e-7
    degeneracy_ratio: float = 1e-10

    def __post_init__(self):
        if self.levels != len(self.iterations):
            raise ValueError("levels must match the iterations schedule length")
        if min(self.levels, min(self.iterations), 1) < 1:
            raise ValueError("levels and iterations must be positive")


@dataclass
class TrackResult:
    pose: Pose
    converged: bool
    inlier_fraction: float = 0.0
    mean_residual: float = float("inf")
    degenerate: bool = False
    message: str = ""


def _frame_pyramid(frame: Frame, intrinsics: Intrinsics, levels: int,
                   normal_depth_jump: float = 0.1):
    """Camera-frame vertex/normal maps of the input frame per pyramid level."""
    out = []
    depth, valid = frame.depth, frame.depth > 0
    for lv in range(levels):
        intr = intrinsics.scaled(2 ** lv) if lv else intrinsics
        if lv:
            depth, valid = downsample_depth(depth, valid)
        vv, uu = np.mgrid[0:intr.height, 0:intr.width]
        vmap = np.stack([(uu - intr.cx) * depth / intr.fx,
                         (vv - intr.cy) * depth / intr.fy,
                         depth], axis=-1)
        vmap = np.where(valid[..., None], vmap, 0.0)
        nmap = compute_normals(vmap, max_depth_jump=normal_depth_jump)
        out.append((vmap, nmap, valid))
    return out


def _associate_and_accumulate(vmap, nmap, valid, model: RenderResult, pose: Pose,
                              params: IcpParams):
    """Project frame points into the model maps and build the 6x6 system.

    Returns (A, b, n_pairs, n_valid, sq_residual_sum, pairs) where pairs holds
    the correspondence arrays needed to re-evaluate the residual after a pose
    update.
    """
    ok = valid & (np.linalg.norm(nmap, axis=-1) > 0.5)
    p_cam = vmap[ok]
    n_cam = nmap[ok]
    n_valid = int(np.count_nonzero(ok))
    if n_valid == 0:
        return None

    p_w = p_cam @ pose.rotation.T + pose.translation
    n_w = n_cam @ pose.rotation.T

    mp = model.pose
    intr = model.intrinsics
    cam = (p_w - mp.translation) @ mp.rotation
    z = cam[:, 2]
    front = z > 1e-6
    zs = np.where(front, z, 1.0)
    u = np.rint(np.where(front, cam[:, 0] / zs * intr.fx + intr.cx, -1)).astype(np.int64)
    v = np.rint(np.where(front, cam[:, 1] / zs * intr.fy + intr.cy, -1)).astype(np.int64)
    inb = front & (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
    ui = np.where(inb, u, 0)
    vi = np.where(inb, v, 0)

    q = model.vertex_map[vi, ui]
    nq = model.normal_map[vi, ui]
    pair_ok = (inb & model.valid[vi, ui]
               & (np.linalg.norm(p_w - q, axis=-1) <= params.distance_threshold)
               & (np.sum(n_w * nq, axis=-1) >= np.cos(params.normal_threshold)))
    if not np.any(pair_ok):
        return (np.zeros((6, 6)), np.zeros(6), 0, n_valid, 0.0, None)

    p = p_w[pair_ok]
    qv = q[pair_ok]
    nv = nq[pair_ok]
    r = np.sum((p - qv) * nv, axis=-1)
    jac = np.concatenate([nv, np.cross(p, nv)], axis=1)  # (m, 6), twist (t, w)
    a_mat = jac.T @ jac
    b_vec = -jac.T @ r
    return a_mat, b_vec, int(p.shape[0]), n_valid, float(r @ r), (p_cam[pair_ok], qv, nv)


def _apply_twist(pose: Pose, twist) -> Pose:
    """Left-multiplied small-motion update: x' = (I + [w]x) x + t, re-orthonormalized."""
    t, w = twist[:3], twist[3:]
    skew = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
    rot = orthonormalize_rotation(np.eye(3) + skew)
    return Pose(rot @ pose.rotation, rot @ pose.translation + t)


def track(frame: Frame, model_pyramid: list[RenderResult], init: Pose,
          params: IcpParams | None = None,
          intrinsics: Intrinsics | None = None) -> TrackResult:
    """Register a frame against rendered model maps, coarse to fine.

    Residuals are monotone within a level: an update that increases the error
    on the current correspondence set is rolled back and the level ends.
    Tracking reports failure (never a fabricated pose) when the model is
    empty, inliers fall below the floor, or the normal system is degenerate.
    """
    params = params or IcpParams()
    if len(model_pyramid) < params.levels:
        raise ValueError(f"model pyramid has {len(model_pyramid)} levels, "
                         f"{params.levels} required")
    if not any(np.any(m.valid) for m in model_pyramid):
        return TrackResult(pose=init, converged=False, message="empty model")
    intr = intrinsics or model_pyramid[0].intrinsics
    frame_pyr = _frame_pyramid(frame, intr, params.levels)

    pose = init
    inlier_fraction = 0.0
    mean_residual = float("inf")
    degenerate = False
    message = ""

    for level in range(params.levels - 1, -1, -1):
        vmap, nmap, valid = frame_pyr[level]
        model = model_pyramid[level]
        iters = params.iterations[params.levels - 1 - level]
        for _ in range(iters):
            acc = _associate_and_accumulate(vmap, nmap, valid, model, pose, params)
            if acc is None:
                return TrackResult(pose=init, converged=False,
                                   message="frame has no valid points")
            a_mat, b_vec, n_pairs, n_valid, sq_sum, pairs = acc
            inlier_fraction = n_pairs / n_valid
            if inlier_fraction < params.min_inlier_fraction:
                return TrackResult(pose=pose, converged=False,
                                   inlier_fraction=inlier_fraction,
                                   mean_residual=mean_residual,
                                   message="inlier fraction below floor")
            eigvals = np.linalg.eigvalsh(a_mat)
            if eigvals[0] <= params.degeneracy_ratio * max(eigvals[-1], 1e-12):
                # a nearly rank-deficient level cannot be solved; finer
                # levels may still constrain the pose, so skip rather than abort
                degenerate = level == 0
                message = "degenerate geometry (rank-deficient system)"
                break
            degenerate = False
            message = ""
            twist = np.linalg.solve(a_mat, b_vec)
            new_pose = _apply_twist(pose, twist)

            # reject steps that increase the error on this correspondence set
            p_cam, qv, nv = pairs
            p_new = p_cam @ new_pose.rotation.T + new_pose.translation
            new_r = np.sum((p_new - qv) * nv, axis=-1)
            new_sq = float(new_r @ new_r)
            if new_sq > sq_sum:
                break
            pose = new_pose
            mean_residual = float(np.mean(np.abs(new_r)))
            if np.linalg.norm(twist) < params.convergence_eps:
                break

    converged = inlier_fraction >= params.min_inlier_fraction and not degenerate
    return TrackResult(pose=pose, converged=converged,
                       inlier_fraction=inlier_fraction,
                       mean_residual=mean_residual, degenerate=degenerate,
                       message=message)

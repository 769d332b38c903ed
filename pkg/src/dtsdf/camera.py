"""Pinhole camera model, rigid poses, and per-frame derived maps.

Coordinate conventions used throughout the package:

* Camera frame: right-handed, X right, Y down, Z forward (into the scene).
* World frame: arbitrary right-handed frame; poses are world-from-camera.
* Image frame: u right, v down, origin at the top-left pixel center.
* Depth maps hold meters; the value 0 marks an invalid measurement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics plus the raw-depth-to-meters scale."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 1.0 / 5000.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be at least 1x1, got {self.width}x{self.height}")
        if self.depth_scale <= 0:
            raise ValueError(f"depth_scale must be positive, got {self.depth_scale}")

    def project(self, points):
        """Project camera-frame points (..., 3) to pixel coordinates (..., 2).

        Callers must ensure z > 0; no validity masking happens here.
        """
        points = np.asarray(points, dtype=np.float64)
        z = points[..., 2]
        u = points[..., 0] / z * self.fx + self.cx
        v = points[..., 1] / z * self.fy + self.cy
        return np.stack([u, v], axis=-1)

    def unproject_pixel(self, u, v, z):
        """Back-project pixel (u, v) at depth z to a camera-frame point."""
        x = (np.asarray(u) - self.cx) * z / self.fx
        y = (np.asarray(v) - self.cy) * z / self.fy
        return np.stack(np.broadcast_arrays(x, y, z), axis=-1)

    def scaled(self, factor: int) -> "Intrinsics":
        """Intrinsics of the image downsampled by an integer factor.

        Uses the pixel-center convention: pixel k at the coarse level covers
        fine pixels [k*f, (k+1)*f).
        """
        f = float(factor)
        return Intrinsics(
            fx=self.fx / f,
            fy=self.fy / f,
            cx=(self.cx + 0.5) / f - 0.5,
            cy=(self.cy + 0.5) / f - 0.5,
            width=self.width // factor,
            height=self.height // factor,
            depth_scale=self.depth_scale,
        )

    def to_dict(self):
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height, "depth_scale": self.depth_scale,
        }

    @classmethod
    def from_dict(cls, d) -> "Intrinsics":
        return cls(**d)


_ORTHONORMAL_TOL = 1e-7


@dataclass(frozen=True)
class Pose:
    """Rigid world-from-camera transform: x_world = rotation @ x_camera + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if not np.allclose(r.T @ r, np.eye(3), atol=_ORTHONORMAL_TOL):
            raise ValueError("rotation is not orthonormal")
        if not np.isclose(np.linalg.det(r), 1.0, atol=_ORTHONORMAL_TOL):
            raise ValueError("rotation determinant is not +1 (improper rotation)")

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def compose(self, other: "Pose") -> "Pose":
        """self @ other as transforms (apply other first, then self)."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def transform(self, points):
        """Apply the pose to camera-frame points (..., 3)."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def rotate(self, vectors):
        """Rotate direction vectors (..., 3) without translating."""
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def to_quaternion(self):
        """Unit quaternion (qx, qy, qz, qw) of the rotation, qw >= 0."""
        return rotation_to_quaternion(self.rotation)

    @classmethod
    def from_quaternion(cls, translation, quaternion) -> "Pose":
        return cls(quaternion_to_rotation(quaternion), translation)


def rotation_to_quaternion(r):
    """Rotation matrix to unit quaternion (qx, qy, qz, qw), qw >= 0."""
    r = np.asarray(r, dtype=np.float64)
    trace = np.trace(r)
    if trace > 0:
        s = np.sqrt(trace + 1.0) * 2.0
        qw = 0.25 * s
        qx = (r[2, 1] - r[1, 2]) / s
        qy = (r[0, 2] - r[2, 0]) / s
        qz = (r[1, 0] - r[0, 1]) / s
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(r[i, i] - r[j, j] - r[k, k] + 1.0) * 2.0
        q = np.empty(4)
        q[i] = 0.25 * s
        q[3] = (r[k, j] - r[j, k]) / s
        q[j] = (r[j, i] + r[i, j]) / s
        q[k] = (r[k, i] + r[i, k]) / s
        qx, qy, qz, qw = q
    quat = np.array([qx, qy, qz, qw])
    if quat[3] < 0:
        quat = -quat
    return quat / np.linalg.norm(quat)


def quaternion_to_rotation(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0:
        raise ValueError("quaternion has zero or non-finite norm")
    x, y, z, w = q / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def orthonormalize_rotation(r):
    """Nearest rotation matrix (polar decomposition via SVD)."""
    u, _, vt = np.linalg.svd(np.asarray(r, dtype=np.float64))
    rot = u @ vt
    if np.linalg.det(rot) < 0:
        u[:, -1] = -u[:, -1]
        rot = u @ vt
    return rot


def pose_delta(a: Pose, b: Pose):
    """Translation distance (m) and relative rotation angle (rad) between two poses.

    The angle is the axis-angle magnitude of a.rotation^T @ b.rotation, in [0, pi].
    Symmetric in its arguments.
    """
    t = float(np.linalg.norm(a.translation - b.translation))
    rel = a.rotation.T @ b.rotation
    cos_angle = (np.trace(rel) - 1.0) / 2.0
    angle = float(np.arccos(np.clip(cos_angle, -1.0, 1.0)))
    return t, angle


@dataclass
class Frame:
    """One RGB-D frame with lazily derived vertex and normal maps (camera frame)."""

    timestamp: float
    depth: np.ndarray
    color: np.ndarray | None = None
    vertex_map: np.ndarray = field(default=None, repr=False)
    normal_map: np.ndarray = field(default=None, repr=False)

    @property
    def valid(self):
        return self.depth > 0

    def compute_derived(self, intrinsics: Intrinsics, normal_depth_jump: float = 0.1,
                        bilateral: bool = False):
        """Fill vertex_map and normal_map from the depth image."""
        depth = self.depth
        if bilateral:
            depth = bilateral_filter(depth)
        self.vertex_map = unproject(depth, intrinsics)
        self.normal_map = compute_normals(self.vertex_map, max_depth_jump=normal_depth_jump)
        return self


def unproject(depth, intrinsics: Intrinsics):
    """Back-project a depth map into a camera-frame vertex map.

    vertex[v, u] = ((u - cx) z / fx, (v - cy) z / fy, z); rows/cols with z == 0
    are filled with zeros and considered invalid.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (intrinsics.height, intrinsics.width):
        raise ValueError(
            f"depth shape {depth.shape} does not match intrinsics "
            f"{intrinsics.height}x{intrinsics.width}")
    v, u = np.mgrid[0:intrinsics.height, 0:intrinsics.width]
    z = depth
    x = (u - intrinsics.cx) * z / intrinsics.fx
    y = (v - intrinsics.cy) * z / intrinsics.fy
    vmap = np.stack([x, y, z], axis=-1)
    vmap[z <= 0] = 0.0
    return vmap


def compute_normals(vertex_map, max_depth_jump: float = 0.1):
    """Central-difference normals on a vertex map, oriented toward the camera.

    A pixel gets an invalid (zero) normal if any 4-neighbor is invalid or if
    either central difference jumps more than max_depth_jump in z, which keeps
    normals off depth discontinuities.
    """
    vmap = np.asarray(vertex_map, dtype=np.float64)
    h, w = vmap.shape[:2]
    normals = np.zeros_like(vmap)
    if h < 3 or w < 3:
        return normals

    valid = vmap[..., 2] > 0
    c = vmap[1:-1, 1:-1]
    dx = vmap[1:-1, 2:] - vmap[1:-1, :-2]
    dy = vmap[2:, 1:-1] - vmap[:-2, 1:-1]
    ok = (valid[1:-1, 1:-1] & valid[1:-1, 2:] & valid[1:-1, :-2]
          & valid[2:, 1:-1] & valid[:-2, 1:-1])
    ok &= (np.abs(dx[..., 2]) <= max_depth_jump) & (np.abs(dy[..., 2]) <= max_depth_jump)

    n = np.cross(dx, dy)
    norm = np.linalg.norm(n, axis=-1)
    ok &= norm > 1e-12
    with np.errstate(invalid="ignore", divide="ignore"):
        n = n / norm[..., None]
    # orient toward the camera: <n, -ray> >= 0  <=>  <n, vertex> <= 0
    flip = np.sum(n * c, axis=-1) > 0
    n[flip] = -n[flip]
    n[~ok] = 0.0
    normals[1:-1, 1:-1] = n
    return normals


def bilateral_filter(depth, radius: int = 2, sigma_space: float = 1.5,
                     sigma_depth: float = 0.03):
    """Edge-preserving depth smoothing. Invalid pixels stay invalid."""
    depth = np.asarray(depth, dtype=np.float64)
    valid = depth > 0
    acc = np.zeros_like(depth)
    wacc = np.zeros_like(depth)
    h, w = depth.shape
    for dv in range(-radius, radius + 1):
        for du in range(-radius, radius + 1):
            sv = slice(max(dv, 0), h + min(dv, 0))
            su = slice(max(du, 0), w + min(du, 0))
            tv = slice(max(-dv, 0), h + min(-dv, 0))
            tu = slice(max(-du, 0), w + min(-du, 0))
            shifted = depth[sv, su]
            ok = valid[sv, su]
            diff = shifted - depth[tv, tu]
            wgt = np.exp(-(dv * dv + du * du) / (2 * sigma_space ** 2)
                         - diff * diff / (2 * sigma_depth ** 2))
            wgt = np.where(ok, wgt, 0.0)
            acc[tv, tu] += wgt * shifted
            wacc[tv, tu] += wgt
    out = np.where((wacc > 0) & valid, acc / np.where(wacc > 0, wacc, 1.0), 0.0)
    return out

"""Analytic test scenes: exact depth/color rendering of primitive geometry.

Every primitive has a closed-form ray intersection, so rendered depth is
exact to floating precision before optional noise. These renders provide the
ground truth for the desk-scale experiments the test suite runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import Frame, Intrinsics, Pose

_EPS = 1e-9


@dataclass
class Plane:
    """Square planar patch (infinite when extent is None)."""

    point: np.ndarray
    normal: np.ndarray
    extent: float | None = None
    color: tuple = (0.5, 0.5, 0.5)

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=np.float64)
        n = np.asarray(self.normal, dtype=np.float64)
        self.normal = n / np.linalg.norm(n)

    def intersect(self, origin, dirs):
        denom = dirs @ self.normal
        num = (self.point - origin) @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(np.abs(denom) > _EPS, num / denom, np.inf)
        t = np.where(t > _EPS, t, np.inf)
        if self.extent is not None:
            t1, t2 = _tangent_basis(self.normal)
            tq = np.where(np.isfinite(t), t, 0.0)
            q = origin + dirs * tq[..., None] - self.point
            half = self.extent / 2.0
            inside = (np.abs(q @ t1) <= half) & (np.abs(q @ t2) <= half)
            t = np.where(inside, t, np.inf)
        return t, np.broadcast_to(np.asarray(self.color, dtype=np.float64), dirs.shape).copy()


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    color: tuple = (0.5, 0.5, 0.5)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)

    def intersect(self, origin, dirs):
        oc = origin - self.center
        a = np.sum(dirs * dirs, axis=-1)
        b = 2.0 * dirs @ oc
        c = oc @ oc - self.radius ** 2
        disc = b * b - 4 * a * c
        sq = np.sqrt(np.maximum(disc, 0.0))
        t_near = (-b - sq) / (2 * a)
        t_far = (-b + sq) / (2 * a)
        t = np.where(t_near > _EPS, t_near, t_far)
        t = np.where((disc >= 0) & (t > _EPS), t, np.inf)
        return t, np.broadcast_to(np.asarray(self.color, dtype=np.float64), dirs.shape).copy()


@dataclass
class Box:
    """Axis-aligned box; face_colors (if given) order +x,-x,+y,-y,+z,-z."""

    lo: np.ndarray
    hi: np.ndarray
    color: tuple = (0.5, 0.5, 0.5)
    face_colors: np.ndarray | None = None

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if self.face_colors is not None:
            self.face_colors = np.asarray(self.face_colors, dtype=np.float64).reshape(6, 3)

    def intersect(self, origin, dirs):
        return _slab_intersect(origin, dirs, self.lo, self.hi, np.eye(3),
                               np.zeros(3), self._face_color)

    def _face_color(self, face_idx):
        if self.face_colors is None:
            return np.asarray(self.color, dtype=np.float64)[None, :].repeat(face_idx.shape[0], 0)
        return self.face_colors[face_idx]


@dataclass
class Slab:
    """Thin oriented wall: thickness along the normal, square elsewhere.

    The +normal face renders front_color, the -normal face back_color, and
    the four rim faces side_color.
    """

    center: np.ndarray
    normal: np.ndarray
    thickness: float
    extent: float
    front_color: tuple = (1.0, 0.0, 0.0)
    back_color: tuple = (0.0, 0.0, 1.0)
    side_color: tuple = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if self.thickness <= 0:
            raise ValueError("slab thickness must be positive")
        self.center = np.asarray(self.center, dtype=np.float64)
        n = np.asarray(self.normal, dtype=np.float64)
        self.normal = n / np.linalg.norm(n)

    def intersect(self, origin, dirs):
        t1, t2 = _tangent_basis(self.normal)
        axes = np.stack([self.normal, t1, t2])  # rows: local axes in world
        half = np.array([self.thickness / 2.0, self.extent / 2.0, self.extent / 2.0])
        return _slab_intersect(origin, dirs, -half, half, axes, self.center,
                               self._face_color)

    def _face_color(self, face_idx):
        # local axis 0 is the wall normal: faces 0 (+n) and 1 (-n)
        palette = np.array([self.front_color, self.back_color, self.side_color,
                            self.side_color, self.side_color, self.side_color])
        return palette[face_idx]


def _tangent_basis(normal):
    helper = np.array([0.0, 0.0, 1.0]) if abs(normal[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    t1 = np.cross(normal, helper)
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(normal, t1)
    return t1, t2


def _slab_intersect(origin, dirs, lo, hi, axes, center, face_color_fn):
    """Generic oriented-box intersection; returns (t, color) per ray.

    Rays are hit from outside at the entry face or, when the origin is inside
    the box, at the exit face (interior-view case, normal facing the camera).
    """
    o_l = (origin - center) @ axes.T
    d_l = dirs @ axes.T
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / np.where(np.abs(d_l) > _EPS, d_l, np.inf)
    ta = (lo - o_l) * inv
    tb = (hi - o_l) * inv
    # rays parallel to a slab miss it unless the origin lies inside that slab
    parallel = np.abs(d_l) <= _EPS
    inside_slab = (o_l >= lo) & (o_l <= hi)
    t_lo = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), np.minimum(ta, tb))
    t_hi = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), np.maximum(ta, tb))
    t_enter = np.max(t_lo, axis=-1)
    t_exit = np.min(t_hi, axis=-1)
    hit = t_exit >= np.maximum(t_enter, _EPS)
    use_exit = hit & (t_enter <= _EPS)
    t = np.where(use_exit, t_exit, t_enter)
    t = np.where(hit & (t > _EPS), t, np.inf)

    # face index: axis that binds the chosen t, signed by travel direction
    axis_enter = np.argmax(t_lo, axis=-1)
    axis_exit = np.argmin(t_hi, axis=-1)
    axis = np.where(use_exit, axis_exit, axis_enter)
    n_rays = dirs.shape[0]
    d_axis = d_l[np.arange(n_rays), axis]
    # entry through +face means travelling in -axis direction; exit the reverse
    positive_face = np.where(use_exit, d_axis > 0, d_axis < 0)
    face_idx = axis * 2 + np.where(positive_face, 0, 1)
    colors = face_color_fn(face_idx)
    return t, colors


@dataclass
class NoiseModel:
    """Additive Gaussian depth noise with sigma(z) = sigma0 + sigma1 * z^2."""

    sigma0: float = 0.0
    sigma1: float = 0.0

    def sigma(self, z):
        return self.sigma0 + self.sigma1 * np.asarray(z) ** 2


@dataclass
class AnalyticScene:
    primitives: list = field(default_factory=list)
    noise: NoiseModel | None = None

    def trace(self, pose: Pose, intrinsics: Intrinsics):
        """Exact per-pixel intersection: (depth, color, prim_id), prim_id -1 on miss."""
        h, w = intrinsics.height, intrinsics.width
        v, u = np.mgrid[0:h, 0:w]
        dirs_cam = np.stack([(u - intrinsics.cx) / intrinsics.fx,
                             (v - intrinsics.cy) / intrinsics.fy,
                             np.ones((h, w))], axis=-1).reshape(-1, 3)
        dirs = dirs_cam @ pose.rotation.T  # dz_cam == 1, so t equals camera depth
        origin = pose.translation

        best_t = np.full(dirs.shape[0], np.inf)
        best_color = np.zeros((dirs.shape[0], 3))
        best_id = np.full(dirs.shape[0], -1, dtype=np.int64)
        for idx, prim in enumerate(self.primitives):
            t, color = prim.intersect(origin, dirs)
            closer = t < best_t
            best_t = np.where(closer, t, best_t)
            best_color = np.where(closer[:, None], color, best_color)
            best_id = np.where(closer, idx, best_id)

        depth = np.where(np.isfinite(best_t), best_t, 0.0).reshape(h, w)
        color = best_color.reshape(h, w, 3)
        return depth, color, best_id.reshape(h, w)


def oracle_render(scene: AnalyticScene, pose: Pose, intrinsics: Intrinsics,
                  rng: np.random.Generator | None = None) -> Frame:
    """Render an exact depth+color frame of the scene; noise only if the scene
    defines a model and an rng is supplied."""
    depth, color, _ = scene.trace(pose, intrinsics)
    if scene.noise is not None and rng is not None:
        valid = depth > 0
        depth = np.where(valid, depth + rng.normal(size=depth.shape)
                         * scene.noise.sigma(depth), 0.0)
        depth = np.maximum(depth, 0.0)
    return Frame(timestamp=0.0, depth=depth, color=color)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """World-from-camera pose at eye with optical axis through target."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    fn = np.linalg.norm(forward)
    if fn < _EPS:
        raise ValueError("look_at target coincides with the eye position")
    forward /= fn
    up = np.asarray(up, dtype=np.float64)
    if np.linalg.norm(np.cross(forward, up)) < 1e-6:
        up = np.array([1.0, 0.0, 0.0]) if abs(forward[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward], axis=1)
    return Pose(rot, eye)


def orbit_trajectory(center, radius: float, n_frames: int, axis="z",
                     height: float = 0.0, fps: float = 30.0, turns: float = 1.0):
    """Equally spaced look-at poses on a circle around center.

    The circle lies in the plane perpendicular to axis, offset by height along
    the axis; every pose's optical axis passes through center. Returns
    (timestamps, poses) with timestamps at the given rate.
    """
    if radius <= 0:
        raise ValueError("orbit radius must be positive")
    if n_frames < 2:
        raise ValueError("orbit needs at least 2 frames")
    center = np.asarray(center, dtype=np.float64)
    ax = _axis_vector(axis)
    # canonical phase: for a z axis the circle starts on +x and turns toward +y
    helper = np.array([0.0, 1.0, 0.0]) if abs(ax[2]) > 0.9 else np.array([0.0, 0.0, 1.0])
    e1 = np.cross(helper, ax)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(ax, e1)
    angles = 2.0 * np.pi * turns * np.arange(n_frames) / n_frames
    poses = []
    for phi in angles:
        eye = center + radius * (np.cos(phi) * e1 + np.sin(phi) * e2) + height * ax
        poses.append(look_at(eye, center, up=ax))
    timestamps = np.arange(n_frames) / fps
    return timestamps, poses


def linear_trajectory(start, end, target, n_frames: int, fps: float = 30.0):
    """Look-at poses along the straight segment from start to end."""
    if n_frames < 2:
        raise ValueError("trajectory needs at least 2 frames")
    start = np.asarray(start, dtype=np.float64)
    end = np.asarray(end, dtype=np.float64)
    alphas = np.linspace(0.0, 1.0, n_frames)
    poses = [look_at(start + a * (end - start), target) for a in alphas]
    timestamps = np.arange(n_frames) / fps
    return timestamps, poses


def _axis_vector(axis):
    if isinstance(axis, str):
        try:
            return {"x": np.array([1.0, 0.0, 0.0]),
                    "y": np.array([0.0, 1.0, 0.0]),
                    "z": np.array([0.0, 0.0, 1.0])}[axis.lower()]
        except KeyError:
            raise ValueError(f"unknown axis {axis!r}") from None
    ax = np.asarray(axis, dtype=np.float64)
    return ax / np.linalg.norm(ax)


def thin_wall_scene(thickness: float, front_color=(1.0, 0.0, 0.0),
                    back_color=(0.0, 0.0, 1.0), wall_extent: float = 1.0,
                    wall_center=(0.0, 0.0, 0.5), wall_normal=(1.0, 0.0, 0.0),
                    ground_extent: float = 4.0,
                    ground_color=(0.5, 0.5, 0.5)) -> AnalyticScene:
    """A thin two-colored wall standing on a ground plane.

    With thickness below the experiment's voxel size this is the regime where
    opposite-side fusion corrupts a single-channel TSDF.
    """
    wall = Slab(center=wall_center, normal=wall_normal, thickness=thickness,
                extent=wall_extent, front_color=front_color, back_color=back_color)
    ground = Plane(point=(0.0, 0.0, 0.0), normal=(0.0, 0.0, 1.0),
                   extent=ground_extent, color=ground_color)
    return AnalyticScene(primitives=[wall, ground])


# ---------------------------------------------------------------------------
# scene description files

_PRIMITIVE_TYPES = {"plane": Plane, "sphere": Sphere, "box": Box, "slab": Slab}


def scene_from_spec(spec: dict) -> AnalyticScene:
    """Build a scene from the JSON description used by the synth CLI command."""
    prims = []
    for p in spec.get("primitives", []):
        p = dict(p)
        kind = p.pop("type")
        try:
            cls = _PRIMITIVE_TYPES[kind]
        except KeyError:
            raise ValueError(f"unknown primitive type {kind!r}") from None
        if cls is Box:
            prims.append(Box(lo=p.pop("lo"), hi=p.pop("hi"), **p))
        else:
            prims.append(cls(**p))
    noise = None
    if "noise" in spec and spec["noise"]:
        noise = NoiseModel(sigma0=spec["noise"].get("sigma0", 0.0),
                           sigma1=spec["noise"].get("sigma1", 0.0))
    return AnalyticScene(primitives=prims, noise=noise)


def trajectory_from_spec(spec: dict):
    """(timestamps, poses) from the trajectory section of a scene file."""
    kind = spec.get("kind", "orbit")
    if kind == "orbit":
        return orbit_trajectory(
            center=spec.get("center", (0.0, 0.0, 0.0)),
            radius=spec["radius"],
            n_frames=int(spec["n_frames"]),
            axis=spec.get("axis", "z"),
            height=spec.get("height", 0.0),
            fps=spec.get("fps", 30.0),
            turns=spec.get("turns", 1.0),
        )
    if kind == "linear":
        return linear_trajectory(
            start=spec["start"], end=spec["end"],
            target=spec.get("target", (0.0, 0.0, 0.0)),
            n_frames=int(spec["n_frames"]), fps=spec.get("fps", 30.0),
        )
    raise ValueError(f"unknown trajectory kind {kind!r}")

"""TUM-format RGB-D sequence ingestion and trajectory files.

A sequence directory holds depth.txt (and optionally rgb.txt,
groundtruth.txt) with '#' comment lines; entries are "timestamp path" or
"timestamp tx ty tz qx qy qz qw". Depth images are 16-bit single-channel
PNGs scaled by depth_scale (TUM convention: 5000 units per meter).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .camera import Frame, Intrinsics, Pose

TUM_DEPTH_SCALE = 1.0 / 5000.0

TUM_DEFAULT_INTRINSICS = Intrinsics(fx=525.0, fy=525.0, cx=319.5, cy=239.5,
                                    width=640, height=480,
                                    depth_scale=TUM_DEPTH_SCALE)


class SequenceFormatError(ValueError):
    """Malformed sequence file; the message names the file and line."""


@dataclass
class SequenceManifest:
    root: str
    depth_entries: list  # (timestamp, relative path)
    color_entries: list
    gt_timestamps: np.ndarray
    gt_poses: list
    intrinsics: Intrinsics
    depth_scale: float = TUM_DEPTH_SCALE

    @property
    def has_color(self):
        return len(self.color_entries) > 0

    @property
    def has_groundtruth(self):
        return len(self.gt_poses) > 0


def _parse_listing(path):
    """Parse 'timestamp path' lines; returns [(ts, path)] in file order."""
    entries = []
    last_ts = None
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise SequenceFormatError(
                    f"{path}:{lineno}: expected 'timestamp path', got {line!r}")
            try:
                ts = float(parts[0])
            except ValueError:
                raise SequenceFormatError(
                    f"{path}:{lineno}: bad timestamp {parts[0]!r}") from None
            if last_ts is not None and ts <= last_ts:
                raise SequenceFormatError(
                    f"{path}:{lineno}: timestamps are not strictly increasing")
            last_ts = ts
            entries.append((ts, parts[1]))
    return entries


def read_trajectory(path):
    """TUM trajectory file to (timestamps, poses)."""
    timestamps = []
    poses = []
    last_ts = None
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise SequenceFormatError(
                    f"{path}:{lineno}: expected 'timestamp tx ty tz qx qy qz qw', "
                    f"got {line!r}")
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                raise SequenceFormatError(f"{path}:{lineno}: non-numeric field") from None
            ts = vals[0]
            if last_ts is not None and ts <= last_ts:
                raise SequenceFormatError(
                    f"{path}:{lineno}: timestamps are not strictly increasing")
            last_ts = ts
            quat = np.asarray(vals[4:8])
            qn = np.linalg.norm(quat)
            if abs(qn - 1.0) > 1e-3:
                raise SequenceFormatError(
                    f"{path}:{lineno}: quaternion norm {qn:.6f} is not 1")
            timestamps.append(ts)
            poses.append(Pose.from_quaternion(vals[1:4], quat / qn))
    return np.asarray(timestamps), poses


def write_trajectory(path, timestamps, poses):
    """Write TUM trajectory lines with 6 decimal places."""
    with open(path, "w") as f:
        for ts, pose in zip(timestamps, poses):
            t = pose.translation
            q = pose.to_quaternion()
            f.write(f"{ts:.6f} {t[0]:.6f} {t[1]:.6f} {t[2]:.6f} "
                    f"{q[0]:.6f} {q[1]:.6f} {q[2]:.6f} {q[3]:.6f}\n")


def load_sequence(root, intrinsics: Intrinsics | None = None,
                  depth_scale: float = TUM_DEPTH_SCALE) -> SequenceManifest:
    """Parse a TUM-layout sequence directory.

    depth.txt is required; rgb.txt and groundtruth.txt are optional (without
    ground truth the evaluation operations are unavailable).
    """
    depth_file = os.path.join(root, "depth.txt")
    if not os.path.exists(depth_file):
        raise FileNotFoundError(f"{root}: depth.txt not found (not a TUM sequence?)")
    depth_entries = _parse_listing(depth_file)

    color_entries = []
    rgb_file = os.path.join(root, "rgb.txt")
    if os.path.exists(rgb_file):
        color_entries = _parse_listing(rgb_file)

    gt_ts = np.empty(0)
    gt_poses = []
    gt_file = os.path.join(root, "groundtruth.txt")
    if os.path.exists(gt_file):
        gt_ts, gt_poses = read_trajectory(gt_file)

    return SequenceManifest(
        root=root, depth_entries=depth_entries, color_entries=color_entries,
        gt_timestamps=gt_ts, gt_poses=gt_poses,
        intrinsics=intrinsics or TUM_DEFAULT_INTRINSICS, depth_scale=depth_scale)


def match_streams(ts_a, ts_b, max_dt: float):
    """Greedy nearest-timestamp matching; each entry used at most once.

    Candidate pairs within max_dt are taken in order of ascending |dt|.
    Returns (idx_a, idx_b) arrays of matched indices.
    """
    ts_a = np.asarray(ts_a, dtype=np.float64)
    ts_b = np.asarray(ts_b, dtype=np.float64)
    if ts_a.size == 0 or ts_b.size == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    diff = np.abs(ts_a[:, None] - ts_b[None, :])
    ia, ib = np.nonzero(diff <= max_dt)
    order = np.argsort(diff[ia, ib], kind="stable")
    used_a = np.zeros(ts_a.size, dtype=bool)
    used_b = np.zeros(ts_b.size, dtype=bool)
    out_a, out_b = [], []
    for i, j in zip(ia[order], ib[order]):
        if used_a[i] or used_b[j]:
            continue
        used_a[i] = used_b[j] = True
        out_a.append(i)
        out_b.append(j)
    order = np.argsort(out_a)
    return (np.asarray(out_a, dtype=np.int64)[order],
            np.asarray(out_b, dtype=np.int64)[order])


@dataclass
class AssociatedFrame:
    timestamp: float
    depth_path: str
    color_path: str | None = None
    gt_pose: Pose | None = None


def associate(depth_entries, color_entries, gt_timestamps, gt_poses,
              max_dt: float = 0.02):
    """Match depth entries with color and ground truth by timestamp.

    Depth entries missing a color match (when color exists) or a ground-truth
    match (when ground truth exists) are dropped.
    """
    if max_dt <= 0:
        raise ValueError("max_dt must be positive")
    d_ts = np.array([e[0] for e in depth_entries])
    n = d_ts.size
    color_for = np.full(n, -1, dtype=np.int64)
    if color_entries:
        c_ts = np.array([e[0] for e in color_entries])
        di, ci = match_streams(d_ts, c_ts, max_dt)
        color_for[di] = ci
    gt_for = np.full(n, -1, dtype=np.int64)
    if len(gt_poses):
        di, gi = match_streams(d_ts, np.asarray(gt_timestamps), max_dt)
        gt_for[di] = gi

    out = []
    for i, (ts, path) in enumerate(depth_entries):
        if color_entries and color_for[i] < 0:
            continue
        if len(gt_poses) and gt_for[i] < 0:
            continue
        out.append(AssociatedFrame(
            timestamp=ts,
            depth_path=path,
            color_path=color_entries[color_for[i]][1] if color_entries else None,
            gt_pose=gt_poses[gt_for[i]] if len(gt_poses) else None))
    return out


def read_depth_png(path, depth_scale: float = TUM_DEPTH_SCALE):
    """16-bit single-channel depth PNG to meters; raw 0 stays invalid (0)."""
    img = Image.open(path)
    if img.mode in ("I;16", "I;16B", "I;16L"):
        raw = np.asarray(img, dtype=np.uint16)
    elif img.mode == "I":
        raw = np.asarray(img, dtype=np.int32)
        if raw.min() < 0 or raw.max() > 0xFFFF:
            raise SequenceFormatError(f"{path}: depth values exceed 16-bit range")
    else:
        raise SequenceFormatError(
            f"{path}: expected a 16-bit grayscale depth image, got mode {img.mode!r}")
    return raw.astype(np.float64) * depth_scale


def write_depth_png(path, depth_m, depth_scale: float = TUM_DEPTH_SCALE):
    """Write meters as 16-bit grayscale PNG (TUM convention)."""
    raw = np.rint(np.asarray(depth_m, dtype=np.float64) / depth_scale)
    raw = np.clip(raw, 0, 0xFFFF).astype(np.uint16)
    Image.fromarray(raw).save(path)


def read_color_png(path):
    """8-bit color image to float RGB in [0, 1]."""
    img = Image.open(path).convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def write_color_png(path, color):
    """Float RGB in [0, 1] to an 8-bit PNG."""
    arr = np.clip(np.asarray(color, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def load_frames(manifest: SequenceManifest, max_dt: float = 0.02,
                max_frames: int | None = None):
    """Read associated frames into memory: (frames, gt_poses_or_None)."""
    matched = associate(manifest.depth_entries, manifest.color_entries,
                        manifest.gt_timestamps, manifest.gt_poses, max_dt)
    if max_frames is not None:
        matched = matched[:max_frames]
    frames = []
    gt = [] if manifest.has_groundtruth else None
    for rec in matched:
        depth = read_depth_png(os.path.join(manifest.root, rec.depth_path),
                               manifest.depth_scale)
        color = None
        if rec.color_path is not None:
            color = read_color_png(os.path.join(manifest.root, rec.color_path))
        frames.append(Frame(timestamp=rec.timestamp, depth=depth, color=color))
        if gt is not None:
            gt.append(rec.gt_pose)
    return frames, gt


def write_tum_sequence(out_dir, timestamps, poses, frames, depth_scale=TUM_DEPTH_SCALE):
    """Materialize frames and poses as a TUM-layout sequence directory."""
    os.makedirs(os.path.join(out_dir, "depth"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "rgb"), exist_ok=True)
    depth_lines = []
    rgb_lines = []
    for ts, frame in zip(timestamps, frames):
        name = f"{ts:.6f}.png"
        write_depth_png(os.path.join(out_dir, "depth", name), frame.depth, depth_scale)
        depth_lines.append(f"{ts:.6f} depth/{name}\n")
        if frame.color is not None:
            write_color_png(os.path.join(out_dir, "rgb", name), frame.color)
            rgb_lines.append(f"{ts:.6f} rgb/{name}\n")
    with open(os.path.join(out_dir, "depth.txt"), "w") as f:
        f.write("# timestamp filename\n")
        f.writelines(depth_lines)
    if rgb_lines:
        with open(os.path.join(out_dir, "rgb.txt"), "w") as f:
            f.write("# timestamp filename\n")
            f.writelines(rgb_lines)
    write_trajectory(os.path.join(out_dir, "groundtruth.txt"), timestamps, poses)

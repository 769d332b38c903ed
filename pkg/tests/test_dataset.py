import numpy as np
import pytest

from dtsdf.camera import Pose, pose_delta
from dtsdf.dataset import (
    SequenceFormatError,
    associate,
    load_frames,
    load_sequence,
    match_streams,
    read_color_png,
    read_depth_png,
    read_trajectory,
    write_color_png,
    write_depth_png,
    write_trajectory,
    write_tum_sequence,
)
from dtsdf.camera import orthonormalize_rotation
from dtsdf.synthetic import AnalyticScene, Plane, oracle_render, orbit_trajectory


def write_lines(path, lines):
    path.write_text("".join(line + "\n" for line in lines))


class TestLoadSequence:
    def test_minimal_two_line_sequence(self, tmp_path):
        write_lines(tmp_path / "depth.txt", ["# comment", "1.0 depth/a.png",
                                             "2.0 depth/b.png"])
        manifest = load_sequence(tmp_path)
        assert len(manifest.depth_entries) == 2
        assert manifest.depth_entries[0] == (1.0, "depth/a.png")
        assert not manifest.has_color and not manifest.has_groundtruth

    def test_comment_only_groundtruth(self, tmp_path):
        write_lines(tmp_path / "depth.txt", ["1.0 depth/a.png"])
        write_lines(tmp_path / "groundtruth.txt", ["# nothing here"])
        manifest = load_sequence(tmp_path)
        assert not manifest.has_groundtruth

    def test_missing_depth_txt_fatal(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="depth.txt"):
            load_sequence(tmp_path)

    def test_non_monotone_timestamps_flagged_with_line(self, tmp_path):
        write_lines(tmp_path / "depth.txt", ["2.0 a.png", "1.0 b.png"])
        with pytest.raises(SequenceFormatError, match="depth.txt:2"):
            load_sequence(tmp_path)

    def test_malformed_line_reports_lineno(self, tmp_path):
        write_lines(tmp_path / "depth.txt", ["1.0 a.png", "not-a-line with extra"])
        with pytest.raises(SequenceFormatError, match=":2"):
            load_sequence(tmp_path)


class TestAssociation:
    def test_identical_timestamps_match_one_to_one(self):
        ts = np.arange(10) * 0.1
        ia, ib = match_streams(ts, ts, 0.02)
        np.testing.assert_array_equal(ia, np.arange(10))
        np.testing.assert_array_equal(ib, np.arange(10))

    def test_constant_offset_beyond_max_dt_matches_nothing(self):
        ts = np.arange(10) * 0.03  # 30 Hz stream
        ia, ib = match_streams(ts, ts + 0.5, 0.02)
        assert ia.size == 0

    def test_each_entry_used_once(self):
        a = np.array([0.0, 0.001])
        b = np.array([0.0005])
        ia, ib = match_streams(a, b, 0.02)
        assert ia.size == 1 and ib.size == 1
        assert ia[0] == 0  # the closer one wins

    def test_jitter_matches_brute_force_oracle(self, rng):
        # timestamps spaced at least 25 ms apart, jittered within +-10 ms
        base = np.cumsum(rng.uniform(0.025, 0.3, 200))
        jitter = base + rng.uniform(-0.01, 0.01, base.size)
        order = np.argsort(jitter)
        ia, ib = match_streams(base, jitter[order], 0.02)
        assert ia.size == base.size  # everything matched

        # brute-force greedy oracle: repeatedly take the globally closest pair
        pairs = sorted(((abs(x - y), i, j)
                        for i, x in enumerate(base)
                        for j, y in enumerate(jitter[order])
                        if abs(x - y) <= 0.02))
        used_a, used_b, expected = set(), set(), {}
        for _, i, j in pairs:
            if i in used_a or j in used_b:
                continue
            used_a.add(i)
            used_b.add(j)
            expected[i] = j
        got = dict(zip(ia.tolist(), ib.tolist()))
        assert got == expected

    def test_associate_drops_unmatched_depth(self):
        depth = [(0.0, "d0.png"), (1.0, "d1.png"), (2.0, "d2.png")]
        color = [(0.001, "c0.png"), (2.002, "c2.png")]
        poses = [Pose.identity()] * 3
        gt_ts = np.array([0.0, 1.0, 2.0])
        out = associate(depth, color, gt_ts, poses, max_dt=0.02)
        assert [o.depth_path for o in out] == ["d0.png", "d2.png"]
        assert out[0].color_path == "c0.png"

    def test_depth_only_sequence_keeps_all(self):
        depth = [(0.0, "d0.png"), (1.0, "d1.png")]
        out = associate(depth, [], np.empty(0), [], max_dt=0.02)
        assert len(out) == 2
        assert out[0].color_path is None and out[0].gt_pose is None


class TestDepthPng:
    def test_tum_convention_roundtrip(self, tmp_path):
        path = tmp_path / "d.png"
        depth = np.zeros((8, 10))
        depth[4, 5] = 1.0  # raw 5000
        write_depth_png(path, depth)
        back = read_depth_png(path)
        assert back[4, 5] == pytest.approx(1.0)
        assert back[0, 0] == 0.0

    def test_random_roundtrip_quantized(self, tmp_path, rng):
        path = tmp_path / "d.png"
        depth = rng.uniform(0, 5.0, size=(16, 16))
        write_depth_png(path, depth)
        back = read_depth_png(path)
        np.testing.assert_allclose(back, np.rint(depth * 5000) / 5000, atol=1e-9)

    def test_eight_bit_rejected(self, tmp_path):
        from PIL import Image
        path = tmp_path / "bad.png"
        Image.fromarray(np.zeros((4, 4), dtype=np.uint8), mode="L").save(path)
        with pytest.raises(SequenceFormatError, match="16-bit"):
            read_depth_png(path)

    def test_rgb_rejected(self, tmp_path):
        from PIL import Image
        path = tmp_path / "bad.png"
        Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8), mode="RGB").save(path)
        with pytest.raises(SequenceFormatError, match="16-bit"):
            read_depth_png(path)

    def test_color_roundtrip(self, tmp_path, rng):
        path = tmp_path / "c.png"
        color = rng.uniform(0, 1, size=(8, 8, 3))
        write_color_png(path, color)
        back = read_color_png(path)
        np.testing.assert_allclose(back, color, atol=1.0 / 255.0)


class TestTrajectoryIO:
    def test_roundtrip_random_trajectory(self, tmp_path, rng):
        n = 25
        ts = np.sort(rng.uniform(0, 100, n))
        ts += np.arange(n) * 1e-3  # enforce strict monotonicity
        poses = [Pose(orthonormalize_rotation(rng.standard_normal((3, 3))),
                      rng.uniform(-5, 5, 3)) for _ in range(n)]
        path = tmp_path / "traj.txt"
        write_trajectory(path, ts, poses)
        ts2, poses2 = read_trajectory(path)
        np.testing.assert_allclose(ts2, ts, atol=1e-6)
        for a, b in zip(poses, poses2):
            dt, dr = pose_delta(a, b)
            assert dt < 1e-5 and dr < 1e-5

    def test_malformed_quaternion_rejected(self, tmp_path):
        path = tmp_path / "traj.txt"
        path.write_text("1.0 0 0 0 0 0 0 2.0\n")
        with pytest.raises(SequenceFormatError, match="quaternion"):
            read_trajectory(path)


class TestTumSequenceWriter:
    def test_materialize_and_reload(self, tmp_path, small_intrinsics):
        scene = AnalyticScene([Plane(point=(0, 0, 1.2), normal=(0, 0, -1.0),
                                     color=(0.3, 0.6, 0.9))])
        ts, poses = orbit_trajectory(center=(0, 0, 1.2), radius=0.8, n_frames=4)
        frames = [oracle_render(scene, p, small_intrinsics) for p in poses]
        out = tmp_path / "seq"
        write_tum_sequence(out, ts, poses, frames)

        manifest = load_sequence(out, intrinsics=small_intrinsics)
        assert manifest.has_color and manifest.has_groundtruth
        loaded, gt = load_frames(manifest)
        assert len(loaded) == 4
        # depth round-trips within the 16-bit quantization step
        np.testing.assert_allclose(loaded[0].depth, frames[0].depth, atol=1e-4)
        np.testing.assert_allclose(loaded[0].color, frames[0].color, atol=1.0 / 255.0)
        dt, dr = pose_delta(gt[0], poses[0])
        assert dt < 1e-5 and dr < 1e-5

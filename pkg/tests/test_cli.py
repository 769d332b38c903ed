import json

import pytest

from dtsdf.cli import main
from dtsdf.config import RunConfig
from dtsdf.voxelgrid import VoxelStore, REGULAR


SCENE_SPEC = {
    "primitives": [
        {"type": "plane", "point": [0, 0, 0], "normal": [0, 0, 1.0], "extent": 4.0,
         "color": [0.6, 0.6, 0.6]},
        {"type": "box", "lo": [-0.25, -0.2, 0.0], "hi": [0.25, 0.2, 0.45],
         "color": [0.8, 0.3, 0.2]},
        {"type": "box", "lo": [-0.6, 0.3, 0.0], "hi": [-0.3, 0.7, 0.6],
         "color": [0.3, 0.8, 0.3]},
    ],
    "trajectory": {"kind": "orbit", "center": [0, 0, 0.2], "radius": 1.4,
                   "n_frames": 8, "height": 1.0, "turns": 0.03},
    "intrinsics": {"fx": 130.0, "fy": 130.0, "cx": 79.5, "cy": 59.5,
                   "width": 160, "height": 120},
    "seed": 5,
}


@pytest.fixture
def scene_file(tmp_path):
    path = tmp_path / "scene.json"
    path.write_text(json.dumps(SCENE_SPEC))
    return path


@pytest.fixture
def config_file(tmp_path, scene_file):
    cfg = {"mode": "directional", "voxel_size": 0.02, "scene": str(scene_file),
           "out": str(tmp_path / "out"), "use_gt_poses": False}
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


class TestConfig:
    def test_unknown_keys_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"mode": "regular", "vocsel_size": 0.01}))
        with pytest.raises(ValueError, match="unknown config keys"):
            RunConfig.from_file(path)

    def test_unknown_nested_keys_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"icp": {"bogus": 1}}))
        with pytest.raises(ValueError, match="unknown icp keys"):
            RunConfig.from_file(path)

    def test_bad_mode_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"mode": "both"}))
        with pytest.raises(ValueError, match="mode"):
            RunConfig.from_file(path)

    def test_round_trip(self, tmp_path):
        cfg = RunConfig(mode="regular", voxel_size=0.015, seed=9,
                        icp={"iterations": [8, 5, 3]})
        path = tmp_path / "dump.json"
        cfg.dump(path)
        again = RunConfig.from_file(path)
        assert again.mode == "regular"
        assert again.voxel_size == 0.015
        assert again.icp_params().iterations == (8, 5, 3)

    def test_overrides(self):
        cfg = RunConfig()
        cfg.apply_overrides(mode="regular", voxel_size=0.04, seed=3, out="elsewhere")
        assert (cfg.mode, cfg.voxel_size, cfg.seed, cfg.out) == \
            ("regular", 0.04, 3, "elsewhere")


class TestCliCommands:
    def test_synth_then_run_then_eval(self, tmp_path, scene_file, config_file):
        # synth: materialize the TUM sequence
        seq_dir = tmp_path / "seq"
        assert main(["synth", "--scene", str(scene_file), "--out", str(seq_dir)]) == 0
        assert (seq_dir / "depth.txt").exists()
        assert (seq_dir / "groundtruth.txt").exists()

        # run: tracked pipeline on the in-memory scene
        out = tmp_path / "out"
        assert main(["run", "--config", str(config_file)]) == 0
        for name in ("trajectory.txt", "stats.csv", "volume.dtsv", "config.json",
                     "timings.png", "groundtruth.txt"):
            assert (out / name).exists(), name

        # eval-rpe against ground truth (short window for the short run)
        rpe_out = tmp_path / "rpe"
        assert main(["eval-rpe", "--est", str(out / "trajectory.txt"),
                     "--gt", str(out / "groundtruth.txt"),
                     "--window", "4", "--out", str(rpe_out)]) == 0
        summary = json.loads((rpe_out / "rpe.json").read_text())
        assert summary["units"] == "mm"
        assert summary["mean"] < 40.0
        assert (rpe_out / "rpe.csv").exists() and (rpe_out / "rpe.png").exists()

        # eval-mae on the snapshot
        mae_out = tmp_path / "mae"
        assert main(["eval-mae", "--snapshot", str(out / "volume.dtsv"),
                     "--config", str(config_file),
                     "--trajectory", str(out / "trajectory.txt"),
                     "--out", str(mae_out)]) == 0
        summary = json.loads((mae_out / "mae.json").read_text())
        assert summary["n"] == 8
        assert (mae_out / "mae.csv").exists() and (mae_out / "mae.png").exists()

        # stats with ratio against itself
        assert main(["stats", "--snapshot", str(out / "volume.dtsv"),
                     "--compare", str(out / "volume.dtsv"),
                     "--out", str(tmp_path / "stats")]) == 0
        stats = json.loads((tmp_path / "stats" / "stats.json").read_text())
        assert stats["block_ratio"] == pytest.approx(1.0)
        assert (tmp_path / "stats" / "memory.png").exists()

    def test_render_snapshot(self, tmp_path, config_file):
        out = tmp_path / "out"
        assert main(["run", "--config", str(config_file)]) == 0
        render_out = tmp_path / "render"
        assert main(["render", "--snapshot", str(out / "volume.dtsv"),
                     "--trajectory", str(out / "trajectory.txt"), "--index", "0",
                     "--config", str(out / "config.json"),
                     "--out", str(render_out)]) == 0
        from dtsdf.dataset import read_depth_png
        depth = read_depth_png(render_out / "depth.png")
        assert (depth > 0).sum() > 5000
        assert (render_out / "color.png").exists()
        assert (render_out / "directions.png").exists()

    def test_missing_config_is_input_error(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "nope.json")]) == 1

    def test_config_with_dataset_and_scene_rejected(self, tmp_path, scene_file):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"scene": str(scene_file), "dataset": "x"}))
        assert main(["run", "--config", str(cfg)]) == 1

    def test_axis_alignment_reduces_directional_blocks(self, tmp_path):
        # a floor tilted 45 degrees occupies two directions; pre-rotating the
        # map puts it back into one, shrinking the allocation
        tilted = {
            "primitives": [
                {"type": "plane", "point": [0, 0, 1.5],
                 "normal": [0.0, -0.7071067811865476, -0.7071067811865476],
                 "extent": 2.0, "color": [0.5, 0.5, 0.5]},
            ],
            "trajectory": {"kind": "linear", "start": [0, 0, 0],
                           "end": [0.1, 0, 0], "target": [0, 0, 1.5],
                           "n_frames": 4},
            "intrinsics": SCENE_SPEC["intrinsics"],
        }
        scene_file = tmp_path / "tilted.json"
        scene_file.write_text(json.dumps(tilted))
        blocks = {}
        for name, align in (("plain", False), ("aligned", True)):
            out = tmp_path / name
            cfg = tmp_path / f"{name}.json"
            cfg.write_text(json.dumps({
                "mode": "directional", "voxel_size": 0.02, "axis_align": align,
                "scene": str(scene_file), "out": str(out), "use_gt_poses": True,
            }))
            assert main(["run", "--config", str(cfg)]) == 0
            store = VoxelStore.load_snapshot(out / "volume.dtsv")
            blocks[name] = store.block_count()
        assert blocks["aligned"] < blocks["plain"]

    def test_run_on_materialized_dataset(self, tmp_path, scene_file):
        seq_dir = tmp_path / "seq"
        main(["synth", "--scene", str(scene_file), "--out", str(seq_dir)])
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({
            "mode": "regular", "voxel_size": 0.02, "dataset": str(seq_dir),
            "out": str(tmp_path / "out2"), "use_gt_poses": True,
            "intrinsics": SCENE_SPEC["intrinsics"],
        }))
        assert main(["run", "--config", str(cfg)]) == 0
        store = VoxelStore.load_snapshot(tmp_path / "out2" / "volume.dtsv")
        assert store.mode == REGULAR
        assert store.block_count() > 50


class TestDeterminism:
    def test_rerun_from_dumped_config_reproduces(self, tmp_path, scene_file):
        out1 = tmp_path / "first"
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({
            "mode": "directional", "voxel_size": 0.02,
            "scene": str(scene_file), "out": str(out1), "seed": 4,
        }))
        assert main(["run", "--config", str(cfg)]) == 0
        # the effective config written next to the outputs is itself runnable
        out2 = tmp_path / "second"
        assert main(["run", "--config", str(out1 / "config.json"),
                     "--out", str(out2)]) == 0
        assert (out1 / "trajectory.txt").read_bytes() == \
            (out2 / "trajectory.txt").read_bytes()
        assert (out1 / "volume.dtsv").read_bytes() == (out2 / "volume.dtsv").read_bytes()

    def test_identical_runs_bit_identical_outputs(self, tmp_path, scene_file):
        outputs = []
        for name in ("a", "b"):
            out = tmp_path / name
            cfg = tmp_path / f"{name}.json"
            cfg.write_text(json.dumps({
                "mode": "directional", "voxel_size": 0.02,
                "scene": str(scene_file), "out": str(out), "seed": 11,
            }))
            assert main(["run", "--config", str(cfg)]) == 0
            outputs.append(out)
        a, b = outputs
        assert (a / "trajectory.txt").read_bytes() == (b / "trajectory.txt").read_bytes()
        assert (a / "volume.dtsv").read_bytes() == (b / "volume.dtsv").read_bytes()
        assert (a / "stats.csv").read_text().splitlines()[0] == \
            (b / "stats.csv").read_text().splitlines()[0]

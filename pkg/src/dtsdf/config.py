"""Run configuration: JSON file plus command-line overrides.

Every tunable of the pipeline lives here with its module's default. Unknown
keys are rejected so typos fail loudly, and the effective configuration is
dumped next to the outputs so a run can be reproduced from its own artifacts.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .camera import Intrinsics
from .combine import CombineParams
from .fusion import FusionParams
from .pipeline import PipelineConfig
from .render import RenderParams
from .tracking import IcpParams
from .voxelgrid import DIRECTIONAL, REGULAR, VoxelStore


def _build(cls, data: dict, context: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown {context} keys: {sorted(unknown)}")
    return cls(**data)


@dataclass
class RunConfig:
    mode: str = DIRECTIONAL
    voxel_size: float = 0.01
    trunc_dist: float | None = None        # None: 5 * voxel_size
    dir_threshold: float = 3 * np.pi / 8
    max_weight: float = 128.0
    max_blocks: int = 100_000
    seed: int = 0
    dataset: str | None = None
    scene: str | None = None
    out: str = "out"
    max_frames: int | None = None
    max_dt: float = 0.02
    use_gt_poses: bool = False
    on_lost: str = "fuse-skip"
    recycle_every: int = 0
    axis_align: bool = False
    bilateral_filter: bool = False
    normal_depth_jump: float | None = None
    intrinsics: dict | None = None
    fusion: dict = field(default_factory=dict)
    combine: dict = field(default_factory=dict)
    icp: dict = field(default_factory=dict)
    render: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in (REGULAR, DIRECTIONAL):
            raise ValueError(f"mode must be '{REGULAR}' or '{DIRECTIONAL}', "
                             f"got {self.mode!r}")
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if self.on_lost not in ("fuse-skip", "halt"):
            raise ValueError("on_lost must be 'fuse-skip' or 'halt'")
        # validate nested sections eagerly so bad keys fail at load time
        self.fusion_params()
        self.combine_params()
        self.icp_params()
        self.render_params()

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path) as f:
            data = json.load(f)
        return _build(cls, data, "config")

    def apply_overrides(self, mode=None, voxel_size=None, theta=None, seed=None,
                        out=None) -> "RunConfig":
        if mode is not None:
            self.mode = mode
        if voxel_size is not None:
            self.voxel_size = float(voxel_size)
        if theta is not None:
            self.dir_threshold = float(theta)
        if seed is not None:
            self.seed = int(seed)
        if out is not None:
            self.out = out
        self.__post_init__()
        return self

    # ------------------------------------------------------------------
    # factories for the module parameter objects

    def make_store(self) -> VoxelStore:
        return VoxelStore(mode=self.mode, voxel_size=self.voxel_size,
                          trunc_dist=self.trunc_dist,
                          dir_threshold=self.dir_threshold,
                          max_weight=self.max_weight, max_blocks=self.max_blocks)

    def fusion_params(self) -> FusionParams:
        return _build(FusionParams, self.fusion, "fusion")

    def combine_params(self) -> CombineParams:
        return _build(CombineParams, self.combine, "combine")

    def icp_params(self) -> IcpParams:
        data = dict(self.icp)
        if "iterations" in data:
            data["iterations"] = tuple(data["iterations"])
        return _build(IcpParams, data, "icp")

    def render_params(self) -> RenderParams:
        return _build(RenderParams, self.render, "render")

    def make_intrinsics(self, default: Intrinsics) -> Intrinsics:
        if self.intrinsics is None:
            return default
        return _build(Intrinsics, self.intrinsics, "intrinsics")

    def pipeline_config(self, **kwargs) -> PipelineConfig:
        return PipelineConfig(
            fusion=self.fusion_params(),
            combine=self.combine_params(),
            icp=self.icp_params(),
            render=self.render_params(),
            on_lost=self.on_lost,
            recycle_every=self.recycle_every,
            normal_depth_jump=self.normal_depth_jump,
            bilateral_filter=self.bilateral_filter,
            **kwargs,
        )

    def dump(self, path):
        """Write the effective configuration; reloading it reproduces the run."""
        data = asdict(self)
        with open(path, "w") as f:
            json.dump(data, f, indent=2, sort_keys=True)
            f.write("\n")

"""Pipeline configuration: one schema shared by all subcommands, JSON with
flag overrides, divisibility validation, and the desk-scale preset."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field


@dataclass
class PipelineConfig:
    # grid and window sizes
    s_shape: int = 128
    s_patch: int = 18
    s_subv: int = 40
    s_blend: int = 8
    gamma_patch: int = 4
    gamma_subv: int = 32
    # retrieval
    K: int = 10
    retrieval_mode: str = "exact"  # "exact" or "embedding"
    shortlist: int = 16
    icp_init_mode: str = "full"  # "full" or "paper"
    icp_max_refines: int = 4
    # embedding training
    code_dim: int = 128
    n_rnd: int = 800
    n_true: int = 400
    epochs: int = 200
    lr: float = 1e-3
    lr_decay: float = 0.0
    batch: int = 32
    # blending
    M: int = 400
    alpha: float = 10.0
    opt_iters: int = 100
    opt_lr: float = 0.05
    restarts: int = 3
    # coarse provider
    coarse_provider: str = "gt_downsample"  # gt_downsample | heuristic | external_file
    closing_radius: int = 1
    symmetry: bool = True
    coarse_path: str = ""
    # ablations
    no_deform: bool = False
    no_blend: bool = False
    no_smooth: bool = False
    # misc
    binarize_threshold: float = 0.5
    seed: int = 0
    threads: int = 1
    preset: str = "default"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.s_subv % self.s_blend != 0:
            raise ValueError(
                f"s_blend={self.s_blend} must divide s_subv={self.s_subv}")
        if self.s_shape % 4 != 0:
            raise ValueError("s_shape must be divisible by the coarse factor 4")
        if self.s_patch > self.s_subv or self.s_subv > self.s_shape:
            raise ValueError("need s_patch <= s_subv <= s_shape")
        if self.M < 1 or self.K < 1:
            raise ValueError("M and K must be >= 1")
        if self.retrieval_mode not in ("exact", "embedding"):
            raise ValueError(f"unknown retrieval_mode {self.retrieval_mode!r}")
        if self.coarse_provider not in ("gt_downsample", "heuristic",
                                        "external_file"):
            raise ValueError(f"unknown coarse_provider {self.coarse_provider!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def load(path) -> "PipelineConfig":
        with open(path) as fh:
            return PipelineConfig.from_dict(json.load(fh))

    @staticmethod
    def from_dict(d: dict) -> "PipelineConfig":
        names = {f.name for f in dataclasses.fields(PipelineConfig)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return PipelineConfig(**d)

    def replace(self, **kwargs) -> "PipelineConfig":
        return dataclasses.replace(self, **kwargs)


SMALL_PRESET = dict(
    s_shape=32, s_patch=6, gamma_patch=2, s_subv=16, gamma_subv=12,
    s_blend=4, M=32, K=4, code_dim=32, n_rnd=1200, n_true=300,
    epochs=300, lr=0.03, lr_decay=0.02, shortlist=6, icp_max_refines=2,
    opt_iters=40, restarts=1, preset="small",
)


def preset_config(name: str) -> PipelineConfig:
    if name == "default":
        return PipelineConfig()
    if name == "small":
        return PipelineConfig(**SMALL_PRESET)
    raise ValueError(f"unknown preset {name!r}")

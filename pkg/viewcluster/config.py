from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from viewcluster.core import Viewpoint

AMI_NORMALIZER = Literal["arithmetic", "max"]

DEFAULT_OUT_DIR = "runs"


class PipelineConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    k: int = Field(default=20, ge=2)
    k_tilde: int = Field(default=2, ge=1)
    ti: int = Field(default=1200, ge=0)
    ti_quantile: float | None = Field(default=None, gt=0.0, le=1.0)
    beta: float = Field(default=0.1, gt=0.0)
    eps: float = Field(default=0.5, gt=0.0, le=1.0)
    eps_quantile: float | None = Field(default=None, gt=0.0, lt=1.0)
    min_pts: int = Field(default=4, ge=2)
    recognition_epochs: int = Field(default=20, ge=0)
    recognition_rate: float = Field(default=0.001, ge=0.0)
    iterations: int = Field(default=10, ge=0)
    refine_rate: float = Field(default=0.5, ge=0.0, le=1.0)
    refine_passes: int = Field(default=1, ge=1)
    seed: int = 0
    ami_normalizer: AMI_NORMALIZER = "arithmetic"
    use_kreciprocal: bool = True
    use_noise_selection: bool = True
    # clusters made by noise selection merge with at most one cluster per other viewpoint
    restrict_noise_merges: bool = True

    def dbscan_params(self) -> DbscanParams:
        return DbscanParams(eps=self.eps, min_pts=self.min_pts)


class DbscanParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    eps: float = Field(gt=0.0)
    min_pts: int = Field(ge=2)


class SynthConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    identities: int = Field(default=50, ge=1)
    viewpoints: list[str] = Field(
        default_factory=lambda: ["front", "front_side", "side", "rear_side", "rear"]
    )
    dim: int = Field(default=64, ge=2)
    identity_spread: float = 1.0
    viewpoint_offset_scale: float = 1.1
    within_cluster_noise: float = 0.1
    samples_per_identity_viewpoint: int = Field(default=10, ge=1)
    cameras: int = Field(default=4, ge=1)
    test_identities: int = Field(default=0, ge=0)
    seed: int = 7

    @field_validator("viewpoints")
    @classmethod
    def viewpoints_known(cls, v: list[str]) -> list[str]:
        if not v:
            raise ValueError("viewpoints must not be empty")
        parsed = [Viewpoint.parse(name).value for name in v]
        if len(set(parsed)) != len(parsed):
            raise ValueError("viewpoints must not repeat")
        return parsed

    @model_validator(mode="after")
    def spreads_ordered(self) -> SynthConfig:
        if not (
            self.viewpoint_offset_scale
            > self.identity_spread
            > self.within_cluster_noise
            > 0
        ):
            raise ValueError(
                "require viewpoint_offset_scale > identity_spread > "
                f"within_cluster_noise > 0, got {self.viewpoint_offset_scale}, "
                f"{self.identity_spread}, {self.within_cluster_noise}"
            )
        return self


def default_out_dir() -> Path:
    return Path(os.environ.get("VIEWCLUSTER_OUT_DIR", DEFAULT_OUT_DIR))


def load_pipeline_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    return PipelineConfig(**data)


def console_quiet() -> bool:
    return os.environ.get("VIEWCLUSTER_QUIET", "").lower() in {"1", "true", "yes"}

"""Run configuration: a versioned JSON document validated with pydantic."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .net import TrainConfig
from .pose import DOF_NAMES
from .synth import SceneConfig

CONFIG_VERSION = 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SceneSection(_Strict):
    focal_length: float = Field(40.0, gt=0)
    principal_point: Tuple[float, float] = (15.5, 15.5)
    plane_depth: float = Field(10.0, gt=0.1)
    width: int = Field(32, ge=1, le=224)
    height: int = Field(32, ge=1, le=224)

    def build(self) -> SceneConfig:
        return SceneConfig(**self.model_dump())


class DataSection(_Strict):
    n_train: int = Field(512, ge=1)
    n_test: int = Field(128, ge=0)
    # per-DoF (lo, hi); omitted DoFs are fixed at 0
    state_ranges: Dict[str, Tuple[float, float]] = Field(default_factory=lambda: {"z": (0.5, 2.0)})
    sigma: float = Field(0.05, ge=0)
    seed: int = Field(0, ge=0)

    @field_validator("state_ranges")
    @classmethod
    def _known_dofs(cls, v):
        for name, (lo, hi) in v.items():
            if name not in DOF_NAMES:
                raise ValueError(f"unknown DoF {name!r}; expected one of {', '.join(DOF_NAMES)}")
            if hi < lo:
                raise ValueError(f"range for {name!r} has hi < lo")
        return v

    def ranges(self) -> List[Tuple[float, float]]:
        return [tuple(self.state_ranges.get(name, (0.0, 0.0))) for name in DOF_NAMES]


class TrainSection(_Strict):
    dofs: List[int] = Field(default_factory=lambda: [2])
    batch_n: int = Field(32, ge=1)
    epochs: int = Field(125, ge=1)
    learning_rate: float = Field(3e-3, gt=0)
    tau: float = Field(2.0, gt=0)
    lam: float = Field(2.0, ge=0)
    feature_dim: int = Field(32, ge=1)
    encoder_hidden: List[int] = Field(default_factory=lambda: [128])
    decoder_hidden: Tuple[int, int] = (64, 64)
    sigma_noise: float = Field(0.05, ge=0)
    seed: int = Field(0, ge=0)
    grad_clip: float = Field(10.0, gt=0)
    zero_head: bool = False
    max_steps: Optional[int] = Field(None, ge=1)

    @field_validator("dofs")
    @classmethod
    def _dof_range(cls, v):
        if not v or any(not 0 <= d < 6 for d in v) or len(set(v)) != len(v):
            raise ValueError("dofs must be distinct indices in [0, 6)")
        return v

    def build(self, dof: int) -> TrainConfig:
        kw = self.model_dump(exclude={"dofs"})
        return TrainConfig(dof_index=dof, **kw)


class EvalSection(_Strict):
    lengths: List[float] = Field(default_factory=lambda: [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0])
    stride: int = Field(10, ge=1)
    aggregation: Literal["mean", "rmse"] = "mean"


class SweepSection(_Strict):
    fractions: List[float] = Field(default_factory=lambda: [0.2, 0.4, 0.6, 0.8, 1.0])
    seed: int = Field(0, ge=0)

    @field_validator("fractions")
    @classmethod
    def _unit_interval(cls, v):
        if not v or any(not 0 < f <= 1 for f in v):
            raise ValueError("fractions must lie in (0, 1]")
        return v


class PathsSection(_Strict):
    dataset_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    report_dir: str = "reports"


class RunConfig(_Strict):
    version: Literal[1]
    scene: SceneSection = SceneSection()
    data: DataSection = DataSection()
    train: TrainSection = TrainSection()
    eval: EvalSection = EvalSection()
    sweep: SweepSection = SweepSection()
    paths: PathsSection = PathsSection()

    @model_validator(mode="after")
    def _geometry(self):
        lo, hi = self.data.state_ranges.get("z", (0.0, 0.0))
        if self.scene.plane_depth - max(hi, 0.0) <= 0.1:
            raise ValueError("z range would move the camera through the plane")
        return self


class ConfigError(Exception):
    pass


def load_config(path) -> tuple:
    """Parse and validate a config file; returns ``(RunConfig, base_dir)``."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        lines = []
        for err in exc.errors():
            loc = ".".join(str(p) for p in err["loc"]) or "<root>"
            lines.append(f"  {loc}: {err['msg']}")
        raise ConfigError(f"{path}: invalid config\n" + "\n".join(lines)) from None
    return cfg, path.resolve().parent

from __future__ import annotations

import hashlib
import json
from enum import Enum
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.errors import ConfigError


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ElasticParams(StrictModel):
    young_modulus: float = Field(default=1.0, gt=0.0)
    poisson_ratio: float = Field(default=0.3, gt=-1.0, lt=0.5)
    penalty_alpha: float = Field(default=1e12, ge=0.0)


class PenaltyKind(str, Enum):
    linear = "linear"
    neo_hookean = "neo-hookean"
    none = "none"


class ContinuationC1(StrictModel):
    enabled: bool = False
    factor: float = Field(default=0.5, gt=0.0, lt=1.0)
    trigger: float = Field(default=1e-4, gt=0.0)
    floor: float = Field(default=1e-8, ge=0.0)
    min_interval: int = Field(default=5, ge=1)


class ContinuationC2(StrictModel):
    enabled: bool = False
    start: float = Field(default=1.0, gt=0.0)
    growth: float = Field(default=10.0, gt=1.0)
    maximum: float = Field(default=1e8, gt=0.0)
    trigger: float = Field(default=1e-4, gt=0.0)
    min_interval: int = Field(default=5, ge=1)


class OptimizerConfig(StrictModel):
    r: int = Field(default=1, ge=1)
    step: float = Field(default=2.5, gt=0.0)
    c1: float = Field(default=1.0, ge=0.0)
    penalty_kind: PenaltyKind = PenaltyKind.linear
    mu: float = Field(default=1.0, gt=0.0)
    lame_lambda: float = Field(default=0.1, gt=0.0)
    neo_hookean_dimension: int = Field(default=2, ge=2, le=3)
    elastic: ElasticParams = ElasticParams()
    max_iters: int = Field(default=500, ge=0)
    rel_tol: float = Field(default=0.0, ge=0.0)
    continuation_c1: ContinuationC1 = ContinuationC1()
    continuation_c2: ContinuationC2 = ContinuationC2()
    polytopal_fast_path: bool = True
    max_backtracks: int = Field(default=20, ge=0)
    bijectivity_guard: bool = True
    quadrature_degree: int = Field(default=4, ge=1, le=4)
    safeguard_tolerance: float = Field(default=1e-3, gt=0.0)
    checkpoint_every: int = Field(default=50, ge=0)
    solver: Literal["direct", "cg"] = "direct"

    @model_validator(mode="after")
    def _fast_path_needs_linear_penalty(self) -> OptimizerConfig:
        if self.polytopal_fast_path and self.penalty_kind is not PenaltyKind.linear:
            raise ValueError("polytopal_fast_path requires penalty_kind 'linear'")
        return self


class SurrogateConfig(StrictModel):
    r: int = Field(default=1, ge=1)
    n_geo: int | None = Field(default=None, ge=0)
    n_opt: int | None = Field(default=None, ge=0)
    energy_threshold: float = Field(default=0.999, gt=0.0, le=1.0)
    gp_restarts: int = Field(default=16, ge=1)
    gp_min_noise: float = Field(default=1e-10, gt=0.0)
    evaluation: Literal["loo", "split"] = "loo"
    loo_morphings: Literal["per_fold", "shared"] = "per_fold"
    test_dataset_dir: Path | None = None


class ToyConfig(StrictModel):
    n: int = Field(default=30, ge=1)
    beta_min: float = -0.38
    beta_max: float = 0.38
    nx: int = Field(default=48, ge=1)
    ny: int = Field(default=60, ge=1)

    @model_validator(mode="after")
    def _ordered_range(self) -> ToyConfig:
        if self.beta_max < self.beta_min:
            raise ValueError("beta_max must not be smaller than beta_min")
        return self


class RunConfig(StrictModel):
    dataset_dir: Path | None = None
    output_dir: Path | None = None
    morphings_dir: Path | None = None
    coarse_mesh: Path | None = None
    seed: int = 0
    workers: int = Field(default=1, ge=1)
    toy: ToyConfig = ToyConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    surrogate: SurrogateConfig = SurrogateConfig()

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


def _describe(error: ValidationError) -> str:
    messages = []
    for issue in error.errors():
        location = ".".join(str(part) for part in issue["loc"]) or "<root>"
        if issue["type"] == "extra_forbidden":
            messages.append(f"unknown key '{location}'")
        else:
            messages.append(f"{location}: {issue['msg']}")
    return "; ".join(messages)


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        return RunConfig.model_validate_json(text)
    except ValidationError as exc:
        raise ConfigError(f"{source}: {_describe(exc)}") from exc


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_run_config(path.read_text(encoding="utf-8"), source=str(path))

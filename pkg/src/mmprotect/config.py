"""Run configuration: one JSON document, unknown keys rejected, defaults echoed."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ProtectionConfig(_Strict):
    eps_x: float = Field(8 / 255, ge=0, le=16 / 255 + 1e-12)
    eps_t: int = Field(5, ge=0)
    alpha_x: float = Field(1 / 255, gt=0)
    rounds: int = Field(5, ge=0)
    inner_steps: int = Field(1, ge=0)
    inner_lr: float = Field(1e-2, ge=0)
    inner_low_rank: int = Field(0, ge=0)
    pgd_iters: int = Field(2, ge=0)
    top_k: int = Field(16, ge=1)
    lambda_train: float = Field(1.0, ge=0)
    lambda_bind: float = Field(1.0, ge=0)
    beta: tuple[float, float, float] = (1.0, 1.0, 1.0)
    tau_delta: float = Field(0.25, gt=0, le=1)
    layers: tuple[int, ...] = (0,)
    binding: Literal["bph", "crs"] = "bph"
    objective: Literal["minmin", "max"] = "minmin"
    surrogate_seeds: tuple[int, ...] = (0, 1)
    ensemble_weights: Optional[tuple[float, ...]] = None
    init_mode: Literal["zero", "uniform"] = "zero"
    trigger_position: Union[Literal["append", "prepend"], int] = "append"
    seed: int = 0

    @field_validator("beta")
    @classmethod
    def _beta(cls, v):
        if min(v) < 0:
            raise ValueError("beta weights must be nonnegative")
        return v

    @model_validator(mode="after")
    def _weights(self):
        if not self.surrogate_seeds:
            raise ValueError("need at least one surrogate")
        if self.ensemble_weights is not None:
            w = self.ensemble_weights
            if len(w) != len(self.surrogate_seeds):
                raise ValueError("ensemble_weights must match surrogate_seeds")
            if min(w) < 0 or abs(sum(w) - 1.0) > 1e-9:
                raise ValueError("ensemble_weights must be nonnegative and sum to 1")
        return self

    @property
    def weights(self) -> tuple[float, ...]:
        if self.ensemble_weights is not None:
            return self.ensemble_weights
        m = len(self.surrogate_seeds)
        return tuple([1.0 / m] * m)


class AttackConfig(_Strict):
    recipe: Literal["full", "projector_only", "low_rank"] = "full"
    rank: Literal[2, 4, 8] = 4
    epochs: int = Field(40, ge=0)
    lr: float = Field(3e-3, gt=0)
    batch_size: int = Field(16, ge=1)
    seed: int = 0
    model_seed: int = 0
    transforms: tuple[str, ...] = ()
    mix_ratio: float = Field(1.0, ge=0, le=1)


class EvalConfig(_Strict):
    max_new_tokens: int = Field(8, ge=1)


class DataConfig(_Strict):
    n_train: int = Field(256, ge=1)
    n_eval: int = Field(128, ge=1)
    seed: int = 0


class RunConfig(_Strict):
    protection: ProtectionConfig = ProtectionConfig()
    attack: AttackConfig = AttackConfig()
    eval: EvalConfig = EvalConfig()
    data: DataConfig = DataConfig()


def config_hash(cfg: BaseModel) -> str:
    blob = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return RunConfig.model_validate_json(Path(path).read_text())

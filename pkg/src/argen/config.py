"""Pipeline configuration: strict JSON schema with documented defaults."""

from __future__ import annotations

import hashlib
import json
import os
from typing import Literal, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .labels import SCARCE


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DomainParams(_Strict):
    n_identities: int = Field(24, ge=1)
    train_non_scarce: int = Field(40, ge=0)
    train_scarce: int = Field(6, ge=0)
    test_per_class: int = Field(10, ge=1)
    M: int = Field(16, ge=2)
    H: int = Field(64, ge=32)
    W: int = Field(64, ge=32)
    jitter: float = Field(0.03, ge=0.0)
    peak_range: tuple[float, float] = (0.5, 1.0)
    scarce: tuple[str, ...] = SCARCE


class ScheduleParams(_Strict):
    T_max: int = Field(50, ge=1)
    beta_start: float = Field(1e-4, gt=0.0, lt=1.0)
    beta_end: float = Field(0.05, gt=0.0, lt=1.0)

    @model_validator(mode="after")
    def _ordered(self):
        if self.beta_end < self.beta_start:
            raise ValueError("beta_end must be >= beta_start")
        return self


class DenoiserConfig(_Strict):
    epochs: int = Field(600, ge=0)
    lr: float = Field(2e-3, gt=0.0)
    batch_size: int = Field(256, ge=1)
    cond_dropout: float = Field(0.1, ge=0.0, le=1.0)
    hidden: tuple[int, ...] = (128, 128)


class SamplerParams(_Strict):
    K_q: int = Field(8, ge=1)
    U: int = Field(1, ge=0)
    g_min: float = 7.0
    g_max: float = 11.0
    M_score: int = Field(8, ge=2)
    clip_x0: bool = True

    @model_validator(mode="after")
    def _ordered(self):
        if self.g_max < self.g_min:
            raise ValueError("g_max must be >= g_min")
        return self


class GridParams(_Strict):
    S_T: tuple[int, ...] = (5, 10, 15, 20)
    S_a: tuple[float, ...] = (2.0, 3.0)
    S_b: tuple[float, ...] = (2.0, 3.0)

    @model_validator(mode="after")
    def _supported(self):
        from .policy import S_A, S_B, S_T

        for name, got, built in (("S_T", self.S_T, S_T), ("S_a", self.S_a, S_A), ("S_b", self.S_b, S_B)):
            if not got:
                raise ValueError(f"{name} must be non-empty")
            if tuple(got) != tuple(built):
                raise ValueError(f"{name}={list(got)} differs from the policy's built-in grid {list(built)}")
        return self


class RewardParams(_Strict):
    lam: float = Field(3.0, ge=0.0)
    gamma: float = Field(1.0, ge=0.0)
    k: int = Field(1, ge=1)
    alpha: float = Field(0.6, ge=0.0, le=1.0)
    a_max: Union[Literal["auto"], float] = "auto"

    @field_validator("a_max")
    @classmethod
    def _positive(cls, v):
        if v != "auto" and not float(v) > 0:
            raise ValueError("a_max must be 'auto' or positive")
        return v


class RLParams(_Strict):
    lr: float = Field(1e-4, gt=0.0)
    batch_size: int = Field(32, ge=1)
    pool_size: int = Field(4, ge=1)
    max_iters: int = Field(2000, ge=1)
    val_every: int = Field(50, ge=1)
    patience: int = Field(200, ge=1)
    tol: float = Field(1e-3, ge=0.0)
    train_fraction: float = Field(0.8, gt=0.0, lt=1.0)


class ClassifierParams(_Strict):
    lr: float = Field(0.1, gt=0.0)
    epochs: int = Field(500, ge=0)
    l2: float = Field(1e-4, ge=0.0)


class ExperimentParams(_Strict):
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)


class PipelineConfig(_Strict):
    seed: int
    kb: str = "default"
    domain: DomainParams = DomainParams()
    schedule: ScheduleParams = ScheduleParams()
    denoiser: DenoiserConfig = DenoiserConfig()
    sampler: SamplerParams = SamplerParams()
    grids: GridParams = GridParams()
    reward: RewardParams = RewardParams()
    rl: RLParams = RLParams()
    classifier: ClassifierParams = ClassifierParams()
    experiment: ExperimentParams = ExperimentParams()

    @field_validator("kb")
    @classmethod
    def _kb_exists(cls, v):
        if v != "default" and not os.path.isfile(v):
            raise ValueError(f"knowledge-base file {v!r} does not exist")
        return v

    def with_seed(self, seed: int) -> "PipelineConfig":
        return self.model_copy(update={"seed": int(seed)})

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def _format_validation(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        if err["type"] == "extra_forbidden":
            parts.append(f"unknown key {loc!r}")
        else:
            parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def parse_config(obj) -> PipelineConfig:
    try:
        return PipelineConfig.model_validate(obj)
    except ValidationError as exc:
        raise ConfigError(f"invalid config: {_format_validation(exc)}") from None


def load_config(path) -> PipelineConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: JSON parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return parse_config(obj)

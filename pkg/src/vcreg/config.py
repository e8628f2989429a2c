"""Experiment configuration schema.

Configs are YAML files validated by pydantic; unknown keys are rejected so a
misspelled hyperparameter fails loudly instead of silently using a default.
"""

from __future__ import annotations

from pathlib import Path
from typing import Annotated, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .core import PLACEMENTS, VCRegConfig


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


def _with_kind(data, key: str, default: str):
    """Let a nested section omit ``kind`` when it is the default variant."""
    if isinstance(data, dict) and isinstance(data.get(key), dict) and "kind" not in data[key]:
        data = {**data, key: {**data[key], "kind": default}}
    return data


class TwoMoonsData(_Strict):
    kind: Literal["two_moons"] = "two_moons"
    n: int = Field(400, gt=0)
    gap: float = 0.5
    noise_sd: float = Field(0.05, ge=0)

    @field_validator("n")
    @classmethod
    def _even(cls, v):
        if v % 2:
            raise ValueError("n must be even")
        return v


class HierarchicalData(_Strict):
    kind: Literal["hierarchical_gaussians"] = "hierarchical_gaussians"
    n_super: int = Field(4, ge=1)
    subs_per_super: int = Field(3, ge=1)
    n_per_sub: int = Field(200, ge=1)
    d: int = Field(16, ge=1)
    super_spread: float = Field(3.0, gt=0)
    sub_spread: float = Field(1.5, gt=0)
    within_sd: float = Field(0.5, gt=0)


class CsvData(_Strict):
    kind: Literal["csv"] = "csv"
    path: str
    features: list[str]
    label: str
    super_label: Optional[str] = None
    image_shape: Optional[tuple[int, int, int]] = None


class DatasetConfig(_Strict):
    source: Annotated[Union[TwoMoonsData, HierarchicalData, CsvData], Field(discriminator="kind")] = (
        Field(default_factory=TwoMoonsData))
    seed: Optional[int] = None  # None: derive from the run seed
    target: Literal["label", "super_label"] = "label"
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)

    @model_validator(mode="before")
    @classmethod
    def _default_kind(cls, data):
        return _with_kind(data, "source", "two_moons")

    @field_validator("split")
    @classmethod
    def _sums_to_one(cls, v):
        if any(f < 0 for f in v) or abs(sum(v) - 1.0) > 1e-9 or v[0] <= 0:
            raise ValueError("split fractions must be non-negative, sum to 1, and give train > 0")
        return v


class MlpModel(_Strict):
    kind: Literal["mlp"] = "mlp"
    hidden: list[int] = Field(default_factory=lambda: [128, 128])

    @field_validator("hidden")
    @classmethod
    def _positive(cls, v):
        if not v or any(w <= 0 for w in v):
            raise ValueError("hidden widths must be a non-empty list of positive ints")
        return v


class ConvModel(_Strict):
    kind: Literal["convnet"] = "convnet"
    blocks: list[tuple[int, int, int]] = Field(default_factory=lambda: [(4, 3, 1), (8, 3, 2)])


class VCRegSection(_Strict):
    alpha: float = Field(0.64, ge=0)
    beta: float = Field(0.04, ge=0)
    delta: float = Field(1.0, gt=0)
    epsilon: float = Field(1e-4, gt=0)
    penalty: Literal["auto", "squared", "smooth_l1"] = "auto"
    path: Literal["naive", "fast"] = "fast"
    placement: Literal[PLACEMENTS] = "every_block"  # type: ignore[valid-type]
    mean_removal: bool = True

    def build(self) -> VCRegConfig:
        return VCRegConfig(**self.model_dump())


class OptimizerConfig(_Strict):
    lr: float = Field(0.05, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(0.0, ge=0)
    no_decay: list[str] = Field(default_factory=list)
    epochs: int = Field(200, ge=1)
    batch_size: int = Field(64, ge=2)
    warmup_epochs: int = Field(0, ge=0)
    cosine: bool = False


class EvalConfig(_Strict):
    probe_l2: list[float] = Field(default_factory=lambda: [1e-4, 1e-3, 1e-2, 1e-1])
    boundary_resolution: int = Field(200, ge=2)
    boundary_pad: float = Field(0.5, ge=0)


class ExperimentConfig(_Strict):
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    model: Annotated[Union[MlpModel, ConvModel], Field(discriminator="kind")] = Field(default_factory=MlpModel)
    vcreg: Optional[VCRegSection] = Field(default_factory=VCRegSection)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    evaluation: EvalConfig = Field(default_factory=EvalConfig)
    seeds: list[int] = Field(default_factory=lambda: [0])
    outputs: str = "runs/default"

    @model_validator(mode="before")
    @classmethod
    def _default_kind(cls, data):
        return _with_kind(data, "model", "mlp")

    @model_validator(mode="after")
    def _check(self):
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        if isinstance(self.model, ConvModel) and not isinstance(self.dataset.source, CsvData):
            raise ValueError("convnet models need image data (csv source with image_shape)")
        return self


class SweepConfig(_Strict):
    base: ExperimentConfig = Field(default_factory=ExperimentConfig)
    alphas: list[float] = Field(default_factory=lambda: [1.28, 0.64, 0.32, 0.16])
    betas: list[float] = Field(default_factory=lambda: [0.16, 0.08, 0.04, 0.02, 0.01])
    workers: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _non_empty(self):
        if not self.alphas or not self.betas:
            raise ValueError("sweep grid must be non-empty")
        if self.base.vcreg is None:
            raise ValueError("sweep needs a vcreg section in base")
        return self


class BenchConfig(_Strict):
    """Latency scenario shared by every listed variant."""

    variants: list[Literal["identity", "naive", "fast", "bn_like"]] = Field(
        default_factory=lambda: ["identity", "naive", "fast", "bn_like"], min_length=1)
    batch: int = Field(128, ge=2)
    width: int = Field(512, ge=1)
    sites: int = Field(12, ge=1)
    in_dim: int = Field(512, ge=1)
    classes: int = Field(10, ge=2)
    warmup: int = Field(3, ge=3)
    measured: int = Field(10, ge=10)
    threads: int = Field(1, ge=1)
    seed: int = 0
    alpha: float = Field(0.64, ge=0)
    beta: float = Field(0.04, ge=0)
    penalty: Literal["squared", "smooth_l1"] = "squared"


def _format_error(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)


def parse(data, model=ExperimentConfig):
    try:
        return model.model_validate(data or {})
    except ValidationError as exc:
        raise ConfigError(_format_error(exc)) from None


def load(path: str | Path, model=ExperimentConfig):
    try:
        data = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse(data, model)


def dump(cfg: BaseModel) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)

"""Run configuration: JSON with a published schema and dotted-path overrides.

Defaults are scaled down to the toy corpus.
The full-size values are kept alongside in ``FULL_SIZE_REFERENCE`` for comparison.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .augment import MaskPolicy
from .errors import ConfigValidation

SelectionMode = Literal["curriculum-cs", "curriculum-crs", "threshold", "full-pool", "oracle", "supervised"]

FULL_SIZE_REFERENCE = {
    "optim.peak_lr": 5e-5,
    "optim.S": 20_000,
    "optim.F": 30_000,
    "optim.batch_size_labeled": 64,
    "ssl.mu": 5,
    "curriculum.C": 100,
    "curriculum.K": 5,
    "ssl.lam": 1.0,
    "ssl.alpha": 0.999960,
    "ssl.tau": 0.95,
    "augment.time_mask_len": 10,
    "augment.time_mask_total_prob": 0.65,
    "augment.chan_mask_len": 64,
    "augment.chan_mask_prob": 0.5,
}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ModelConfig(_Strict):
    window: int = Field(2, ge=0)
    hidden: int = Field(64, ge=1)


class OptimConfig(_Strict):
    peak_lr: float = Field(5e-3, gt=0)
    S: int = Field(1500, ge=0, description="supervised-only warmup iterations")
    F: int = Field(1500, ge=1, description="semi-supervised iterations, counted in labeled batches")
    batch_size_labeled: int = Field(16, ge=1)
    batch_size_unlabeled: int = Field(16, ge=1)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)


class CurriculumConfig(_Strict):
    C: int = Field(10, ge=1, description="pool capacity in unlabeled batches")
    K: int = Field(5, ge=1)


class SSLConfig(_Strict):
    selection_mode: SelectionMode = "curriculum-cs"
    mu: int = Field(2, ge=1)
    lam: float = Field(1.0, ge=0)
    alpha: Optional[float] = Field(None, ge=0, le=1, description="EMA decay; derived from retention if null")
    alpha_retention: float = Field(0.3, gt=0, lt=1)
    tau: float = Field(0.95, ge=0, le=1)
    cs_variant: Literal["first", "mean", "max"] = "first"


class AugmentConfig(_Strict):
    time_mask_len: int = Field(2, ge=1)
    time_mask_total_prob: float = Field(0.3, ge=0, le=1)
    chan_mask_len: int = Field(2, ge=1)
    chan_mask_prob: float = Field(0.2, ge=0, le=1)

    def strong(self) -> MaskPolicy:
        return MaskPolicy(self.time_mask_len, self.time_mask_total_prob,
                          self.chan_mask_len, self.chan_mask_prob, "strong")


class TrainConfig(_Strict):
    data: str = Field(description="corpus directory written by gen-data")
    seed: int = 0
    eval_every: int = Field(250, ge=1)
    divergence_ter: float = Field(0.98, gt=0)
    divergence_patience: int = Field(3, ge=1)
    dump_pool: bool = False
    checkpoint_every_eval: bool = True
    model: ModelConfig = ModelConfig()
    optim: OptimConfig = OptimConfig()
    curriculum: CurriculumConfig = CurriculumConfig()
    ssl: SSLConfig = SSLConfig()
    augment: AugmentConfig = AugmentConfig()

    @model_validator(mode="after")
    def _stages_fit(self):
        if self.curriculum.K > self.optim.F:
            raise ValueError("curriculum.K must not exceed optim.F")
        return self


def _error_path(err: ValidationError) -> tuple[str, str]:
    first = err.errors()[0]
    path = ".".join(str(p) for p in first["loc"])
    return path, first["msg"]


def validate(raw: dict) -> TrainConfig:
    try:
        return TrainConfig.model_validate(raw)
    except ValidationError as exc:
        path, msg = _error_path(exc)
        raise ConfigValidation(path, msg) from None


def parse_value(text: str):
    """JSON-decode an override value, falling back to the raw string."""
    try:
        return json.loads(text)
    except ValueError:
        return text


def apply_overrides(raw: dict, assignments) -> dict:
    """Apply ``key.sub=value`` assignments to a nested dict (copied)."""
    out = json.loads(json.dumps(raw))
    for item in assignments or ():
        if "=" not in item:
            raise ConfigValidation(item, "override must look like key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            nxt = node.setdefault(p, {})
            if not isinstance(nxt, dict):
                raise ConfigValidation(key, f"{p} is not a section")
            node = nxt
        node[parts[-1]] = parse_value(value)
    return out


def load_config(path=None, overrides=None, **top) -> TrainConfig:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigValidation("", f"cannot read config {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigValidation("", "config root must be an object")
    raw = apply_overrides(raw, overrides)
    for key, value in top.items():
        if value is not None:
            raw[key] = value
    return validate(raw)


def config_schema() -> dict:
    return TrainConfig.model_json_schema()

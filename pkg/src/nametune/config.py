"""YAML run configuration for the ``tune`` and ``baseline`` commands."""
from __future__ import annotations

from pathlib import Path
from typing import Any, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .classify import DEFAULT_PROMPT
from .errors import ConfigurationError
from .protocol import TUNING_METHODS, Paradigm, normalize_method
from .train import TrainConfig

# TrainConfig fields a config file may pin; the rest come from the method, the seed list or the ablation block
TRAIN_KEYS = {"optimizer", "learning_rate", "batch_size", "epochs", "alpha", "checkpoint_policy", "l_context"}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class EncoderSection(_Strict):
    kind: str = "toy-transformer"
    seed: int = 0
    options: dict[str, Any] = Field(default_factory=dict)


class DataSection(_Strict):
    manifest: str
    cache: Optional[str] = None


class AblationSection(_Strict):
    random_names: bool = False


class RunConfig(_Strict):
    method: str
    data: DataSection
    encoder: EncoderSection = Field(default_factory=EncoderSection)
    paradigm: Optional[Paradigm] = None
    n: Optional[int] = None
    k: int = 5
    seeds: Optional[list[int]] = None
    grids: Optional[dict[str, list[Any]]] = None
    prompt: str = DEFAULT_PROMPT
    prompts: Optional[list[str]] = None
    train: dict[str, Any] = Field(default_factory=dict)
    ablation: AblationSection = Field(default_factory=AblationSection)
    selection_episodes: int = 10
    query_per_class: Optional[int] = 15
    output: str = "run"

    @field_validator("method")
    @classmethod
    def _method(cls, v: str) -> str:
        try:
            return normalize_method(v)
        except ConfigurationError as exc:
            raise ValueError(str(exc)) from None

    @field_validator("train")
    @classmethod
    def _train(cls, v: dict) -> dict:
        unknown = sorted(set(v) - TRAIN_KEYS)
        if unknown:
            raise ValueError(f"unknown training key(s) {unknown}; allowed: {sorted(TRAIN_KEYS)}")
        return v

    @field_validator("k", "selection_episodes")
    @classmethod
    def _positive(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v):
        if v is not None and not v:
            raise ValueError("seed list is empty")
        return v

    def base(self) -> dict:
        """Fixed training fields handed to the protocol runner."""
        out = dict(self.train)
        out["prompt"] = self.prompt
        out["ablation_random_names"] = self.ablation.random_names
        if self.prompts:
            out["prompts"] = list(self.prompts)
        return out

    def resolve_path(self, value: str, root: Path) -> Path:
        p = Path(value)
        return p if p.is_absolute() else root / p


def _format_error(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        key = ".".join(str(x) for x in err["loc"]) or "<root>"
        msg = "unknown key" if err["type"] == "extra_forbidden" else err["msg"]
        parts.append(f"config key '{key}': {msg}")
    return "; ".join(parts)


def parse_config(obj, allowed_methods=None) -> RunConfig:
    if not isinstance(obj, dict):
        raise ConfigurationError("config must be a mapping")
    try:
        cfg = RunConfig.model_validate(obj)
    except ValidationError as exc:
        raise ConfigurationError(_format_error(exc)) from None
    if allowed_methods is not None and cfg.method not in allowed_methods:
        raise ConfigurationError(
            f"config key 'method': {cfg.method!r} is not one of {sorted(allowed_methods)} for this command"
        )
    if cfg.method in TUNING_METHODS:
        try:
            TrainConfig(method=cfg.method, **cfg.train)
        except (ConfigurationError, ValueError, TypeError) as exc:
            raise ConfigurationError(f"config key 'train': {exc}") from None
    elif cfg.train:
        raise ConfigurationError(f"config key 'train': not used by {cfg.method}")
    return cfg


def load_config(path, allowed_methods=None) -> RunConfig:
    try:
        obj = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: invalid YAML: {exc}") from None
    return parse_config(obj, allowed_methods)

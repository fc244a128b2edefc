"""Typed pipeline configuration loaded from a sectioned YAML file.

String values may reference environment variables as ``${NAME}``. Unknown
keys are rejected. Anything left unset is filled from the active profile
(``desk`` runs stub backends at toy scale, ``full`` uses configured remotes).
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError, InvalidConfig
from .extraction import DEFAULT_K, DEFAULT_TEMPERATURE
from .finetune import DEFAULT_CHECKPOINT_EVERY, DEFAULT_LR, DEFAULT_STEPS, FinetuneConfig, normalize_strategy
from .generate import DEFAULT_GUIDANCE, DEFAULT_INFERENCE_STEPS, Mode
from .priorkit import DEFAULT_LAMBDA, DEFAULT_RARE_TOKENS

Profile = Literal["desk", "full"]
DEFAULT_PRIOR_COUNT = {"desk": 4, "full": 200}
DEFAULT_NUM_IMAGES = {"desk": 2, "full": 10}

_ENV_REF = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class BackendSpec(_Section):
    kind: Literal["stub", "remote", "diffusers"] = "stub"
    endpoint: str | None = None
    model_id: str | None = None
    auth_env: str | None = None
    timeout: float = Field(60.0, gt=0)
    options: dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _remote_needs_endpoint(self) -> BackendSpec:
        if self.kind == "remote" and not self.endpoint:
            raise ValueError("remote backends need an endpoint")
        return self


class BackendsConfig(_Section):
    diffusion: BackendSpec = Field(default_factory=BackendSpec)
    captioner: BackendSpec = Field(default_factory=BackendSpec)
    llm: BackendSpec = Field(default_factory=BackendSpec)
    embedder: BackendSpec = Field(default_factory=BackendSpec)

    @field_validator("diffusion")
    @classmethod
    def _diffusion_kinds(cls, v: BackendSpec) -> BackendSpec:
        if v.kind == "remote":
            raise ValueError("diffusion backends run in-process: use kind 'stub' or 'diffusers'")
        return v


class ExtractionSection(_Section):
    k: int = Field(DEFAULT_K, ge=1)
    temperature: float = Field(DEFAULT_TEMPERATURE, ge=0)
    seed: int = 0
    max_workers: int = Field(1, ge=1)
    cache: bool = True


class PriorsSection(_Section):
    count: int | None = Field(None, ge=1)
    seed: int = 0
    steps: int = Field(DEFAULT_INFERENCE_STEPS, ge=1)
    guidance: float = DEFAULT_GUIDANCE


class FinetuneSection(_Section):
    strategy: str = Field("db", validate_default=True)
    lr: float | None = Field(None, gt=0)
    steps: int | None = Field(None, ge=1)
    lambda_: float = Field(DEFAULT_LAMBDA, ge=0, alias="lambda")
    tokens: list[str] = Field(default_factory=lambda: list(DEFAULT_RARE_TOKENS), min_length=1)
    augmentation: bool | None = None
    prior_mode: Literal["all", "one"] = "one"
    draws: int = Field(1, ge=1)
    seed: int = 0
    checkpoint_every: int = Field(DEFAULT_CHECKPOINT_EVERY, ge=1)
    ratio_range: tuple[float, float] = (0.4, 1.4)
    ratio_thresholds: tuple[float, float] = (0.8, 1.2)

    @field_validator("strategy")
    @classmethod
    def _known_strategy(cls, v: str) -> str:
        try:
            return normalize_strategy(v)
        except InvalidConfig as exc:
            raise ValueError(str(exc)) from None

    @field_validator("tokens")
    @classmethod
    def _whitespace_free(cls, v: list[str]) -> list[str]:
        for token in v:
            if not token or any(ch.isspace() for ch in token):
                raise ValueError(f"token {token!r} must be non-empty and whitespace-free")
        if len(set(v)) != len(v):
            raise ValueError("tokens must be distinct")
        return v


class GenerateSection(_Section):
    num_images: int | None = Field(None, ge=1)
    steps: int = Field(DEFAULT_INFERENCE_STEPS, ge=1)
    guidance: float = DEFAULT_GUIDANCE
    seed: int = 0
    methods: list[str] = Field(default_factory=lambda: [m.value for m in Mode])

    @field_validator("methods")
    @classmethod
    def _known_methods(cls, v: list[str]) -> list[str]:
        return [Mode.parse(m).value for m in v]


class Config(_Section):
    profile: Profile = "desk"
    backend: BackendsConfig = Field(default_factory=BackendsConfig)
    extraction: ExtractionSection = Field(default_factory=ExtractionSection)
    priors: PriorsSection = Field(default_factory=PriorsSection)
    finetune: FinetuneSection = Field(default_factory=FinetuneSection)
    generate: GenerateSection = Field(default_factory=GenerateSection)

    @model_validator(mode="after")
    def _fill_profile_defaults(self) -> Config:
        strategy = self.finetune.strategy
        if self.finetune.lr is None:
            self.finetune.lr = DEFAULT_LR[strategy]
        if self.finetune.steps is None:
            self.finetune.steps = DEFAULT_STEPS[self.profile][strategy]
        if self.finetune.augmentation is None:
            self.finetune.augmentation = strategy == "cross-attention"
        if self.finetune.augmentation and strategy != "cross-attention":
            raise ValueError("finetune.augmentation requires the cross-attention strategy")
        if self.priors.count is None:
            self.priors.count = DEFAULT_PRIOR_COUNT[self.profile]
        if self.generate.num_images is None:
            self.generate.num_images = DEFAULT_NUM_IMAGES[self.profile]
        return self

    def finetune_config(self, **overrides: Any) -> FinetuneConfig:
        f = self.finetune
        values = dict(
            strategy=f.strategy,
            learning_rate=f.lr,
            max_steps=f.steps,
            lambda_=f.lambda_,
            token=f.tokens[0],
            augmentation=f.augmentation,
            seed=f.seed,
            profile=self.profile,
            prior_mode=f.prior_mode,
            draws=f.draws,
            ratio_range=f.ratio_range,
            ratio_thresholds=f.ratio_thresholds,
            checkpoint_every=f.checkpoint_every,
        )
        values.update(overrides)
        return FinetuneConfig(**values)

    def fingerprint(self) -> str:
        blob = json.dumps(self.model_dump(mode="json", by_alias=True), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _interpolate(value: Any, errors: list[tuple[str, str]], path: str = "") -> Any:
    if isinstance(value, dict):
        return {k: _interpolate(v, errors, f"{path}.{k}" if path else str(k)) for k, v in value.items()}
    if isinstance(value, list):
        return [_interpolate(v, errors, f"{path}[{i}]") for i, v in enumerate(value)]
    if isinstance(value, str):

        def sub(m: re.Match) -> str:
            name = m.group(1)
            if name not in os.environ:
                errors.append((path, f"environment variable {name} is not set"))
                return m.group(0)
            return os.environ[name]

        return _ENV_REF.sub(sub, value)
    return value


def _loc(loc: tuple) -> str:
    return ".".join(str(p) for p in loc) or "<root>"


def config_from_mapping(
    data: dict | None,
    *,
    profile: Profile | None = None,
    overrides: dict[str, dict[str, Any]] | None = None,
) -> Config:
    """Validate a raw mapping; raises ConfigError listing every (key, message).

    ``overrides`` maps section names to values that replace the file's entries
    (used for command-line flags) before profile defaults are filled in.
    """
    data = dict(data or {})
    errors: list[tuple[str, str]] = []
    data = _interpolate(data, errors)
    if profile is not None:
        data["profile"] = profile
    for section, values in (overrides or {}).items():
        merged = dict(data.get(section) or {})
        merged.update({k: v for k, v in values.items() if v is not None})
        data[section] = merged
    if errors:
        raise ConfigError(errors)
    try:
        return Config.model_validate(data)
    except ValidationError as exc:
        raise ConfigError([(_loc(e["loc"]), e["msg"]) for e in exc.errors()]) from None


def validate_config(
    path: str | Path | None,
    *,
    profile: Profile | None = None,
    overrides: dict[str, dict[str, Any]] | None = None,
) -> Config:
    if path is None:
        return config_from_mapping({}, profile=profile, overrides=overrides)
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError([("<file>", f"not valid YAML: {exc}")]) from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError([("<root>", "config must be a mapping of sections")])
    return config_from_mapping(data, profile=profile, overrides=overrides)

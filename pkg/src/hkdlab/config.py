"""Experiment configuration: a TOML file validated against a pydantic schema.

Unknown keys are rejected, every constraint violation is collected (not just
the first), and every default that had to be filled in is logged.  The
resolved configuration can be dumped back to canonical TOML; re-validating
that snapshot yields the same configuration.
"""

from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Any, Literal

import tomli
import tomli_w
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .corpus import SyntheticFamilySpec
from .distill import DistillationPlan, Lambda2Schedule
from .errors import HkdError

log = logging.getLogger(__name__)


class ConfigError(HkdError):
    """All problems found in one configuration file, each as ``field.path: message``."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True, validate_default=True)


class SyntheticSection(_Section):
    n_families: int = Field(3, ge=1)
    langs_per_family: int = Field(3, ge=1)
    noise: float = Field(0.15, ge=0.0, lt=0.5)
    train_sentences: int = Field(400, ge=1)
    low_resource_sentences: int = Field(40, ge=1)
    low_resource_per_family: int = Field(1, ge=1)
    dev_sentences: int = Field(40, ge=1)
    test_sentences: int = Field(60, ge=1)
    min_words: int = Field(2, ge=1)
    max_words: int = Field(4, ge=1)
    alphabet_size: int = Field(12, ge=2, le=26)
    lexicon_size: int = Field(60, ge=1)
    token_noise: float = Field(0.0, ge=0.0, lt=0.5)
    kb_dim: int = Field(12, ge=1)
    kb_view: Literal["typology", "family"] = "typology"
    kb_flip: float = Field(0.05, ge=0.0, lt=0.5)

    @model_validator(mode="after")
    def _consistent(self):
        if self.low_resource_per_family > self.langs_per_family:
            raise ValueError("low_resource_per_family must not exceed langs_per_family")
        if self.low_resource_sentences >= self.train_sentences:
            raise ValueError("low_resource_sentences must be smaller than train_sentences")
        if self.min_words > self.max_words:
            raise ValueError("min_words must not exceed max_words")
        return self

    def to_spec(self) -> SyntheticFamilySpec:
        return SyntheticFamilySpec(**self.model_dump())


class DataSection(_Section):
    source: Literal["synthetic", "files"]
    synthetic: SyntheticSection | None = None
    root: str | None = None
    mode: Literal["char", "whitespace"] = "whitespace"
    languages: list[str] = Field(default_factory=list)
    tiers: dict[str, str] = Field(default_factory=dict)
    families: dict[str, str] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _source_fields(self):
        if self.source == "files" and not self.root:
            raise ValueError("source 'files' needs data.root")
        if self.source == "synthetic" and self.synthetic is None:
            self.synthetic = SyntheticSection()
        return self


class ClusteringSection(_Section):
    type_id: int = Field(ge=1)
    source: Literal["kb", "nmt", "fused", "random"]
    n_clusters: int = Field(ge=1)
    kb_csv: str | None = None
    n_init: int = Field(1, ge=1)
    keep_fraction: float = Field(0.99, gt=0.0, le=1.0)


class ModelSection(_Section):
    emb: int = Field(32, ge=1)
    hidden: int = Field(64, ge=1)
    init_scale: float = Field(0.15, gt=0.0)


class OptimizerSection(_Section):
    lr: float = Field(1e-3, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)


class Lambda2Section(_Section):
    start: float = Field(0.5, ge=0.0)
    end: float = Field(3.0, ge=0.0)
    shape: Literal["linear", "sigmoid"] = "linear"

    @model_validator(mode="after")
    def _order(self):
        if self.start > self.end:
            raise ValueError("start must not exceed end")
        return self


class PlanSection(_Section):
    lam: float = Field(0.6, alias="lambda", ge=0.0, le=1.0)
    lam1: float = Field(0.5, alias="lambda1", ge=0.0)
    lambda2: Lambda2Section = Field(default_factory=Lambda2Section)
    check_every: int = Field(2, ge=1)
    threshold: float = 1.0
    temperature: float = Field(1.0, gt=0.0)
    exclude_worst_ta: bool = False

    @field_validator("threshold")
    @classmethod
    def _not_nan(cls, v: float) -> float:
        if math.isnan(v):
            raise ValueError("threshold must not be NaN")
        return v

    def to_plan(self) -> DistillationPlan:
        l2 = self.lambda2
        return DistillationPlan(self.lam, self.lam1, Lambda2Schedule(l2.start, l2.end, 1, l2.shape),
                                self.check_every, self.threshold, None, self.temperature)


class EpochsSection(_Section):
    teacher: int = Field(10, ge=0)
    ta: int = Field(10, ge=0)
    student: int = Field(10, ge=0)


class ExperimentConfig(_Section):
    data: DataSection
    clustering: list[ClusteringSection] = Field(default_factory=list)
    model: ModelSection = Field(default_factory=ModelSection)
    optimizer: OptimizerSection = Field(default_factory=OptimizerSection)
    plan: PlanSection = Field(default_factory=PlanSection)
    epochs: EpochsSection = Field(default_factory=EpochsSection)
    batch_size: int = Field(16, ge=1)
    seed: int = Field(0, ge=0)
    output_dir: str = "runs/default"
    order: Literal["blocked", "mixed"] = "blocked"
    accuracy: Literal["bleu", "token_accuracy"] = "bleu"
    upsample: bool = True
    max_decode_len: int = Field(0, ge=0)
    train_baseline: bool = True
    jobs: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _unique_types(self):
        ids = [c.type_id for c in self.clustering]
        if len(set(ids)) != len(ids):
            raise ValueError("clustering type_id values must be unique")
        return self

    def to_toml(self) -> str:
        return dump_toml(self)


def _format_error(err: dict) -> str:
    path = ".".join(str(p) for p in err["loc"]) or "<root>"
    msg = err["msg"]
    if err["type"] == "extra_forbidden":
        msg = "unknown key"
    return f"{path}: {msg}"


def _log_defaults(model: BaseModel, prefix: str = "") -> list[str]:
    """Dotted paths of every field the input left unset, logged one per line."""
    applied = []
    for name, info in type(model).model_fields.items():
        key = info.alias or name
        path = f"{prefix}{key}"
        value = getattr(model, name)
        if name not in model.model_fields_set:
            applied.append(path)
            log.info("config default %s = %r", path, value.model_dump(by_alias=True) if isinstance(value, BaseModel) else value)
        elif isinstance(value, BaseModel):
            applied += _log_defaults(value, path + ".")
        elif isinstance(value, list):
            for i, v in enumerate(value):
                if isinstance(v, BaseModel):
                    applied += _log_defaults(v, f"{path}.{i}.")
    return applied


def validate_mapping(raw: dict[str, Any]) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError([_format_error(err) for err in e.errors()]) from None
    _log_defaults(cfg)
    return cfg


def validate_config(path) -> ExperimentConfig:
    """Parse and validate a TOML experiment file; raises :class:`ConfigError` listing every problem."""
    text = Path(path).read_text()
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as e:
        raise ConfigError([f"<file>: {path}: {e}"]) from None
    return validate_mapping(raw)


def strip_none(obj):
    if isinstance(obj, dict):
        return {k: strip_none(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, list):
        return [strip_none(v) for v in obj]
    return obj


def dump_toml(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(strip_none(cfg.model_dump(by_alias=True)))


def write_snapshot(cfg: ExperimentConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(dump_toml(cfg))

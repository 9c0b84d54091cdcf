"""Experiment configuration stored as YAML with fixed nested sections.

Unknown keys anywhere are rejected so a misspelt hyperparameter fails loudly
instead of silently falling back to its default.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .backbone import BackboneConfig
from .data import ToyDatasetSpec
from .errors import ConfigError
from .model import PrototypeConfig
from .training import PROFILES, STAGE1_STEPS, STAGE2_STEPS, TrainingPlan, dataset_profile

PLAN_OVERRIDES = ("batch_size", "weight_decay", "lambda_j", "lambda_l1_stage1", "lambda_ent",
                  "lambda_l1_stage2", "flip", "crop_pad", "scale_jitter", "betas")
STEP_OVERRIDES = ("iterations", "lr", "lr_policy", "poly_power", "enabled")
DTYPES = ("float32", "float64")


@dataclass
class TrainingSection:
    profile: str = "toy"
    overrides: dict = field(default_factory=dict)
    steps: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}; expected one of {PROFILES}")
        for k in self.overrides:
            if k not in PLAN_OVERRIDES:
                raise ConfigError(f"unknown training override {k!r}")
        for name, ov in self.steps.items():
            if name not in STAGE1_STEPS + STAGE2_STEPS:
                raise ConfigError(f"unknown step {name!r}")
            if not isinstance(ov, dict):
                raise ConfigError(f"step {name!r} overrides must be a mapping")
            for k in ov:
                if k not in STEP_OVERRIDES:
                    raise ConfigError(f"unknown override {k!r} for step {name!r}")


@dataclass
class DataSection:
    train: str | None = None
    eval: str | None = None
    toy: ToyDatasetSpec = field(default_factory=ToyDatasetSpec)
    n_train: int = 200
    n_eval: int = 50

    def __post_init__(self):
        if self.n_train < 1 or self.n_eval < 0:
            raise ConfigError("n_train must be >= 1 and n_eval >= 0")


@dataclass
class ExperimentConfig:
    seed: int = 0
    dtype: str = "float32"
    out: str = "runs/toy"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    prototypes: PrototypeConfig = field(default_factory=PrototypeConfig)
    training: TrainingSection = field(default_factory=TrainingSection)
    data: DataSection = field(default_factory=DataSection)

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {DTYPES}")

    @property
    def num_classes(self) -> int:
        if self.data.train is not None:
            from .data import load_dataset

            n = load_dataset(self.data.train).num_classes
            if n is None:
                raise ConfigError(f"{self.data.train}: meta.json must declare num_classes")
            return int(n)
        return self.data.toy.num_classes

    def plan(self) -> TrainingPlan:
        """The profile's plan with overrides applied; alpha comes from the prototype section."""
        plan = dataset_profile(self.training.profile, seed=self.seed)
        d = plan.to_dict()
        d.update(self.training.overrides)
        d["alpha"] = self.prototypes.alpha
        for step in d["steps"]:
            step.update(self.training.steps.get(step["name"], {}))
        try:
            return TrainingPlan.from_dict(d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, raw, where: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where!r}: {', '.join(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw or {})
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    data = dict(raw.pop("data", None) or {})
    data["toy"] = _build(ToyDatasetSpec, data.get("toy"), "data.toy")
    return _build(ExperimentConfig, {
        **raw,
        "backbone": _build(BackboneConfig, raw.get("backbone"), "backbone"),
        "prototypes": _build(PrototypeConfig, raw.get("prototypes"), "prototypes"),
        "training": _build(TrainingSection, raw.get("training"), "training"),
        "data": _build(DataSection, data, "data"),
    }, "config")


def loads(text: str) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    return from_dict(raw or {})


def load(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    return loads(path.read_text())

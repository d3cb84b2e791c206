"""Experiment configuration: JSON document with one section per config type,
plus ``Section.key=value`` overrides from the command line."""
from __future__ import annotations

import copy
import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .embedding_store import SynthConfig
from .two_branch import ArchitectureSpec, TrainConfig

SEED_ENV = "FUSEID_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    data: str | None = None
    model: str | None = None
    svm: str | None = None
    report_dir: str | None = None
    features_dir: str | None = None


@dataclass
class SvmConfig:
    kernel: str = "poly"
    degree: int = 3
    gamma: float | None = None
    coef0: float = 0.0
    regularization: float = 1.0
    tol: float = 1e-3


# ArchitectureSpec's input/output sizes come from the data, not the config.
_ARCH_DERIVED = {"voice_in_dim", "face_in_dim", "num_classes"}
ARCH_KEYS = {f.name for f in dataclasses.fields(ArchitectureSpec)} - _ARCH_DERIVED

SECTIONS = {
    "paths": PathsConfig,
    "ArchitectureSpec": None,
    "TrainConfig": TrainConfig,
    "SynthConfig": SynthConfig,
    "SvmConfig": SvmConfig,
}


@dataclass
class ExperimentConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    architecture: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    svm: SvmConfig = field(default_factory=SvmConfig)
    seed: int = 0

    def arch_spec(self, voice_dim: int, face_dim: int, num_classes: int) -> ArchitectureSpec:
        spec = ArchitectureSpec(voice_in_dim=voice_dim, face_in_dim=face_dim,
                                num_classes=num_classes, **self.architecture)
        spec.validate()
        return spec

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "paths": dataclasses.asdict(self.paths),
            "ArchitectureSpec": dict(self.architecture),
            "TrainConfig": dataclasses.asdict(self.train),
            "SynthConfig": dataclasses.asdict(self.synth),
            "SvmConfig": dataclasses.asdict(self.svm),
        }


def parse_value(text: str):
    """JSON if it parses (numbers, lists, null, booleans), else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_document(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    return doc


def apply_overrides(doc: dict, overrides) -> dict:
    """``overrides`` is an iterable of (dotted key, value)."""
    doc = copy.deepcopy(doc)
    for key, value in overrides:
        if key == "seed":
            doc["seed"] = value
            continue
        section, _, name = key.partition(".")
        if not name or section not in SECTIONS:
            raise ConfigError(f"unknown config key {key!r}")
        doc.setdefault(section, {})[name] = value
    return doc


def _section(cls, values: dict, section: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"bad {section}: {exc}") from None


def resolve(doc: dict | None = None, env=None) -> ExperimentConfig:
    """Build an ExperimentConfig. Seed precedence: document/flag, then
    $FUSEID_SEED, then 0. Sections without their own seed inherit it."""
    doc = dict(doc or {})
    env = os.environ if env is None else env
    unknown = set(doc) - set(SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    if "seed" in doc:
        seed = doc["seed"]
    elif env.get(SEED_ENV):
        seed = env[SEED_ENV]
    else:
        seed = 0
    try:
        seed = int(seed)
    except (TypeError, ValueError):
        raise ConfigError(f"seed must be an integer, got {seed!r}") from None

    arch = dict(doc.get("ArchitectureSpec", {}))
    bad = set(arch) - ARCH_KEYS
    if bad:
        raise ConfigError(f"unknown or data-derived keys in ArchitectureSpec: {sorted(bad)}")
    train = {"seed": seed, **doc.get("TrainConfig", {})}
    synth = {"seed": seed, **doc.get("SynthConfig", {})}
    cfg = ExperimentConfig(
        paths=_section(PathsConfig, doc.get("paths", {}), "paths"),
        architecture=arch,
        train=_section(TrainConfig, train, "TrainConfig"),
        synth=_section(SynthConfig, synth, "SynthConfig"),
        svm=_section(SvmConfig, doc.get("SvmConfig", {}), "SvmConfig"),
        seed=seed,
    )
    try:
        cfg.train.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg

"""Hierarchical lab config, read from YAML.

Section keys mirror the dataclass field names they feed (WorldSpec,
TrainConfig, PretrainConfig, EvalSetting, ...). Unknown keys are errors so a
typo cannot silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .evaluation import EvalSetting
from .policy import GenerationConfig
from .training import PretrainConfig, TrainConfig
from .world import WorldSpec


@dataclass
class PolicyArch:
    d_model: int = 48
    n_layers: int = 2
    n_heads: int = 2
    context_length: int = 64
    mlp_ratio: int = 4
    vocab_max_size: int = 512

    def arch(self) -> dict:
        return {k: v for k, v in dataclasses.asdict(self).items() if k != "vocab_max_size"}


@dataclass
class TeacherConfig:
    mode: str = "synthetic"
    n_per_query: int = 4
    sft_fraction: float = 0.5
    fixtures: str | None = None  # JSON file of canned completions for mode=external


@dataclass
class BaseConfig:
    """Base-model pre-training; ``enabled: false`` starts SFT from random weights."""

    enabled: bool = True
    n_distractors: int = 20


@dataclass
class ScoreConfig:
    k: int = 3
    max_pairs_per_query: int = 4
    synonyms: bool = True


@dataclass
class EvalConfig:
    k: int = 5
    num_rewrites: int = 2
    settings: list[str] = field(default_factory=lambda: [
        "oqr-raw", "oqr-ranked", "substitute-raw", "substitute-ranked", "expand-raw", "expand-ranked"])
    temperature: float = 0.8
    max_new_tokens: int = 24

    def setting(self, name: str) -> EvalSetting:
        mode, _, order = name.partition("-")
        return EvalSetting(mode=mode, order=order or "raw", k=self.k, num_rewrites=self.num_rewrites)

    def generation(self, seed: int) -> GenerationConfig:
        return GenerationConfig(self.temperature, self.max_new_tokens, max(1, self.num_rewrites), seed)


_SECTIONS = {
    "world": WorldSpec,
    "teacher": TeacherConfig,
    "policy": PolicyArch,
    "base": BaseConfig,
    "pretrain": PretrainConfig,
    "train": TrainConfig,
    "score": ScoreConfig,
    "eval": EvalConfig,
}


@dataclass
class LabConfig:
    seed: int = 0
    world: WorldSpec = field(default_factory=WorldSpec)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    policy: PolicyArch = field(default_factory=PolicyArch)
    base: BaseConfig = field(default_factory=BaseConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    score: ScoreConfig = field(default_factory=ScoreConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _build(cls, values: dict[str, Any], where: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ValueError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    return cls(**values)


def config_from_dict(raw: dict[str, Any] | None, seed: int | None = None) -> LabConfig:
    """Build a LabConfig; a top-level (or explicit) seed fills every section seed left unset."""
    raw = dict(raw or {})
    top_seed = seed if seed is not None else raw.pop("seed", 0)
    raw.pop("seed", None)
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ValueError(f"unknown config section(s): {', '.join(unknown)}")
    built = {}
    for name, cls in _SECTIONS.items():
        values = dict(raw.get(name) or {})
        if "seed" in {f.name for f in fields(cls)}:
            if seed is not None or "seed" not in values:
                values["seed"] = top_seed
        built[name] = _build(cls, values, name)
    return LabConfig(seed=top_seed, **built)


def load_config(path: str | Path | None = None, seed: int | None = None) -> LabConfig:
    raw = {}
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        if not isinstance(raw, dict):
            raise ValueError(f"{path}: top level must be a mapping")
    return config_from_dict(raw, seed)


def dump_config(cfg: LabConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)

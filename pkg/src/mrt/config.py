"""Unified run configuration: model, train, sample, distill and data sections.

Loaded from JSON or YAML. Unknown sections or keys are rejected; missing keys
take the dataclass defaults. The resolved document is what every command
writes to ``config.resolved.json``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .distill import DistillConfig
from .model import ModelConfig
from .sampler import SampleConfig
from .synth import GenParams
from .train import TrainConfig

RESOLVED_NAME = "config.resolved.json"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    count: int = 64
    seed: int = 0
    params: GenParams = GenParams()

    def to_dict(self) -> dict:
        return {"count": self.count, "seed": self.seed, "params": self.params.to_dict()}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    sample: SampleConfig = SampleConfig()
    distill: DistillConfig = DistillConfig()
    data: DataConfig = DataConfig()

    def __post_init__(self):
        s = self.train.patch
        if self.data.params.patch != s:
            raise ConfigError(f"data patch {self.data.params.patch} != train patch {s}")
        if self.model.latent_dim != 4 * s * s:
            raise ConfigError(f"model latent_dim {self.model.latent_dim} != 4*patch^2 = {4 * s * s}")

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "sample": dataclasses.asdict(self.sample),
            "distill": self.distill.to_dict(),
            "data": self.data.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write_resolved(self, out_dir: str | Path) -> Path:
        path = Path(out_dir) / RESOLVED_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    def with_seed(self, seed: int) -> RunConfig:
        """Apply one seed to every section that consumes randomness."""
        return RunConfig(
            model=dataclasses.replace(self.model, seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
            sample=dataclasses.replace(self.sample, seed=seed),
            distill=dataclasses.replace(self.distill, seed=seed),
            data=dataclasses.replace(self.data, seed=seed))


def _build(cls, section: str, raw: Any, tuples: tuple[str, ...] = ()):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    kw = {k: tuple(v) if k in tuples and isinstance(v, list) else v for k, v in raw.items()}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section!r} section: {exc}") from exc


def from_dict(doc: dict | None) -> RunConfig:
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a mapping")
    # "invocation" is the provenance record the CLI adds to resolved configs
    unknown = sorted(set(doc) - {"model", "train", "sample", "distill", "data", "invocation"})
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    data = doc.get("data") or {}
    if not isinstance(data, dict):
        raise ConfigError("section 'data' must be a mapping")
    params = _build(GenParams, "data.params", data.get("params"),
                    ("bg_size", "layers", "shapes"))
    data_cfg = _build(DataConfig, "data", {k: v for k, v in data.items() if k != "params"})
    return RunConfig(
        model=_build(ModelConfig, "model", doc.get("model")),
        train=_build(TrainConfig, "train", doc.get("train"), ("task_mix", "betas")),
        sample=_build(SampleConfig, "sample", doc.get("sample")),
        distill=_build(DistillConfig, "distill", doc.get("distill"), ("task_mix",)),
        data=dataclasses.replace(data_cfg, params=params))


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return from_dict(doc)

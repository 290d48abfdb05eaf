"""Run configuration: a JSON file with ``model``, ``train`` and ``data`` sections.

Example::

    {
      "model": {"channels": 32, "variant": "finola"},
      "train": {"lr": 0.003, "total_steps": 3000},
      "data":  {"count": 8, "size": 32, "seed": 0}
    }

Any key may be overridden as ``section.key=value`` (value parsed as JSON,
falling back to a plain string).
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..autodiff.optim import BASE_LR, WEIGHT_DECAY
from ..models import ModelConfig, for_variant
from .data import SynthSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = BASE_LR
    weight_decay: float = WEIGHT_DECAY
    warmup_steps: int = 100
    total_steps: int = 3000
    batch_size: int = 8
    eval_every: int = 250
    checkpoint_every: int = 0
    # stop once eval PSNR (finola) exceeds this; None trains to total_steps
    target_psnr: float | None = None


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SynthSpec = field(default_factory=SynthSpec)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": dataclasses.asdict(self.train),
            "data": {**dataclasses.asdict(self.data), "weights": list(self.data.weights)},
        }


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": SynthSpec}


def _build(section: str, values: dict):
    cls = _SECTIONS[section]
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")
    if section == "data" and "weights" in values:
        values = {**values, "weights": tuple(values["weights"])}
    try:
        if section == "model" and "upsampler" not in values:
            return for_variant(**{"variant": "finola", **values})
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {section} config: {e}") from e


def parse_override(text: str) -> tuple[str, str, object]:
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"override must look like section.key=value, got {text!r}")
    key, raw = text.split("=", 1)
    section, name = key.split(".", 1)
    if section not in _SECTIONS:
        raise ConfigError(f"unknown config section {section!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return section, name, value


def from_dict(d: dict, overrides=(), seed: int | None = None) -> RunConfig:
    raw = {s: dict(d.get(s, {})) for s in _SECTIONS}
    extra = set(d) - set(_SECTIONS)
    if extra:
        raise ConfigError(f"unknown config sections: {sorted(extra)}")
    for text in overrides:
        section, name, value = parse_override(text)
        raw[section][name] = value
    if seed is not None:
        raw["model"]["seed"] = seed
        raw["data"].setdefault("seed", seed)
    return RunConfig(_build("model", raw["model"]), _build("train", raw["train"]), _build("data", raw["data"]))


def load_config(path, overrides=(), seed: int | None = None) -> RunConfig:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return from_dict(d, overrides, seed)

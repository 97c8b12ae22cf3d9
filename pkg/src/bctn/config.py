"""Run configuration: nested dataclasses addressable with dotted keys."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


@dataclass
class ModelConfig:
    h: int = 64
    J: int = 2
    heads: int = 4
    layers: int = 2
    ff_mult: int = 4
    max_len: int = 64
    dropout: float = 0.1
    gate_heads: int = 4


@dataclass
class FusionConfig:
    alpha: float = 0.8
    beta: float = 0.2


@dataclass
class DecoderConfig:
    layers: int = 2
    heads: int = 4


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch: int = 32
    epochs: int = 30
    max_steps: int = 0  # 0 means no cap beyond epochs
    seed: int = 0
    freeze_reverse: bool = True
    clip: float = 1.0


@dataclass
class DecodeConfig:
    max_len: int = 20
    beam: int = 1


@dataclass
class AblateConfig:
    gate_enabled: bool = True
    reverse_enabled: bool = True


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "Config":
        cfg = cls()
        cfg.update(raw)
        return cfg

    def update(self, raw: dict) -> "Config":
        """Apply nested ({"model": {"h": 8}}) or dotted ({"model.h": 8}) settings."""
        for key, value in _flatten(raw).items():
            self.set(key, value)
        self.validate()
        return self

    def set(self, dotted: str, value: Any) -> None:
        section, _, name = dotted.partition(".")
        if not name or not hasattr(self, section):
            raise KeyError(f"unknown config key {dotted!r}")
        sub = getattr(self, section)
        fields = {f.name: f for f in dataclasses.fields(sub)}
        if name not in fields:
            raise KeyError(f"unknown config key {dotted!r}")
        current = getattr(sub, name)
        setattr(sub, name, _coerce(value, type(current)))

    def validate(self) -> None:
        if not (0.0 <= self.fusion.alpha <= 1.0 and 0.0 <= self.fusion.beta <= 1.0):
            raise ValueError("fusion.alpha and fusion.beta must lie in [0, 1]")
        for heads in (self.model.heads, self.model.gate_heads, self.decoder.heads):
            if self.model.h % heads:
                raise ValueError(f"model.h={self.model.h} not divisible by {heads} heads")
        if self.model.J < 1:
            raise ValueError("model.J must be >= 1")

    def copy(self) -> "Config":
        return Config.from_dict(self.to_dict())

    @classmethod
    def load(cls, path) -> "Config":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _flatten(raw: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in raw.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(value: Any, typ: type) -> Any:
    if typ is bool:
        if isinstance(value, str):
            lowered = value.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {value!r}")
            return lowered in ("true", "1", "yes")
        return bool(value)
    return typ(value)


def tiny_config(**overrides) -> Config:
    """Small dims used by gradient checks and quick tests."""
    cfg = Config()
    cfg.update({
        "model.h": 8, "model.heads": 2, "model.gate_heads": 2, "model.layers": 1,
        "model.max_len": 16, "model.dropout": 0.0,
        "decoder.layers": 1, "decoder.heads": 2,
    })
    cfg.update(overrides)
    return cfg

"""Run configuration: a nested dataclass tree loadable from YAML with dotted overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    """Raised for unknown keys or values that fail validation."""


@dataclass
class ModelConfig:
    channels: tuple[int, int, int, int] = (256, 160, 64, 32)  # coarse -> fine
    depths: tuple[int, int, int, int] = (1, 1, 1, 1)  # per stage, fine -> coarse
    mixer: str = "conv"  # conv | attention
    fuse_channels: int = 128
    beta: float = 10.0
    inpainter_width: int = 16
    gated: bool = False


@dataclass
class LossConfig:
    lambda_fm: float = 0.1
    lambda_logits: tuple[float, float, float, float] = (0.1, 0.1, 0.1, 0.1)
    lambda_base: float = 0.5


@dataclass
class AblationConfig:
    focus_loss: bool = True
    focus_module: bool = True
    separation: bool = True
    domain_fusion: bool = True


@dataclass
class InpainterConfig:
    mode: str = "frozen"  # frozen | finetune
    steps: int = 600
    learning_rate: float = 1e-3
    batch_size: int = 6
    train_images: int = 200
    checkpoint: str = ""  # pretrained inpainter weights; trained from data.root when empty


@dataclass
class DataConfig:
    root: str = "data/synthetic"
    image_size: int = 128
    crop: bool = True
    crop_min_scale: float = 0.75
    flip_prob: float = 0.5
    synthetic_fraction: float = 0.0
    synthetic_root: str = ""


@dataclass
class EvalConfig:
    beta_sq: float = 0.3
    m_definition: str = "MSE"
    threshold: float = 0.5


@dataclass
class TrainConfig:
    learning_rate: float = 6e-5
    weight_decay: float = 0.01
    batch_size: int = 6
    iterations: int = 2000
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 500
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    inpainter: InpainterConfig = field(default_factory=InpainterConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "TrainConfig":
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")
        if self.iterations < 0:
            raise ConfigError("iterations must be non-negative")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        weights = (self.loss.lambda_fm, self.loss.lambda_base, *self.loss.lambda_logits)
        if any(not (w >= 0 and w < float("inf")) for w in weights):
            raise ConfigError("loss weights must be finite and non-negative")
        if len(self.loss.lambda_logits) != 4 or len(self.model.channels) != 4:
            raise ConfigError("lambda_logits and model.channels need exactly 4 entries")
        if self.model.mixer not in ("conv", "attention"):
            raise ConfigError(f"model.mixer must be conv or attention, got {self.model.mixer!r}")
        if not self.model.beta > 0:
            raise ConfigError("model.beta must be positive")
        if self.inpainter.mode not in ("frozen", "finetune"):
            raise ConfigError("inpainter.mode must be frozen or finetune")
        if self.data.image_size % 32:
            raise ConfigError("data.image_size must be divisible by 32")
        if self.eval.m_definition not in ("MSE", "MAE"):
            raise ConfigError("eval.m_definition must be MSE or MAE")
        return self

    def to_dict(self) -> dict[str, Any]:
        return _plain(dataclasses.asdict(self))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def valid_keys(cfg: Any = None, prefix: str = "") -> list[str]:
    cfg = TrainConfig() if cfg is None else cfg
    keys = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            keys.extend(valid_keys(value, f"{prefix}{f.name}."))
        else:
            keys.append(prefix + f.name)
    return keys


def _coerce(current: Any, raw: Any, key: str) -> Any:
    if isinstance(raw, str):
        raw = yaml.safe_load(raw) if raw != "" else raw
    if isinstance(current, bool):
        if not isinstance(raw, bool):
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
        return raw
    if isinstance(current, tuple):
        if isinstance(raw, str):
            raw = [yaml.safe_load(p) for p in raw.split(",")]
        if not isinstance(raw, (list, tuple)) or len(raw) != len(current):
            raise ConfigError(f"{key}: expected {len(current)} values, got {raw!r}")
        return tuple(_coerce(c, r, key) for c, r in zip(current, raw))
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(raw, float) and raw.is_integer():
            raw = int(raw)
        if not isinstance(raw, int) or isinstance(raw, bool):
            raise ConfigError(f"{key}: expected an integer, got {raw!r}")
        return raw
    if isinstance(current, float):
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {raw!r}")
        return float(raw)
    if isinstance(current, str):
        return str(raw)
    return raw


def set_key(cfg: TrainConfig, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node: Any = cfg
    for part in parts[:-1]:
        child = getattr(node, part, None)
        if not dataclasses.is_dataclass(child):
            raise ConfigError(f"unknown key {dotted!r}; valid keys: {', '.join(valid_keys())}")
        node = child
    leaf = parts[-1]
    names = {f.name for f in dataclasses.fields(node)}
    if leaf not in names or dataclasses.is_dataclass(getattr(node, leaf)):
        raise ConfigError(f"unknown key {dotted!r}; valid keys: {', '.join(valid_keys())}")
    setattr(node, leaf, _coerce(getattr(node, leaf), value, dotted))


def _flatten(tree: dict[str, Any], prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in tree.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[prefix + k] = v
    return out


def from_dict(tree: dict[str, Any]) -> TrainConfig:
    cfg = TrainConfig()
    for key, value in _flatten(tree).items():
        set_key(cfg, key, value)
    return cfg.validate()


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> TrainConfig:
    tree: dict[str, Any] = {}
    if path is not None:
        tree = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(tree, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    cfg = from_dict(tree)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, value = item.split("=", 1)
        set_key(cfg, key.strip(), value.strip())
    return cfg.validate()


def dump_config(cfg: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))

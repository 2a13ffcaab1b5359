"""Run configuration: nested dataclasses serialised as JSON with strict keys."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .sampling import SampleParams
from .training import TrainConfig
from .transformer import ModelConfig
from .vq import TokenizerConfig


class ConfigError(ValueError):
    pass


@dataclass
class TokenizerTrainConfig:
    steps: int = 300
    lr: float = 4e-3
    batch_size: int = 4
    weight_decay: float = 0.0
    holdout: float = 0.25
    seed: int = 0


@dataclass
class DataConfig:
    """Paths; relative entries resolve against the config file's directory."""

    text_size: int = 256
    manifest: str = ""
    dataset: str = ""
    tokenizer_checkpoint: str = ""
    init_checkpoint: str = ""
    reference_checkpoint: str = ""
    triplets: str = ""

    PATH_FIELDS = ("manifest", "dataset", "tokenizer_checkpoint", "init_checkpoint", "reference_checkpoint", "triplets")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    tokenizer_train: TokenizerTrainConfig = field(default_factory=TokenizerTrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleParams = field(default_factory=SampleParams)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def with_seed(self, seed: int) -> "RunConfig":
        d = self.to_dict()
        for section in ("model", "tokenizer", "tokenizer_train", "train", "sample"):
            d[section]["seed"] = seed
        return from_dict(d)


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(values).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(f'{where}{k}' for k in unknown)}")
    kwargs = {}
    for name, value in values.items():
        sub = known[name].default_factory if known[name].default_factory is not dataclasses.MISSING else None
        if sub is not None and dataclasses.is_dataclass(sub):
            kwargs[name] = _build(sub, value, f"{where}{name}.")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where.rstrip('.') or 'config'}: {e}") from None


def from_dict(values: dict) -> RunConfig:
    return _build(RunConfig, values, "")


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None
    cfg = from_dict(raw)
    for name in DataConfig.PATH_FIELDS:
        value = getattr(cfg.data, name)
        if value and not Path(value).is_absolute():
            setattr(cfg.data, name, str((path.parent / value).resolve()))
    return cfg


def save_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

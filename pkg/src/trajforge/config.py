"""Run configuration: TOML file with strict key checking, full echo in outputs."""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .core import GridSpec, TimeSpec
from .generate import GenConfig
from .metrics import BinningConfig
from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class IngestConfig:
    radius_km: float = 1.0
    min_minutes: float = 20.0
    min_visits: int = 3


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 16
    alpha: float = 32.0
    dropout: float = 0.02


@dataclass
class RunConfig:
    grid: GridSpec = field(
        default_factory=lambda: GridSpec(origin_lat=39.8, origin_lon=116.2, n_rows=20, n_cols=20)
    )
    timespec: TimeSpec = field(default_factory=TimeSpec)
    ingest: IngestConfig = field(default_factory=IngestConfig)
    model: dict = field(
        default_factory=lambda: {"d_model": 64, "n_layers": 2, "n_heads": 4, "max_seq_len": 256}
    )
    lora: LoraConfig = field(default_factory=LoraConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    generate: GenConfig = field(default_factory=GenConfig)
    metrics: BinningConfig = field(default_factory=BinningConfig)
    seed: int = 0

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, **self.model)

    def echo(self) -> dict:
        return {
            "grid": asdict(self.grid),
            "timespec": asdict(self.timespec),
            "ingest": asdict(self.ingest),
            "model": dict(self.model),
            "lora": asdict(self.lora),
            "train": asdict(self.train),
            "generate": asdict(self.generate),
            "metrics": asdict(self.metrics),
            "seed": self.seed,
        }


_SECTION_TYPES = {
    "grid": GridSpec,
    "timespec": TimeSpec,
    "ingest": IngestConfig,
    "lora": LoraConfig,
    "train": TrainConfig,
    "generate": GenConfig,
    "metrics": BinningConfig,
}
_MODEL_KEYS = {"d_model", "n_layers", "n_heads", "max_seq_len", "dropout"}


def load_config(path: str | Path | None) -> RunConfig:
    """Parse a TOML config; unknown sections or keys are rejected."""
    cfg = RunConfig()
    if path is None:
        return cfg
    with open(path, "rb") as f:
        raw = tomllib.load(f)
    for section, value in raw.items():
        if section == "seed":
            cfg.seed = int(value)
        elif section == "model":
            unknown = set(value) - _MODEL_KEYS
            if unknown:
                raise ConfigError(f"unknown keys in [model]: {sorted(unknown)}")
            cfg.model.update(value)
        elif section in _SECTION_TYPES:
            cls = _SECTION_TYPES[section]
            valid = set(cls.__dataclass_fields__)
            unknown = set(value) - valid
            if unknown:
                raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
            defaults = asdict(getattr(cfg, section))
            defaults.update(value)
            try:
                setattr(cfg, section, cls(**defaults))
            except (TypeError, ValueError) as e:
                raise ConfigError(f"bad [{section}] config: {e}") from e
        else:
            raise ConfigError(f"unknown config section {section!r}")
    return cfg

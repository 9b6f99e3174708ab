"""Flat ``key=value`` run configuration shared by all subcommands."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from vbb.backbone import ModelConfig, parse_config_text
from vbb.errors import ConfigError
from vbb.harness.data import TASKS


def _ints(raw: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"expected a comma-separated integer list, got {raw!r}") from None


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    # training
    lr: float = 1e-3
    weight_decay: float = 0.05
    epochs: int = 50
    batch_size: int = 32
    task: str = "quadrant"
    samples: int = 512
    test_samples: int = 256
    noise: float = 0.0
    # bench
    lengths: tuple[int, ...] = (16, 32, 64, 256, 512, 1024)
    bench_channels: int = 36
    bench_heads: int = 3
    bench_window: int = 16
    bench_global_keys: int = 64
    # check
    check_cases: int = 1000
    check_batch: int = 2
    check_length: int = 16
    check_channels: int = 6
    check_heads: int = 3
    check_window_size: int = 16
    check_pool_size: int = 1
    check_model_gradcheck: bool = True
    inject_fault: str = "none"

    def __post_init__(self):
        for name in ("lr", "epochs", "batch_size", "samples", "test_samples", "bench_channels", "bench_heads",
                     "bench_window", "bench_global_keys", "check_cases", "check_batch", "check_length",
                     "check_channels", "check_heads", "check_window_size", "check_pool_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0 or self.noise < 0:
            raise ConfigError("weight_decay and noise must be non-negative")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; choose from {sorted(TASKS)}")
        if TASKS[self.task] != self.model.num_classes:
            raise ConfigError(f"task {self.task} has {TASKS[self.task]} classes, model has {self.model.num_classes}")
        if not self.lengths or min(self.lengths) < 1:
            raise ConfigError("lengths must be a non-empty list of positive integers")
        if self.inject_fault not in ("none", "restore"):
            raise ConfigError(f"inject_fault must be none|restore, got {self.inject_fault!r}")

    @property
    def seed(self) -> int:
        return self.model.seed

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, model=dataclasses.replace(self.model, seed=seed))

    def with_model(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, model=dataclasses.replace(self.model, **changes))

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        values = parse_config_text(text)
        known = {f.name for f in dataclasses.fields(cls)} | {f.name for f in dataclasses.fields(ModelConfig)}
        known |= {"depths", "channels", "heads", "window_sizes", "pool_sizes", "downsample"}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {"model": ModelConfig.from_mapping(values)}
        for f in dataclasses.fields(cls):
            if f.name == "model" or f.name not in values:
                continue
            raw = values[f.name]
            try:
                if f.type == "float":
                    kwargs[f.name] = float(raw)
                elif f.type == "int":
                    kwargs[f.name] = int(raw)
                elif f.type == "bool":
                    kwargs[f.name] = raw.strip().lower() in ("1", "true", "yes", "on")
                elif f.type.startswith("tuple"):
                    kwargs[f.name] = _ints(raw)
                else:
                    kwargs[f.name] = raw
            except ValueError:
                raise ConfigError(f"{f.name}: cannot parse {raw!r}") from None
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_text(text)

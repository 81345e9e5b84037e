"""Experiment configuration: dataclass, JSON file round-trip, CLI overrides.

Defaults follow the training protocol the pipeline is built around:
micro-batch 256, marginal-penalty coefficient 0.5, entropic coefficient
0.05, 20 epochs at Adam lr 2e-4 with weight decay 1e-5, batch size 1 with
32 gradient-accumulation steps, 5-fold cross-validation, 4 survival bins.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

ATTENTION_MODES = ("umbot", "emd", "dense")
COST_METRICS = ("l2", "squared_l2", "cosine_distance")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    folds: int = 5
    micro_batch: int = 256
    epsilon: float = 0.05
    tau: float = 0.5
    epochs: int = 20
    lr: float = 2e-4
    weight_decay: float = 1e-5
    grad_accum_steps: int = 32
    bins: int = 4
    attention_mode: str = "umbot"
    cost_metric: str = "l2"
    normalize_cost: bool = True

    def __post_init__(self):
        if self.attention_mode not in ATTENTION_MODES:
            raise ConfigError(f"attention_mode must be one of {ATTENTION_MODES}, "
                              f"got {self.attention_mode!r}")
        if self.cost_metric not in COST_METRICS:
            raise ConfigError(f"cost_metric must be one of {COST_METRICS}, "
                              f"got {self.cost_metric!r}")
        if self.folds < 2:
            raise ConfigError(f"folds must be >= 2, got {self.folds}")
        if self.micro_batch < 1:
            raise ConfigError(f"micro_batch must be >= 1, got {self.micro_batch}")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if self.tau < 0:
            raise ConfigError(f"tau must be >= 0, got {self.tau}")
        if self.epochs < 0 or self.grad_accum_steps < 1 or self.bins < 2:
            raise ConfigError("epochs >= 0, grad_accum_steps >= 1, bins >= 2 required")

    def replace(self, **kwargs) -> "ExperimentConfig":
        return dataclasses.replace(self, **kwargs)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def load_config(path) -> ExperimentConfig:
    """Read a JSON config; unknown keys are rejected by name."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file does not exist: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    unknown = sorted(set(doc) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"{path}: unknown config key(s): {', '.join(unknown)}")
    return ExperimentConfig(**doc)


def save_config(config: ExperimentConfig, path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def merge_overrides(config: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Apply non-None CLI overrides on top of a base config."""
    updates = {k: v for k, v in overrides.items() if v is not None}
    unknown = sorted(set(updates) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return config.replace(**updates) if updates else config

"""Experiment configuration and its YAML file form.

A config file is plain YAML with one mapping per section; omitted keys keep
their defaults::

    config_id: bea_tandem
    output_dir: runs
    seeds: [0, 1, 2]
    model:
      bea: true
      grid: {S: 8, B: 2, K: 3, anchor_sizes: [[0.15, 0.15], [0.3, 0.3]]}
    train:
      epochs: 20
      weights: {enable_ta: true, enable_tq: true}
    scene:
      noise_std: 0.04
    data:
      n_train: 2000
      n_test: 400
    eval:
      conf_floor: 0.05
      ood_ratio: 2.0
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .data import SceneSpec
from .metrics import RETENTION_FRACTIONS
from .model import ModelConfig
from .train import TrainConfig


@dataclass
class DataConfig:
    n_train: int = 2000
    n_test: int = 400


@dataclass
class EvalConfig:
    iou_thresh: float = 0.5
    conf_floor: float = 0.05
    nms_thresh: float = 0.5
    retention_fractions: tuple[float, ...] = RETENTION_FRACTIONS
    # in-distribution images per OOD image
    ood_ratio: float = 2.0

    def __post_init__(self):
        self.retention_fractions = tuple(float(f) for f in self.retention_fractions)
        if self.ood_ratio <= 0:
            raise ValueError("ood_ratio must be positive")


@dataclass
class ExperimentConfig:
    config_id: str = "bea_tandem"
    output_dir: str = "runs"
    seeds: tuple[int, ...] = (0,)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        for name, cls in (("model", ModelConfig), ("train", TrainConfig), ("scene", SceneSpec),
                          ("data", DataConfig), ("eval", EvalConfig)):
            value = getattr(self, name)
            if isinstance(value, dict):
                setattr(self, name, cls(**value))
        if not self.config_id or "/" in self.config_id:
            raise ValueError("config_id must be a non-empty name without '/'")

    @property
    def n_ood(self) -> int:
        return max(1, int(round(self.data.n_test / self.eval.ood_ratio)))

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def with_changes(self, **changes) -> ExperimentConfig:
        """Copy with dotted-path overrides, e.g. ``{"train.weights.enable_tq": False}``."""
        d = self.to_dict()
        for path, value in changes.items():
            node = d
            *head, last = path.split(".")
            for key in head:
                node = node[key]
            node[last] = value
        return from_dict(d)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def from_dict(d: dict) -> ExperimentConfig:
    d = copy.deepcopy(d)
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return ExperimentConfig(**d)


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: expected a mapping at the top level")
    return from_dict(raw)


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)

"""JSON experiment configuration.

Every section maps to a dataclass; unknown keys are rejected so that typos
surface as errors instead of silently falling back to defaults. Errors carry
the dotted path of the offending field.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields

from .runtime import MODES, TrainingSchedule


class ConfigError(ValueError):
    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field = field_path


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    num_classes: int = 10
    dim: int = 16
    per_class: int = 270
    spread: float = 1.0
    separation: float = 2.5
    path: str | None = None


@dataclass
class PartitionConfig:
    kind: str = "labels_per_client"
    clients: int = 20
    labels_per_client: int = 2
    alpha: float = 0.1
    train_fraction: float = 0.75
    subsample_fraction: float = 1.0


@dataclass
class ModelConfig:
    hidden: list = field(default_factory=lambda: [32])
    masked: list | None = None


@dataclass
class NewClientConfig:
    count: int = 0
    alphas: list = field(default_factory=list)
    pool_fraction: float = 0.2


@dataclass
class ExperimentConfig:
    seed: int = 0
    mode: str = "lr_bpfl"
    output_dir: str = "runs/default"
    eval_every: int = 10
    bins: int = 10
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: TrainingSchedule = field(default_factory=TrainingSchedule)
    new_clients: NewClientConfig = field(default_factory=NewClientConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def validate(self, check_files: bool = True) -> None:
        if self.mode not in MODES:
            raise ConfigError("mode", f"{self.mode!r} is not one of {', '.join(MODES)}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed", "must be a non-negative integer")
        if self.eval_every < 0:
            raise ConfigError("eval_every", "must be >= 0")
        if self.bins < 1:
            raise ConfigError("bins", "must be >= 1")
        d = self.dataset
        if d.kind == "synthetic":
            for name in ("num_classes", "dim", "per_class"):
                if getattr(d, name) < 1:
                    raise ConfigError(f"dataset.{name}", "must be >= 1")
            if d.spread <= 0:
                raise ConfigError("dataset.spread", "must be > 0")
        elif d.kind == "csv":
            if not d.path:
                raise ConfigError("dataset.path", "required for csv datasets")
            if check_files and not os.path.exists(d.path):
                raise ConfigError("dataset.path", f"file {d.path!r} does not exist")
        else:
            raise ConfigError("dataset.kind", f"{d.kind!r} is not 'synthetic' or 'csv'")
        p = self.partition
        if p.kind not in ("labels_per_client", "dirichlet"):
            raise ConfigError("partition.kind", f"{p.kind!r} is not 'labels_per_client' or 'dirichlet'")
        if p.clients < 1:
            raise ConfigError("partition.clients", "must be >= 1")
        if p.labels_per_client < 1 or (d.kind == "synthetic" and p.labels_per_client > d.num_classes):
            raise ConfigError("partition.labels_per_client", "must lie in [1, num_classes]")
        if p.alpha <= 0:
            raise ConfigError("partition.alpha", "must be > 0")
        if not 0 < p.train_fraction < 1:
            raise ConfigError("partition.train_fraction", "must lie in (0, 1)")
        if not 0 < p.subsample_fraction <= 1:
            raise ConfigError("partition.subsample_fraction", "must lie in (0, 1]")
        if any((not isinstance(h, int)) or h < 1 for h in self.model.hidden):
            raise ConfigError("model.hidden", "must be a list of positive integers")
        if self.model.masked is not None and len(self.model.masked) != len(self.model.hidden) + 1:
            raise ConfigError("model.masked", f"needs {len(self.model.hidden) + 1} flags, one per layer")
        try:
            self.schedule.validate()
        except ValueError as exc:
            name, _, msg = str(exc).partition(": ")
            raise ConfigError(f"schedule.{name}", msg) from None
        if self.schedule.fraction * p.clients < 1:
            raise ConfigError("schedule.fraction", "selects fewer than one client per round")
        n = self.new_clients
        if n.count < 0:
            raise ConfigError("new_clients.count", "must be >= 0")
        if n.count and not n.alphas:
            raise ConfigError("new_clients.alphas", "needs at least one alpha when count > 0")
        if any(a <= 0 for a in n.alphas):
            raise ConfigError("new_clients.alphas", "all alphas must be > 0")
        if n.count and not 0 < n.pool_fraction < 1:
            raise ConfigError("new_clients.pool_fraction", "must lie in (0, 1)")


_SECTIONS = {
    "dataset": DatasetConfig,
    "partition": PartitionConfig,
    "model": ModelConfig,
    "schedule": TrainingSchedule,
    "new_clients": NewClientConfig,
}


def _build(cls, data, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(prefix, "must be a JSON object")
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{prefix}.{key}" if prefix else key, "unknown field")
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        path = f"{prefix}.{f.name}" if prefix else f.name
        if not prefix and f.name in _SECTIONS:
            value = _build(_SECTIONS[f.name], value, f.name)
        elif isinstance(f.default, bool) and not isinstance(value, bool):
            raise ConfigError(path, "must be true or false")
        elif isinstance(f.default, int) and not isinstance(f.default, bool):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(path, "must be an integer")
        elif isinstance(f.default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(path, "must be a number")
            value = float(value)
        elif isinstance(f.default, str) and not isinstance(value, str):
            raise ConfigError(path, "must be a string")
        kwargs[f.name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "")


def load_config(path: str | os.PathLike, check_files: bool = True) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError("config", f"file {str(path)!r} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON ({exc})") from None
    cfg = config_from_dict(data)
    if cfg.dataset.path and not os.path.isabs(cfg.dataset.path):
        base = os.path.dirname(os.path.abspath(path))
        candidate = os.path.join(base, cfg.dataset.path)
        if os.path.exists(candidate):
            cfg.dataset.path = candidate
    cfg.validate(check_files)
    return cfg

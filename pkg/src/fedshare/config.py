"""Experiment configuration, its TOML/JSON file form, and seed fan-out."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import tomli_w

from .errors import ConfigError
from .fl import TrainConfig
from .network import ChannelParams

METHODS = ("daca", "scc", "cec", "central", "none")
PARTITIONS = ("pathological", "dirichlet", "iid")


@dataclass(frozen=True)
class DatasetConfig:
    source: str = "synthetic"  # or "idx"
    num_classes: int = 10
    samples_per_class: int = 600
    test_per_class: int = 100
    feature_dim: int = 20
    spread: float = 1.0
    separation: float = 4.0
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None

    def __post_init__(self):
        if self.source not in ("synthetic", "idx"):
            raise ConfigError(f"unknown dataset source {self.source!r}")
        if self.source == "idx" and not (self.train_images and self.train_labels and self.test_images and self.test_labels):
            raise ConfigError("idx source needs train/test image and label paths")


@dataclass(frozen=True)
class PartitionConfig:
    kind: str = "pathological"
    n_single: int | None = None  # defaults to K - 1
    alpha: float = 0.5
    samples_per_client: int | None = None

    def __post_init__(self):
        if self.kind not in PARTITIONS:
            raise ConfigError(f"unknown partition {self.kind!r}")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    method: str = "daca"
    K: int = 20
    e_th: float = 0.5
    v_th: float = 150e3  # bit/s
    T_th: float = 1.0  # s
    bits_per_sample: float = 6276.0
    share_rule: str = "optimal"
    normalized_objective: bool = True
    beta: float = 0.05
    fixed_share: int | None = None  # overrides the planner with a fixed per-head volume
    samples_per_volume: int = 600
    round_cost: float = 0.7
    target_accuracy: float = 0.9
    uplink_rate: float = 1e6
    downlink_rate: float = 1e6
    train_enabled: bool = True
    out_dir: str = "results"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    channel: ChannelParams = field(default_factory=ChannelParams)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.K < 1:
            raise ConfigError("K must be at least 1")
        for name in ("e_th", "v_th", "beta", "round_cost", "uplink_rate", "downlink_rate"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be non-negative")
        if not self.T_th > 0:
            raise ConfigError("T_th must be positive")
        if not self.bits_per_sample > 0:
            raise ConfigError("bits_per_sample must be positive")
        if self.fixed_share is not None and self.fixed_share < 0:
            raise ConfigError("fixed_share must be non-negative")
        from .clustering import SHARE_RULES

        if self.share_rule not in SHARE_RULES:
            raise ConfigError(f"unknown share rule {self.share_rule!r}")

    @property
    def n_single(self) -> int:
        return self.K - 1 if self.partition.n_single is None else self.partition.n_single

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    # -- serialisation ---------------------------------------------------

    def to_dict(self) -> dict:
        top, sections = {}, {}
        for f in fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                sections[f.name] = {k: x for k, x in dataclasses.asdict(v).items() if x is not None}
            elif v is not None:
                top[f.name] = v
        return {"experiment": top, **sections}

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        top = dict(data.pop("experiment", {}))
        kinds = {"dataset": DatasetConfig, "partition": PartitionConfig, "channel": ChannelParams, "train": TrainConfig}
        for name, sub in data.items():
            if name not in kinds:
                raise ConfigError(f"unknown section [{name}]")
        try:
            for name, kind in kinds.items():
                if name in data:
                    top[name] = _build(kind, data[name], name)
            return _build(cls, top, "experiment")
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_text(cls, text: str, fmt: str = "toml") -> "ExperimentConfig":
        try:
            data = json.loads(text) if fmt == "json" else tomllib.loads(text)
        except (ValueError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot parse config: {exc}") from exc
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_text(path.read_text(encoding="utf-8"), "json" if path.suffix.lower() == ".json" else "toml")


def _build(kind, values: dict, section: str):
    known = {f.name: f for f in fields(kind)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    coerced = {}
    for name, v in values.items():
        ftype = str(known[name].type)
        if "float" in ftype and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        coerced[name] = v
    return kind(**coerced)


def derive_seed(master: int, label: str) -> int:
    """Sub-seed for one pipeline stage: a labeled SHA-256 of the master seed."""
    digest = hashlib.sha256(f"fedshare/{int(master)}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def fmt_float(x: float) -> str:
    """Shortest round-trip text for a float; ``inf`` and ``nan`` spelled out."""
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if math.isnan(x):
        return "nan"
    return repr(float(x))

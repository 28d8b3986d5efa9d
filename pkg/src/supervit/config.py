"""Run configuration: one JSON document holding model, training and data settings."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, generate_shapes, load_idx
from .model import ConfigError, ModelConfig
from .training import TrainConfig

SCHEMA_VERSION = 1
DATA_SOURCES = ("shapes", "idx")


@dataclass
class DataConfig:
    source: str = "shapes"
    n_train: int = 1600
    n_val: int = 400
    seed: int = 1000
    train_images: str | None = None
    train_labels: str | None = None
    val_images: str | None = None
    val_labels: str | None = None

    def validate(self) -> "DataConfig":
        if self.source not in DATA_SOURCES:
            raise ConfigError(f"data.source must be one of {DATA_SOURCES}")
        if self.source == "shapes" and (self.n_train < 1 or self.n_val < 1):
            raise ConfigError("data.n_train and data.n_val must be >= 1")
        if self.source == "idx":
            missing = [k for k in ("train_images", "train_labels", "val_images", "val_labels")
                       if getattr(self, k) is None]
            if missing:
                raise ConfigError(f"idx data source needs {missing}")
        return self


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs/default"
    schema_version: int = SCHEMA_VERSION

    def validate(self) -> "RunConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version {self.schema_version} unsupported (expected {SCHEMA_VERSION})")
        self.model.validate()
        self.train.validate()
        self.data.validate()
        if self.train.num_classes != self.model.num_classes:
            raise ConfigError("train.num_classes must equal model.num_classes")
        return self

    def to_dict(self) -> dict:
        return {"schema_version": self.schema_version, "model": self.model.to_dict(),
                "train": self.train.to_dict(), "data": dataclasses.asdict(self.data),
                "output_dir": self.output_dir}

    def config_hash(self) -> str:
        """Digest of the resolved settings; ``output_dir`` does not affect results."""
        d = self.to_dict()
        d.pop("output_dir")
        canon = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _coerce(value, tp, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list")
        elem = args[0] if args else object
        return tuple(_coerce(v, elem, f"{where}[]") for v in value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    return value


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {unknown}")
    kwargs = {k: _coerce(v, hints[k], f"{where}.{k}") for k, v in raw.items()}
    return cls(**kwargs)


def parse_run_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    known = {"schema_version", "model", "train", "data", "output_dir"}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in config: {unknown}")
    if "schema_version" not in raw:
        raise ConfigError("config lacks schema_version")
    rc = RunConfig(
        model=_build(ModelConfig, raw.get("model", {}), "model"),
        train=_build(TrainConfig, raw.get("train", {}), "train"),
        data=_build(DataConfig, raw.get("data", {}), "data"),
        output_dir=_coerce(raw.get("output_dir", "runs/default"), str, "output_dir"),
        schema_version=_coerce(raw["schema_version"], int, "schema_version"),
    )
    return rc.validate()


def load_run_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return parse_run_config(raw)


def load_datasets(rc: RunConfig) -> tuple[Dataset, Dataset]:
    """Training and validation sets described by ``rc.data``."""
    mc, dc = rc.model, rc.data
    if dc.source == "shapes":
        full = generate_shapes(dc.n_train + dc.n_val, mc.image_side, dc.seed, mc.channels,
                               mc.num_classes)
        return full.split(dc.n_train)
    train = load_idx(dc.train_images, dc.train_labels, mc.image_side, mc.channels)
    val = load_idx(dc.val_images, dc.val_labels, mc.image_side, mc.channels)
    for name, ds in (("train", train), ("val", val)):
        if len(ds) and int(np.max(ds.labels)) >= mc.num_classes:
            raise ConfigError(f"{name} labels exceed model.num_classes={mc.num_classes}")
    return train, val

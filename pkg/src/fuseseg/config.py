"""Run configuration files: JSON schema, validation, and builders.

A run config has three sections::

    {
      "id": "baseline",
      "model": {"arch": "res_unet", "levels": 4, "skip_channels": [32, 64, 128, 256],
                "alphas": [1, 1, 1, 1], "betas": [1, 1, 1, 1],
                "fusion": "weighted", "bn_weight_init": "normal01",
                "classes": 2, "in_channels": 3, "seed": 0,
                "fused_weight": 1.0},
      "train": {"base_lr": 0.001, "momentum": 0.9, "weight_decay": 0.0005,
                "poly_power": 0.9, "max_iter": 500, "batch_size": 8,
                "seed": 0, "stats_every": 100, "crop": 125, "augment": true},
      "data":  {"kind": "synth", "n_train": 200, "n_val": 32,
                "canvas": 128, "seed": 7}
    }

Unknown keys are rejected.  ``data.kind`` may instead be ``"folder"`` with a
``root`` whose layout is ``<root>/{train,val,test}/{images,labels}/*.png``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import load_split, synth_dataset
from .errors import ConfigError
from .models import FusedUNet, FusedUNetConfig, ResUNet, ResUNetConfig
from .rng import fold
from .train import TrainConfig


def _check_keys(section: str, obj: dict, allowed: dict):
    if not isinstance(obj, dict):
        raise ConfigError(f"{section}: expected an object")
    for key in obj:
        if key not in allowed:
            raise ConfigError(f"{section}.{key}: unknown key")
    for key, value in obj.items():
        kind = allowed[key]
        if kind == "int" and not (isinstance(value, int) and not isinstance(value, bool)):
            raise ConfigError(f"{section}.{key}: expected an integer, got {value!r}")
        if kind == "num" and (not isinstance(value, (int, float)) or isinstance(value, bool)):
            raise ConfigError(f"{section}.{key}: expected a number, got {value!r}")
        if kind == "str" and not isinstance(value, str):
            raise ConfigError(f"{section}.{key}: expected a string, got {value!r}")
        if kind == "bool" and not isinstance(value, bool):
            raise ConfigError(f"{section}.{key}: expected true/false, got {value!r}")
        if kind == "numlist":
            if not isinstance(value, list) or not all(
                    isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
                raise ConfigError(f"{section}.{key}: expected a list of numbers, got {value!r}")


_MODEL_KEYS = {
    "arch": "str", "levels": "int", "in_channels": "int", "classes": "int",
    "skip_channels": "numlist", "stem_channels": "int",
    "alphas": "numlist", "betas": "numlist", "fusion": "str",
    "bn_weight_init": "str", "seed": "int", "fused_weight": "num",
}
_TRAIN_KEYS = {
    "base_lr": "num", "momentum": "num", "weight_decay": "num", "poly_power": "num",
    "max_iter": "int", "batch_size": "int", "seed": "int", "stats_every": "int",
    "crop": "int", "augment": "bool",
}
_DATA_KEYS = {
    "kind": "str", "n_train": "int", "n_val": "int", "canvas": "int",
    "seed": "int", "root": "str",
}


@dataclass
class DataConfig:
    kind: str = "synth"
    n_train: int = 200
    n_val: int = 32
    canvas: int = 128
    seed: int = 7
    root: str | None = None

    def __post_init__(self):
        if self.kind not in ("synth", "folder"):
            raise ConfigError(f"data.kind: expected 'synth' or 'folder', got {self.kind!r}")
        if self.kind == "folder" and not self.root:
            raise ConfigError("data.root: required for folder datasets")
        if self.kind == "synth" and (self.n_train < 1 or self.n_val < 1):
            raise ConfigError("data.n_train/n_val must be >= 1")


@dataclass
class RunConfig:
    config_id: str = "config"
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)


def parse_run_config(obj: dict, default_id: str = "config") -> RunConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config root: expected an object")
    for key in obj:
        if key not in ("id", "model", "train", "data"):
            raise ConfigError(f"{key}: unknown top-level key")
    config_id = obj.get("id", default_id)
    if not isinstance(config_id, str) or not config_id:
        raise ConfigError("id: expected a non-empty string")

    model = obj.get("model", {})
    _check_keys("model", model, _MODEL_KEYS)
    arch = model.get("arch", "res_unet")
    if arch not in ("res_unet", "fused_unet"):
        raise ConfigError(f"model.arch: expected 'res_unet' or 'fused_unet', got {arch!r}")
    if arch != "fused_unet" and "fused_weight" in model:
        raise ConfigError("model.fused_weight: only valid for the fused architecture")

    train = dict(obj.get("train", {}))
    _check_keys("train", train, _TRAIN_KEYS)
    data = dict(obj.get("data", {}))
    _check_keys("data", data, _DATA_KEYS)
    try:
        train_cfg = TrainConfig(**train)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from exc
    return RunConfig(config_id, dict(model), train_cfg, DataConfig(**data))


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_run_config(obj, default_id=path.stem)


def build_model(model_section: dict):
    """Construct the configured model from a validated model section."""
    section = dict(model_section)
    arch = section.pop("arch", "res_unet")
    if "skip_channels" in section:
        section["skip_channels"] = tuple(section["skip_channels"])
        section.setdefault("levels", len(section["skip_channels"]))
    if "alphas" in section:
        section["alphas"] = tuple(section["alphas"])
    if "betas" in section:
        section["betas"] = tuple(section["betas"])
    try:
        if arch == "fused_unet":
            return FusedUNet(FusedUNetConfig(**section))
        return ResUNet(ResUNetConfig(**section))
    except TypeError as exc:
        raise ConfigError(f"model: {exc}") from exc


def load_datasets(data_cfg: DataConfig):
    """(train, val) sample lists for a data section."""
    if data_cfg.kind == "synth":
        train = synth_dataset(data_cfg.n_train, data_cfg.seed, data_cfg.canvas)
        val = synth_dataset(data_cfg.n_val, fold(data_cfg.seed, "val"), data_cfg.canvas)
        return train, val
    return load_split(data_cfg.root, "train"), load_split(data_cfg.root, "val")

"""Run configuration: an INI-style file with ``[model]``, ``[train]``, ``[data]``
and ``[paths]`` sections, overridable key by key from the command line.

Example::

    [model]
    activation = gelu
    dilations = 1,2,4,8,16,32

    [train]
    epochs = 300
    seed = 7

    [paths]
    manifest = ravdess/manifest.csv
    features = ravdess/features
    output = runs/ravdess
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig


def _bool(text: str) -> bool:
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _intlist(text) -> list:
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    return [int(v) for v in str(text).replace(" ", "").split(",") if v]


SCHEMA = {
    "model": {
        "n_tabs": int,
        "dilations": _intlist,
        "filters": int,
        "kernel": int,
        "activation": str,
        "bidirectional": _bool,
        "multiscale": _bool,
        "dropout_rate": float,
        "use_batch_norm": _bool,
        "merge": str,
    },
    "train": {
        "epochs": int,
        "lr": float,
        "beta1": float,
        "beta2": float,
        "eps": float,
        "batch_size": int,
        "seed": int,
        "shuffle_each_epoch": _bool,
        "folds": int,
        "jobs": int,
    },
    "data": {
        "dataset": str,
        "frames": int,
        "gender_mode": str,
    },
    "paths": {
        "manifest": str,
        "features": str,
        "output": str,
        "sidecar": str,
    },
}

KEY_SECTION = {key: section for section, keys in SCHEMA.items() for key in keys}


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)

    def set(self, key: str, raw) -> None:
        if key not in KEY_SECTION:
            raise ConfigError(f"unknown config key {key!r}")
        section = KEY_SECTION[key]
        try:
            value = SCHEMA[section][key](raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc
        getattr(self, section)[key] = value

    def get(self, key: str, default=None):
        return getattr(self, KEY_SECTION[key]).get(key, default)

    def model_config(self, input_channels: int, n_classes: int) -> ModelConfig:
        cfg = ModelConfig(input_channels=input_channels, n_classes=n_classes, **self.model)
        if "n_tabs" in self.model and "dilations" not in self.model:
            cfg.dilations = [2**i for i in range(cfg.n_tabs)]
        return cfg.validate()

    def train_config(self) -> TrainConfig:
        kw = {k: v for k, v in self.train.items() if k not in ("folds", "jobs")}
        if "seed" not in kw and os.environ.get("TBDM_SEED"):
            try:
                kw["seed"] = int(os.environ["TBDM_SEED"])
            except ValueError as exc:
                raise ConfigError(f"TBDM_SEED must be an integer, got {os.environ['TBDM_SEED']!r}") from exc
        return TrainConfig(**kw).validate()

    def path(self, key: str, must_exist: bool = True, required: bool = True) -> Optional[Path]:
        value = self.paths.get(key)
        if value is None:
            if required:
                raise ConfigError(f"missing required path {key!r} (set it in [paths] or pass --{key})")
            return None
        p = Path(value)
        if must_exist and not p.exists():
            raise ConfigError(f"{key} path does not exist: {p}")
        return p


def load_run_config(path: Optional[str], overrides: Optional[dict] = None) -> RunConfig:
    """Read ``path`` (if given) then apply ``overrides``; unknown keys are errors."""
    rc = RunConfig()
    if path:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config file {path}: {exc}") from exc
        base = Path(path).parent
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, raw in parser.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
                if section == "paths" and not Path(raw).is_absolute():
                    raw = str(base / raw)
                rc.set(key, raw)
    for key, raw in (overrides or {}).items():
        if raw is not None:
            rc.set(key, raw)
    return rc

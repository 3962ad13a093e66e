"""Experiment configuration: one flat dataclass, a sectioned key=value file
format (configparser), and a stable content hash."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields

from .errors import ConfigurationError

__all__ = ["ExperimentConfig", "load_config", "save_config", "config_hash", "config_diff"]


@dataclass
class ExperimentConfig:
    # [data]
    system: str = "pendulum"
    n_train: int = 64
    n_val: int = 8
    n_test: int = 16
    horizon: int = 300
    dt: float = 0.05
    noise_sigma: float = 0.3
    drop_rate: float = 0.2
    data_seed: int = 0
    corrupt_seed: int = 1000
    # [model]
    unit: str = "physics"  # "physics" | "datadriven"
    enc_mlp_hidden: int = 64
    enc_mlp_layers: int = 2
    enc_ssm_width: int = 24
    enc_ssm_layers: int = 2
    learner_width: int = 24
    learner_layers: int = 2
    learner_b_width: int = 12
    learner_b_layers: int = 1
    dd_width: int = 24
    dd_layers: int = 2
    dec_hidden: int = 64
    dec_layers: int = 2
    delta_mode: str = "raw"
    # [train]
    lr: float = 1e-3
    epochs: int = 60
    batch_size: int = 64
    grad_clip: float = 10.0
    train_seeds: tuple[int, ...] = (0, 1, 2)
    threads: int = 1
    # [loss]
    beta: float = 0.1
    lambda_: float = 1.0
    reg_metric: str = "euclidean"
    reg_on_augmented: bool = False
    # [protocol]
    window: int = 160
    forecast: int = 80

    def __post_init__(self) -> None:
        if self.unit not in ("physics", "datadriven"):
            raise ConfigurationError(f"unknown unit '{self.unit}'")
        if self.reg_metric not in ("euclidean", "chebyshev", "cosine"):
            raise ConfigurationError(f"unknown reg_metric '{self.reg_metric}'")
        if self.window < 2 or self.forecast < 0:
            raise ConfigurationError("window must be >= 2 and forecast >= 0")
        if isinstance(self.train_seeds, list):
            self.train_seeds = tuple(self.train_seeds)


_SECTIONS = {
    "data": (
        "system", "n_train", "n_val", "n_test", "horizon", "dt",
        "noise_sigma", "drop_rate", "data_seed", "corrupt_seed",
    ),
    "model": (
        "unit", "enc_mlp_hidden", "enc_mlp_layers", "enc_ssm_width",
        "enc_ssm_layers", "learner_width", "learner_layers",
        "learner_b_width", "learner_b_layers", "dd_width", "dd_layers",
        "dec_hidden", "dec_layers", "delta_mode",
    ),
    "train": ("lr", "epochs", "batch_size", "grad_clip", "train_seeds", "threads"),
    "loss": ("beta", "lambda_", "reg_metric", "reg_on_augmented"),
    "protocol": ("window", "forecast"),
}

_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _parse_value(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    raw = raw.strip()
    if name == "train_seeds":
        return tuple(int(tok) for tok in raw.replace(",", " ").split())
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigurationError(f"bad boolean for {name}: {raw}")
    return raw


def load_config(path: str, overrides: dict | None = None) -> ExperimentConfig:
    """Read a sectioned key=value file; unknown keys are configuration errors."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigurationError(f"cannot read config file {path}")
    values: dict = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigurationError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SECTIONS[section]:
                raise ConfigurationError(f"unknown key '{key}' in [{section}]")
            values[key] = _parse_value(key, raw)
    if overrides:
        for key, val in overrides.items():
            if val is None:
                continue
            if key not in _FIELD_TYPES:
                raise ConfigurationError(f"unknown config field '{key}'")
            values[key] = val
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc


def save_config(path: str, config: ExperimentConfig) -> None:
    parser = configparser.ConfigParser()
    for section, keys in _SECTIONS.items():
        parser[section] = {}
        for key in keys:
            value = getattr(config, key)
            if key == "train_seeds":
                value = ",".join(str(s) for s in value)
            parser[section][key] = str(value)
    with open(path, "w") as fh:
        parser.write(fh)


def config_hash(config: ExperimentConfig) -> str:
    blob = json.dumps(dataclasses.asdict(config), sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def config_diff(a: ExperimentConfig, b: ExperimentConfig) -> dict[str, tuple]:
    """Fields on which two configs disagree, as {name: (a_value, b_value)}."""
    out = {}
    for f in fields(ExperimentConfig):
        va, vb = getattr(a, f.name), getattr(b, f.name)
        if va != vb:
            out[f.name] = (va, vb)
    return out

"""Experiment configuration: a dataclass plus an INI-style ``key = value`` file format.

Unset keys fall back to the published training recipe (100 rounds, 10 local
epochs, SGD lr 0.01 / momentum 0.9 / wd 1e-5, batch 64, sigma 0.1, tau 0.06,
lambda 0.8 / 1.0, alpha 1.0, beta 0.4). Desk-scale runs override rounds and
epochs, see ``configs/desk.ini``.
"""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .dfc import PROTOCOLS
from .errors import ConfigError

MODES = ("f2dc", "fedavg")

# section -> {key in file: dataclass field}
SCHEMA: dict[str, dict[str, str]] = {
    "experiment": {"seed": "seed", "mode": "mode", "rounds": "rounds", "local_epochs": "local_epochs",
                   "output_dir": "output_dir", "workers": "workers", "dtype": "dtype",
                   "protocol": "protocol", "spectrum": "spectrum", "record_seconds": "record_seconds"},
    "federation": {"clients": "num_clients", "participation": "participation",
                   "alpha": "alpha", "beta": "beta"},
    "data": {"domains": "num_domains", "classes": "num_classes", "train_size": "train_size",
             "test_size": "test_size", "image_size": "image_size", "noise": "noise"},
    "optimizer": {"lr": "lr", "momentum": "momentum", "weight_decay": "weight_decay",
                  "batch_size": "batch_size"},
    "f2dc": {"sigma": "sigma", "tau": "tau", "lambda1": "lambda1", "lambda2": "lambda2",
             "attach_layers": "attach_layers"},
    "model": {"channels": "channels"},
    "ablation": {"dfd": "dfd_on", "dfc": "dfc_on", "daa": "daa_on"},
}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    mode: str = "f2dc"
    num_clients: int = 8
    num_domains: int = 4
    num_classes: int = 4
    rounds: int = 100
    local_epochs: int = 10
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    batch_size: int = 64
    sigma: float = 0.1
    tau: float = 0.06
    lambda1: float = 0.8
    lambda2: float = 1.0
    alpha: float = 1.0
    beta: float = 0.4
    participation: float = 1.0
    dfd_on: bool = True
    dfc_on: bool = True
    daa_on: bool = True
    protocol: str = "plain"
    spectrum: bool = False
    output_dir: str = "runs/default"
    train_size: int = 200
    test_size: int = 200
    image_size: int = 16
    noise: float = 0.12
    channels: tuple[int, ...] = (16, 32, 32)
    attach_layers: tuple[int, ...] = (-1,)
    workers: int = 1
    dtype: str = "float32"
    record_seconds: bool = False

    def validate(self) -> "ExperimentConfig":
        def need(cond: bool, name: str, msg: str):
            if not cond:
                raise ConfigError(name, msg)

        need(self.mode in MODES, "mode", f"expected one of {MODES}, got {self.mode!r}")
        for name in ("lr", "sigma", "tau"):
            need(getattr(self, name) > 0, name, "must be positive")
        need(0 <= self.momentum < 1, "momentum", "must lie in [0, 1)")
        for name in ("weight_decay", "lambda1", "lambda2", "noise"):
            need(getattr(self, name) >= 0, name, "must be nonnegative")
        need(0 < self.participation <= 1, "participation", "must lie in (0, 1]")
        need(self.rounds >= 0, "rounds", "must be nonnegative")
        need(self.local_epochs >= 0, "local_epochs", "must be nonnegative")
        need(self.batch_size >= 1, "batch_size", "must be at least 1")
        need(self.num_domains >= 1, "num_domains", "must be at least 1")
        need(self.num_clients >= self.num_domains, "num_clients", "every domain needs at least one client")
        need(self.num_classes >= 2, "num_classes", "need at least two classes")
        need(self.train_size >= 1 and self.test_size >= 1, "train_size", "sizes must be positive")
        need(self.workers >= 1, "workers", "must be at least 1")
        need(self.dtype in ("float32", "float64"), "dtype", "must be float32 or float64")
        need(len(self.channels) == 3 and all(c >= 1 for c in self.channels), "channels",
             "three positive channel counts are required")
        need(self.image_size % 4 == 0, "image_size", "must be divisible by 4")
        need(len(self.attach_layers) >= 1, "attach_layers", "at least one attachment layer is required")
        need(all(-3 <= i <= 2 for i in self.attach_layers), "attach_layers", "indices must address the 3 blocks")
        need(not self.dfc_on or self.dfd_on, "dfc_on", "the corrector requires the decoupler")
        need(self.protocol in PROTOCOLS, "protocol", f"expected one of {PROTOCOLS}")
        need(self.protocol == "plain" or (self.mode == "f2dc" and self.dfd_on), "protocol",
             "feature protocols need mode f2dc with the decoupler on")
        return self

    def with_overrides(self, **kwargs) -> "ExperimentConfig":
        return replace(self, **kwargs)

    def to_dict(self) -> dict:
        return asdict(self)


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _convert(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    text = raw.strip()
    try:
        if kind == "bool":
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind.startswith("tuple"):
            return tuple(int(v) for v in text.replace(",", " ").split())
        return text
    except ValueError as exc:
        raise ConfigError(name, f"cannot parse {raw!r}") from exc


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("file", str(exc)) from exc
    values = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(section, "unknown section")
        for key, raw in parser.items(section):
            name = SCHEMA[section].get(key)
            if name is None:
                raise ConfigError(f"{section}.{key}", "unknown key")
            values[name] = _convert(name, raw)
    return replace(base or ExperimentConfig(), **values)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from exc
    return parse_config(text)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, name in keys.items():
            value = getattr(cfg, name)
            if isinstance(value, tuple):
                value = ", ".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)

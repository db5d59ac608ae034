"""Training configuration and its flat ``key=value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Tuple

from ..errors import ConfigError
from ..network import NetworkConfig
from ..uce import UceConfig

LOSS_MODES = ("ce", "uce")


@dataclass
class TrainConfig:
    lr_base: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    head_lr_multiplier: float = 10.0
    epochs: int = 30
    batch_size: int = 8
    loss_mode: str = "uce"
    alpha: float = 10.0
    beta: int = 10
    eval_beta: int = 10
    seed: int = 0
    dropout_ratio: float = 0.2
    block_channels: Tuple[int, ...] = (16, 32, 32, 16)
    kernel_size: int = 3
    augment: bool = True
    crop: int = 48
    scale_min: float = 0.5
    scale_max: float = 2.0
    hflip_prob: float = 0.5
    # 0 evaluates on the val split after the last epoch only
    eval_every: int = 0
    ece_bins: int = 10
    normalize: str = "numel"
    data: str = ""
    out: str = ""

    @property
    def uce(self) -> UceConfig:
        return UceConfig(alpha=self.alpha, beta=self.beta, normalize=self.normalize)

    def network_config(self, num_classes: int) -> NetworkConfig:
        return NetworkConfig(
            num_classes=num_classes,
            block_channels=list(self.block_channels),
            kernel_size=self.kernel_size,
            dropout_ratio=self.dropout_ratio,
            seed=self.seed,
        )

    def validate(self) -> None:
        if not self.lr_base > 0:
            raise ConfigError("lr_base must be > 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}")
        if self.eval_beta < 2:
            raise ConfigError("eval_beta must be >= 2")
        if not 0.0 <= self.dropout_ratio < 1.0:
            raise ConfigError("dropout_ratio must lie in [0, 1)")
        if self.scale_min <= 0 or self.scale_max < self.scale_min:
            raise ConfigError("scale range must be positive and ordered")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be >= 0")
        if self.loss_mode == "uce":
            self.uce.validate()

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def _convert(name: str, kind, raw: str):
    raw = raw.strip()
    try:
        if kind in (bool, "bool"):
            lowered = raw.lower()
            if lowered not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return lowered in ("1", "true", "yes")
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        if kind in (str, "str"):
            return raw
        return tuple(int(v) for v in raw.replace("x", ",").split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


_FIELDS = {f.name: f.type for f in fields(TrainConfig)}


def coerce(name: str, raw: str):
    if name not in _FIELDS:
        raise ConfigError(f"unknown config key {name!r}")
    return _convert(name, _FIELDS[name], raw)


def parse_config(text: str, base: TrainConfig = None) -> TrainConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        values[key] = coerce(key, value)
    return (base or TrainConfig()).replace(**values)


def load_config(path, base: TrainConfig = None) -> TrainConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, base)


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"


def save_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(format_config(cfg), encoding="utf-8")

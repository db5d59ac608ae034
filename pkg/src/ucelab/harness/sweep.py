"""Grid sweeps over one TrainConfig axis with repeated seeds."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .. import data as data_mod
from ..errors import ConfigError, DivergedRunError
from .config import TrainConfig
from .train import fit

log = logging.getLogger(__name__)

AXES = ("alpha", "beta", "dropout_ratio", "lr_base")
CLI_AXES = {"alpha": "alpha", "beta": "beta", "dropout": "dropout_ratio", "lr": "lr_base"}

SWEEP_HEADER = (
    "axis", "value", "seed", "status", "miou", "ece", "munc",
    "wall_seconds", "wall_seconds_per_epoch",
    "miou_std", "ece_std", "munc_std", "wall_seconds_std",
)


@dataclass
class SweepSpec:
    axis: str
    values: Sequence[float]
    repetitions: int
    base: TrainConfig

    def validate(self) -> None:
        if self.axis not in AXES:
            raise ConfigError(f"sweep axis must be one of {AXES}")
        if not self.values:
            raise ConfigError("sweep needs at least one value")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")

    def config_for(self, value, seed: int) -> TrainConfig:
        value = int(value) if self.axis == "beta" else float(value)
        return self.base.replace(**{self.axis: value, "seed": seed})


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def sweep(
    spec: SweepSpec,
    train_samples: Optional[Sequence[data_mod.Sample]] = None,
    val_samples: Optional[Sequence[data_mod.Sample]] = None,
    num_classes: Optional[int] = None,
) -> List[dict]:
    """One fit + evaluation per (value, seed), then one aggregate row per value.

    Diverged runs are recorded with status ``diverged`` and NaN metrics.
    Samples default to the base config's dataset directory.
    """
    spec.validate()
    if train_samples is None:
        manifest = data_mod.read_manifest(spec.base.data)
        num_classes = manifest["C"]
        train_samples = data_mod.load_split(spec.base.data, "train", num_classes)
        val_samples = data_mod.load_split(spec.base.data, "val", num_classes)
    rows, aggregates = [], []
    for value in spec.values:
        group = []
        for r in range(spec.repetitions):
            cfg = spec.config_for(value, spec.base.seed + r)
            row = dict(axis=spec.axis, value=value, seed=cfg.seed)
            try:
                result = fit(cfg, train_samples, val_samples, num_classes)
            except DivergedRunError as exc:
                log.warning("%s=%s seed %d diverged: %s", spec.axis, value, cfg.seed, exc)
                seconds = exc.log.train_seconds if exc.log is not None else float("nan")
                row.update(status="diverged", miou=float("nan"), ece=float("nan"), munc=float("nan"),
                           wall_seconds=seconds, wall_seconds_per_epoch=float("nan"))
            else:
                rep = result.report
                seconds = result.log.train_seconds
                row.update(
                    status="ok",
                    miou=rep.miou if rep else float("nan"),
                    ece=rep.ece if rep else float("nan"),
                    munc=rep.munc if rep else float("nan"),
                    wall_seconds=seconds,
                    wall_seconds_per_epoch=seconds / cfg.epochs,
                )
            rows.append(row)
            group.append(row)
        agg = dict(axis=spec.axis, value=value, seed="mean", status="aggregate")
        for key in ("miou", "ece", "munc", "wall_seconds", "wall_seconds_per_epoch"):
            vals = np.array([g[key] for g in group], dtype=np.float64)
            agg[key] = float(np.mean(vals))
            if key != "wall_seconds_per_epoch":
                agg[f"{key}_std"] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        aggregates.append(agg)
    return rows + aggregates


def sweep_csv(rows: List[dict]) -> str:
    lines = [",".join(SWEEP_HEADER)]
    for row in rows:
        lines.append(",".join(_fmt(row.get(k)) for k in SWEEP_HEADER))
    return "\n".join(lines) + "\n"


def write_sweep(rows: List[dict], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(sweep_csv(rows), encoding="utf-8")

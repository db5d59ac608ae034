"""Optimiser, schedules, training/evaluation loops, sweeps and the CLI."""

from .config import TrainConfig, load_config, parse_config, save_config
from .optim import SGD, poly_lr, sgd_step
from .sweep import SweepSpec, sweep, sweep_csv
from .train import RunLog, evaluate, evaluate_checkpoint, fit, train

__all__ = [
    "SGD", "RunLog", "SweepSpec", "TrainConfig", "evaluate", "evaluate_checkpoint", "fit",
    "load_config", "parse_config", "poly_lr", "save_config", "sgd_step", "sweep", "sweep_csv", "train",
]

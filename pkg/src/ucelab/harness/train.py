"""Training and evaluation loops."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .. import data as data_mod
from ..errors import DivergedRunError, NumericError
from ..metrics import (
    CalibrationBins,
    ConfusionMatrix,
    MetricsReport,
    binary_accuracy_map,
    miou,
    munc,
)
from ..network import RngStream, SegNet, build, load_checkpoint, save_checkpoint
from ..tensor import Tensor, no_grad, softmax
from ..uce import UceConfig, sample_predictive, training_step
from .config import TrainConfig, load_config, save_config
from .optim import SGD, poly_lr

log = logging.getLogger(__name__)

RUNLOG_HEADER = (
    "epoch", "iteration", "lr", "train_loss", "clamp_events",
    "val_miou", "val_ece", "val_munc", "wall_seconds",
)


@dataclass
class RunLog:
    rows: List[dict] = field(default_factory=list)

    def append(self, **row) -> None:
        self.rows.append(row)

    def to_csv(self) -> str:
        lines = [",".join(RUNLOG_HEADER)]
        for row in self.rows:
            cells = []
            for key in RUNLOG_HEADER:
                value = row.get(key)
                cells.append("" if value is None else repr(value) if isinstance(value, float) else str(value))
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @property
    def train_seconds(self) -> float:
        return float(sum(r["wall_seconds"] for r in self.rows))


def read_runlog(path) -> RunLog:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split(",")
    out = RunLog()
    for line in lines[1:]:
        row = {}
        for key, cell in zip(header, line.split(",")):
            if cell == "":
                row[key] = None
            elif key in ("epoch", "iteration", "clamp_events"):
                row[key] = int(cell)
            else:
                row[key] = float(cell)
        out.rows.append(row)
    return out


@dataclass
class FitResult:
    net: SegNet
    log: RunLog
    report: Optional[MetricsReport] = None


def _augment_config(cfg: TrainConfig) -> data_mod.AugmentConfig:
    return data_mod.AugmentConfig((cfg.scale_min, cfg.scale_max), (cfg.crop, cfg.crop), cfg.hflip_prob)


def fit(
    cfg: TrainConfig,
    train_samples: Sequence[data_mod.Sample],
    val_samples: Sequence[data_mod.Sample] = (),
    num_classes: Optional[int] = None,
) -> FitResult:
    """Train a freshly built network on in-memory samples.

    Raises ``DivergedRunError`` (carrying the partial log) on a non-finite loss.
    """
    cfg.validate()
    if not train_samples:
        raise data_mod.DataError("empty training set")
    if num_classes is None:
        labels = np.concatenate([s.label.ravel() for s in train_samples])
        num_classes = int(labels[labels != data_mod.VOID].max()) + 1
    net = build(cfg.network_config(num_classes))
    params = net.parameters()
    opt = SGD(params, cfg.momentum, cfg.weight_decay, cfg.head_lr_multiplier)
    uce_cfg = cfg.uce
    weighted = cfg.loss_mode == "uce"
    aug_cfg = _augment_config(cfg)
    if cfg.augment:
        aug_cfg.validate()

    shuffle_rng = RngStream(cfg.seed, "shuffle")
    augment_rng = RngStream(cfg.seed, "augment")
    dropout_rng = RngStream(cfg.seed, "dropout")
    sample_rng = RngStream(cfg.seed, "sample")

    n = len(train_samples)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    runlog = RunLog()
    iteration = 0
    report = None
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        order = shuffle_rng.generator().permutation(n)
        losses, clamps, lr = [], 0, cfg.lr_base
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            batch = [train_samples[i] for i in idx]
            if cfg.augment:
                batch = [data_mod.augment(s, aug_cfg, augment_rng) for s in batch]
            images, labels = data_mod.to_batch(batch)
            lr = poly_lr(iteration, total, cfg.lr_base, cfg.poly_power)
            try:
                step = training_step(
                    net, Tensor(images), labels, uce_cfg, dropout_rng, sample_rng, weighted=weighted
                )
            except NumericError as exc:
                raise DivergedRunError(str(exc), epoch, iteration, runlog) from exc
            if not math.isfinite(step.loss):
                raise DivergedRunError(
                    f"non-finite loss at epoch {epoch}, iteration {iteration}", epoch, iteration, runlog
                )
            opt.step(lr)
            losses.append(step.loss)
            clamps += step.clamp_events
            iteration += 1
        wall = time.perf_counter() - start
        row = dict(
            epoch=epoch,
            iteration=iteration - 1,
            lr=lr,
            train_loss=float(np.mean(losses)),
            clamp_events=clamps,
            wall_seconds=wall,
        )
        due = epoch == cfg.epochs if cfg.eval_every == 0 else epoch % cfg.eval_every == 0 or epoch == cfg.epochs
        if val_samples and due:
            report = evaluate(net, val_samples, cfg.eval_beta, seed=cfg.seed, num_bins=cfg.ece_bins)
            row.update(val_miou=report.miou, val_ece=report.ece, val_munc=report.munc)
        runlog.append(**row)
        log.info("epoch %d loss %.5f lr %.6f (%.1fs)", epoch, row["train_loss"], lr, wall)
    return FitResult(net, runlog, report)


def train(cfg: TrainConfig, data_root=None, out_dir=None):
    """Train from a dataset directory; writes model.ckpt, config.txt and log.csv.

    Returns ``(checkpoint_path, RunLog)``.
    """
    data_root = Path(data_root or cfg.data)
    out_dir = Path(out_dir or cfg.out or ".")
    cfg.validate()
    manifest = data_mod.read_manifest(data_root)
    c = manifest["C"]
    train_samples = data_mod.load_split(data_root, "train", c)
    val_samples = data_mod.load_split(data_root, "val", c) if manifest["num_val"] else []
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg.replace(data=str(data_root), out=str(out_dir)), out_dir / "config.txt")
    try:
        result = fit(cfg, train_samples, val_samples, num_classes=c)
    except DivergedRunError as exc:
        if exc.log is not None:
            exc.log.write(out_dir / "log.csv")
        raise
    ckpt = out_dir / "model.ckpt"
    save_checkpoint(result.net, ckpt)
    result.log.write(out_dir / "log.csv")
    return ckpt, result.log


# -- evaluation ------------------------------------------------------------


def sigma_to_gray(sigma: np.ndarray) -> np.ndarray:
    return np.round(np.minimum(sigma, 0.5) / 0.5 * 255.0).astype(np.uint8)


def evaluate(
    net: SegNet,
    samples: Sequence[data_mod.Sample],
    eval_beta: int = 10,
    seed: int = 0,
    num_bins: int = 10,
    batch_size: int = 16,
    render_dir=None,
    munc_group: str = "pred",
    confidence: str = "deterministic",
    num_classes: Optional[int] = None,
) -> MetricsReport:
    """Deterministic-pass predictions plus ``eval_beta`` dropout passes for sigma.

    With ``render_dir`` set, writes per-image PGMs: ``_pred`` (class ids),
    ``_acc`` (255 = wrong or void), ``_sigma`` and ``_conf`` (scaled to 0..255).
    """
    c = num_classes or net.num_classes
    cm = ConfusionMatrix(c)
    bins = CalibrationBins(num_bins)
    rng = RngStream(seed, "eval")
    ucfg = UceConfig(alpha=0.0, beta=eval_beta)
    sig_all, group_all = [], []
    wrong_sum = wrong_n = right_sum = right_n = 0.0
    if render_dir is not None:
        render_dir = Path(render_dir)
        render_dir.mkdir(parents=True, exist_ok=True)
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        images, labels = data_mod.to_batch(chunk)
        x = Tensor(images)
        with no_grad():
            probs = softmax(net(x), axis=1).data
        stats = sample_predictive(net, x, ucfg, rng)
        sigma = stats.sigma.data
        pred = np.argmax(probs, axis=1)
        conf = probs.max(axis=1) if confidence == "deterministic" else stats.p.data.max(axis=1)
        valid = labels != data_mod.VOID
        correct = pred == labels
        cm.update(pred, labels)
        bins.update(np.clip(conf[valid], 0.0, 1.0), correct[valid])
        grouping = pred if munc_group == "pred" else labels
        sig_all.append(sigma[valid])
        group_all.append(grouping[valid])
        wrong = valid & ~correct
        right = valid & correct
        wrong_sum += float(sigma[wrong].sum())
        wrong_n += int(wrong.sum())
        right_sum += float(sigma[right].sum())
        right_n += int(right.sum())
        if render_dir is not None:
            acc_map = binary_accuracy_map(pred, labels)
            for j in range(len(chunk)):
                stem = render_dir / f"{start + j:06d}"
                data_mod.write_pgm(f"{stem}_pred.pgm", pred[j])
                data_mod.write_pgm(f"{stem}_acc.pgm", np.where(acc_map[j], 255, 0))
                data_mod.write_pgm(f"{stem}_sigma.pgm", sigma_to_gray(sigma[j]))
                data_mod.write_pgm(f"{stem}_conf.pgm", np.round(conf[j] * 255.0))
    report = MetricsReport(
        per_class_iou=cm.per_class_iou(),
        miou=miou(cm),
        ece=bins.ece(),
        munc=munc(np.concatenate(sig_all), np.concatenate(group_all), c),
        pixel_accuracy=cm.pixel_accuracy(),
        sigma_incorrect=wrong_sum / wrong_n if wrong_n else float("nan"),
        sigma_correct=right_sum / right_n if right_n else float("nan"),
    )
    if render_dir is not None:
        (render_dir / "metrics.csv").write_text(report.csv_header() + "\n" + report.csv_row() + "\n")
    return report


def checkpoint_dropout(ckpt_path, default: float = 0.0) -> tuple:
    """Dropout ratio and seed recorded in the ``config.txt`` next to a checkpoint."""
    sidecar = Path(ckpt_path).parent / "config.txt"
    if sidecar.exists():
        cfg = load_config(sidecar)
        return cfg.dropout_ratio, cfg.seed
    return default, 0


def evaluate_checkpoint(ckpt_path, data_root, split="val", eval_beta=10, render_dir=None,
                        dropout_ratio=None, seed=None, num_bins=10) -> MetricsReport:
    ratio, cfg_seed = checkpoint_dropout(ckpt_path)
    if dropout_ratio is not None:
        ratio = dropout_ratio
    net = load_checkpoint(ckpt_path, ratio)
    manifest = data_mod.read_manifest(data_root)
    samples = data_mod.load_split(data_root, split, manifest["C"])
    return evaluate(
        net, samples, eval_beta, seed=cfg_seed if seed is None else seed,
        num_bins=num_bins, render_dir=render_dir, num_classes=manifest["C"],
    )

"""Uncertainty-aware cross-entropy.

During training, ``beta`` extra dropout-active forward passes run without
gradient recording. The spread of the softmax probability of the most likely
class across those passes gives a per-pixel uncertainty ``sigma``, and each
pixel's cross-entropy term is scaled by the constant ``(1 + sigma) ** alpha``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .errors import ConfigError, DataError, DimensionError, PreconditionError
from .network import RngStream, SegNet
from .tensor import Tensor, backward, log_softmax, mean, mul, no_grad, softmax, sum_, take_class

IGNORE_INDEX = 255
_F32_MAX = float(np.finfo(np.float32).max)


@dataclass
class UceConfig:
    alpha: float = 10.0
    beta: int = 10
    ignore_index: int = IGNORE_INDEX
    # "numel" keeps ignored pixels in the denominator; "valid" averages over labelled pixels.
    normalize: str = "numel"

    def validate(self) -> None:
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ConfigError(f"alpha must be finite and >= 0, got {self.alpha}")
        if int(self.beta) != self.beta or self.beta < 2:
            raise ConfigError(f"beta must be an integer >= 2, got {self.beta}")
        if self.normalize not in ("numel", "valid"):
            raise ConfigError(f"normalize must be 'numel' or 'valid', got {self.normalize!r}")


@dataclass
class UncertaintyStats:
    p: Tensor  # [N,C,H,W] mean softmax over samples
    q: Tensor  # [N,C,H,W] unbiased std of softmax over samples
    sigma: Tensor  # [N,H,W]
    weight: Tensor  # [N,H,W]
    clamp_events: int = 0


@dataclass
class PixelLossMap:
    loss: Tensor  # [N,H,W], differentiable w.r.t. the logits
    valid: np.ndarray  # [N,H,W] bool


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def sigma_bound(beta: int) -> float:
    """Largest unbiased std reachable by ``beta`` values in [0, 1]."""
    return 0.5 * np.sqrt(beta / (beta - 1.0))


def weights_with_clamps(sigma, alpha: float) -> tuple:
    """``(1 + sigma) ** alpha`` in float64, clamped to the float32 range.

    Returns the weight array and the number of clamped pixels.
    """
    s = _data(sigma).astype(np.float64)
    if np.any(s < 0):
        raise PreconditionError("sigma must be non-negative")
    if alpha < 0:
        raise PreconditionError("alpha must be non-negative")
    with np.errstate(over="ignore"):
        w = np.power(1.0 + s, float(alpha))
    over = w > _F32_MAX
    clamps = int(np.count_nonzero(over))
    if clamps:
        w = np.where(over, _F32_MAX, w)
    return w, clamps


def uncertainty_weight(sigma, alpha: float) -> Tensor:
    """Pixel weights ``(1 + sigma) ** alpha``; a constant, never differentiated."""
    w, _ = weights_with_clamps(sigma, alpha)
    return Tensor(w)


class _RunningMoments:
    # Welford accumulation in float64.
    def __init__(self):
        self.count = 0
        self.mean = None
        self.m2 = None

    def push(self, x: np.ndarray) -> None:
        x = x.astype(np.float64)
        self.count += 1
        if self.mean is None:
            self.mean = x.copy()
            self.m2 = np.zeros_like(x)
            return
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)


def summarize_samples(prob_samples: Iterable, alpha: float) -> UncertaintyStats:
    """Aggregate per-sample softmax maps [N,C,H,W] into uncertainty statistics."""
    acc = _RunningMoments()
    for probs in prob_samples:
        acc.push(_data(probs))
    if acc.count < 2:
        raise ConfigError("at least two samples are needed for a standard deviation")
    p = acc.mean
    q = np.sqrt(np.maximum(acc.m2, 0.0) / (acc.count - 1))
    top = np.argmax(p, axis=1)
    sigma = np.take_along_axis(q, top[:, None], axis=1)[:, 0]
    w, clamps = weights_with_clamps(sigma, alpha)
    return UncertaintyStats(Tensor(p), Tensor(q), Tensor(sigma), Tensor(w), clamps)


def sample_predictive(net: SegNet, images, cfg: UceConfig, rng: RngStream) -> UncertaintyStats:
    """Run ``cfg.beta`` dropout-active passes without recording and summarise them.

    Samples are folded into running moments one at a time, so memory stays at
    one forward pass plus two [N,C,H,W] accumulators regardless of ``beta``.
    """
    cfg.validate()
    x = images if isinstance(images, Tensor) else Tensor(images)

    def _samples():
        for _ in range(int(cfg.beta)):
            yield softmax(net(x, rng), axis=1).data

    with no_grad():
        return summarize_samples(_samples(), cfg.alpha)


def _check_labels(labels: np.ndarray, num_classes: int, ignore_index: int) -> np.ndarray:
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= num_classes))
    if np.any(bad):
        raise DataError(
            f"label values must be in [0, {num_classes}) or {ignore_index}; "
            f"found {np.unique(labels[bad])[:5].tolist()}"
        )
    return valid


def pixel_ce(logits: Tensor, labels, ignore_index: int = IGNORE_INDEX) -> PixelLossMap:
    """Per-pixel ``-log softmax(logits)[label]``; exactly zero at ignored pixels."""
    labels = np.asarray(labels)
    if logits.ndim != 4 or labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise DimensionError(f"logits {logits.shape} do not match labels {labels.shape}")
    valid = _check_labels(labels, logits.shape[1], ignore_index)
    safe = np.where(valid, labels, 0)
    picked = take_class(log_softmax(logits, axis=1), safe, axis=1)
    factor = Tensor(np.where(valid, -1.0, 0.0).astype(logits.dtype))
    return PixelLossMap(mul(picked, factor), valid)


def uce_loss(
    logits: Tensor, labels, stats: Optional[UncertaintyStats], cfg: UceConfig
) -> Tensor:
    """Weighted CE summed over pixels and divided by N*H*W.

    ``stats=None`` means unit weights, i.e. plain cross-entropy.
    """
    ce = pixel_ce(logits, labels, cfg.ignore_index)
    per_pixel = ce.loss
    if stats is not None:
        w = _data(stats.weight)
        if w.shape != per_pixel.shape:
            raise DimensionError(f"weight map {w.shape} does not match loss map {per_pixel.shape}")
        per_pixel = mul(per_pixel, Tensor(w.astype(logits.dtype)))
    if cfg.normalize == "valid":
        count = max(int(np.count_nonzero(ce.valid)), 1)
        return mul(sum_(per_pixel), 1.0 / count)
    return mean(per_pixel)


@dataclass
class StepResult:
    loss: float
    stats: Optional[UncertaintyStats]

    @property
    def clamp_events(self) -> int:
        return 0 if self.stats is None else self.stats.clamp_events


def training_step(
    net: SegNet,
    images,
    labels,
    cfg: UceConfig,
    grad_rng: Optional[RngStream],
    sample_rng: Optional[RngStream] = None,
    weighted: bool = True,
) -> StepResult:
    """One U-CE step: recorded forward, no-grad sampling, weighted loss, backward.

    Gradients are written to the parameters' ``.grad`` slots (previous values
    are cleared). With ``weighted=False`` the sampling is skipped and the loss
    is plain cross-entropy.
    """
    x = images if isinstance(images, Tensor) else Tensor(images)
    net.zero_grad()
    logits = net(x, grad_rng)
    stats = None
    if weighted:
        if sample_rng is None:
            raise PreconditionError("weighted step needs a sampling stream")
        stats = sample_predictive(net, x, cfg, sample_rng)
    loss = uce_loss(logits, labels, stats, cfg)
    backward(loss)
    return StepResult(loss.item(), stats)

"""Segmentation metrics: confusion-matrix IoU, expected calibration error, mUnc."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import DataError, DimensionError, UndefinedMetricError

IGNORE_INDEX = 255


class ConfusionMatrix:
    """Pixel counts with rows = ground truth class, columns = predicted class."""

    def __init__(self, num_classes: int):
        self.num_classes = int(num_classes)
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred, truth, ignore_index: int = IGNORE_INDEX) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        truth = np.asarray(truth)
        if pred.shape != truth.shape:
            raise DimensionError(f"prediction {pred.shape} and truth {truth.shape} differ")
        keep = truth != ignore_index
        t = truth[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        c = self.num_classes
        if t.size and (t.min() < 0 or t.max() >= c or p.min() < 0 or p.max() >= c):
            raise DataError(f"class id outside [0, {c})")
        self.counts += np.bincount(t * c + p, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def per_class_iou(self) -> List[Optional[float]]:
        """IoU per class; ``None`` where TP + FP + FN is zero."""
        tp = np.diag(self.counts)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        return [None if u == 0 else float(t) / float(u) for t, u in zip(tp, union)]

    def pixel_accuracy(self) -> float:
        if self.total == 0:
            raise UndefinedMetricError("empty confusion matrix")
        return float(np.trace(self.counts)) / self.total


def update_confusion(cm: ConfusionMatrix, pred, truth, ignore_index: int = IGNORE_INDEX) -> ConfusionMatrix:
    return cm.update(pred, truth, ignore_index)


def miou(cm: ConfusionMatrix, absent: str = "exclude") -> float:
    """Mean IoU. Classes with an empty union are skipped (``absent="exclude"``)
    or scored as zero (``absent="zero"``)."""
    if cm.total == 0:
        raise UndefinedMetricError("mIoU of an empty confusion matrix")
    ious = cm.per_class_iou()
    if absent == "zero":
        return float(np.mean([0.0 if v is None else v for v in ious]))
    defined = [v for v in ious if v is not None]
    return float(np.mean(defined))


@dataclass
class CalibrationBins:
    num_bins: int = 10
    counts: np.ndarray = field(default=None)
    conf_sum: np.ndarray = field(default=None)
    correct_sum: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros(self.num_bins, dtype=np.int64)
            self.conf_sum = np.zeros(self.num_bins, dtype=np.float64)
            self.correct_sum = np.zeros(self.num_bins, dtype=np.int64)

    def bin_index(self, confidences: np.ndarray) -> np.ndarray:
        # equal-width bins, left-closed; 1.0 falls into the last bin
        idx = np.floor(confidences * self.num_bins).astype(np.int64)
        return np.clip(idx, 0, self.num_bins - 1)

    def update(self, confidences, correct) -> "CalibrationBins":
        conf = np.asarray(confidences, dtype=np.float64).ravel()
        corr = np.asarray(correct, dtype=bool).ravel()
        if conf.shape != corr.shape:
            raise DimensionError("confidences and correctness flags differ in length")
        if conf.size and (conf.min() < 0 or conf.max() > 1):
            raise DataError("confidences must lie in [0, 1]")
        idx = self.bin_index(conf)
        self.counts += np.bincount(idx, minlength=self.num_bins)
        self.conf_sum += np.bincount(idx, weights=conf, minlength=self.num_bins)
        self.correct_sum += np.bincount(idx, weights=corr, minlength=self.num_bins).astype(np.int64)
        return self

    def merge(self, other: "CalibrationBins") -> "CalibrationBins":
        return CalibrationBins(
            self.num_bins,
            self.counts + other.counts,
            self.conf_sum + other.conf_sum,
            self.correct_sum + other.correct_sum,
        )

    def ece(self) -> float:
        total = self.counts.sum()
        if total == 0:
            raise UndefinedMetricError("ECE over zero samples")
        nz = self.counts > 0
        n = self.counts[nz].astype(np.float64)
        gap = np.abs(self.correct_sum[nz] / n - self.conf_sum[nz] / n)
        return float(np.sum(n / total * gap))


def ece(confidences, correct, num_bins: int = 10) -> float:
    return CalibrationBins(num_bins).update(confidences, correct).ece()


def munc(sigma, pred, num_classes: int, valid=None) -> float:
    """Unweighted mean over classes of the average sigma of pixels assigned to them.

    Grouping follows whatever label map is passed as ``pred`` (predicted or
    ground-truth classes); ``valid`` optionally masks pixels out.
    """
    s = np.asarray(getattr(sigma, "data", sigma), dtype=np.float64).ravel()
    p = np.asarray(pred).ravel()
    if s.shape != p.shape:
        raise DimensionError("sigma and label map differ in size")
    if valid is not None:
        keep = np.asarray(valid, dtype=bool).ravel()
        s, p = s[keep], p[keep]
    inrange = (p >= 0) & (p < num_classes)
    s, p = s[inrange], p[inrange]
    if s.size == 0:
        raise UndefinedMetricError("mUnc over zero pixels")
    counts = np.bincount(p, minlength=num_classes)
    sums = np.bincount(p, weights=s, minlength=num_classes)
    present = counts > 0
    return float(np.mean(sums[present] / counts[present]))


def binary_accuracy_map(pred, truth, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """True (white) where the prediction is wrong or the truth is void."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction {pred.shape} and truth {truth.shape} differ")
    return (pred != truth) | (truth == ignore_index)


@dataclass
class MetricsReport:
    per_class_iou: List[Optional[float]]
    miou: float
    ece: float
    munc: float
    pixel_accuracy: float
    # mean sigma over misclassified / correctly classified valid pixels
    sigma_incorrect: float = float("nan")
    sigma_correct: float = float("nan")

    def csv_header(self) -> str:
        cols = ["miou", "ece", "munc", "pixel_accuracy", "sigma_incorrect", "sigma_correct"]
        cols += [f"iou_{c}" for c in range(len(self.per_class_iou))]
        return ",".join(cols)

    def csv_row(self) -> str:
        vals = [self.miou, self.ece, self.munc, self.pixel_accuracy, self.sigma_incorrect, self.sigma_correct]
        cells = [repr(float(v)) for v in vals]
        cells += ["" if v is None else repr(float(v)) for v in self.per_class_iou]
        return ",".join(cells)

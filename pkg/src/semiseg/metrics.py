"""Confusion-matrix segmentation metrics: pixel accuracy, mean accuracy, mean IU.

Classes absent from both truth and prediction are left out of the class
means. A class that never occurs in the truth has no defined accuracy and
is left out of the mean accuracy as well.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import List, Optional

import numpy as np


class MetricsError(ValueError):
    pass


class ConfusionMatrix:
    """counts[i, j] = number of pixels with truth i predicted as j."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, truth, pred, ignore_index: Optional[int] = None) -> "ConfusionMatrix":
        truth = np.asarray(truth)
        pred = np.asarray(pred)
        if truth.shape != pred.shape:
            raise MetricsError(f"truth shape {truth.shape} != prediction shape {pred.shape}")
        keep = np.ones(truth.shape, dtype=bool) if ignore_index is None else truth != ignore_index
        k = self.num_classes
        for name, arr in (("truth", truth), ("prediction", pred)):
            bad = keep & ((arr < 0) | (arr >= k))
            if bad.any():
                where = tuple(int(i) for i in np.argwhere(bad)[0])
                raise MetricsError(f"{name} label {arr[where]} at pixel {where} outside 0..{k - 1}")
        t = truth[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        self.counts += np.bincount(t * k + p, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def _require_nonempty(cm: ConfusionMatrix) -> np.ndarray:
    if cm.total == 0:
        raise MetricsError("confusion matrix is empty")
    return cm.counts


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    c = _require_nonempty(cm)
    return float(np.trace(c)) / float(c.sum())


def per_class_accuracy(cm: ConfusionMatrix) -> np.ndarray:
    """diag/row, NaN where the class has no truth pixels."""
    c = _require_nonempty(cm)
    rows = c.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(rows > 0, np.diag(c) / np.maximum(rows, 1), np.nan)


def per_class_iu(cm: ConfusionMatrix) -> np.ndarray:
    """diag/(row + col - diag), NaN where the class is absent from truth and prediction."""
    c = _require_nonempty(cm)
    diag = np.diag(c)
    union = c.sum(axis=1) + c.sum(axis=0) - diag
    return np.where(union > 0, diag / np.maximum(union, 1), np.nan)


def mean_accuracy(cm: ConfusionMatrix) -> float:
    return float(np.nanmean(per_class_accuracy(cm)))


def mean_iu(cm: ConfusionMatrix) -> float:
    return float(np.nanmean(per_class_iu(cm)))


@dataclass
class MetricsReport:
    pixel_accuracy: float
    mean_accuracy: float
    mean_iu: float
    per_class_iu: List[Optional[float]]
    confusion: List[List[int]]
    step: Optional[int] = None

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix, step: Optional[int] = None) -> "MetricsReport":
        ius = [None if np.isnan(v) else float(v) for v in per_class_iu(cm)]
        return cls(pixel_accuracy(cm), mean_accuracy(cm), mean_iu(cm), ius, cm.counts.tolist(), step)

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "pixel_accuracy": self.pixel_accuracy,
            "mean_accuracy": self.mean_accuracy,
            "mean_iu": self.mean_iu,
            "per_class_iu": self.per_class_iu,
            "confusion": self.confusion,
        }

    def to_line(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["pixel_accuracy"], d["mean_accuracy"], d["mean_iu"], d["per_class_iu"],
                   d["confusion"], d.get("step"))


# -- brute-force oracle -------------------------------------------------


def naive_confusion(truth, pred, num_classes: int, ignore_index: Optional[int] = None) -> List[List[int]]:
    """Per-pixel tally in plain Python integers."""
    counts = [[0] * num_classes for _ in range(num_classes)]
    for t, p in zip(np.asarray(truth).ravel().tolist(), np.asarray(pred).ravel().tolist()):
        if ignore_index is not None and t == ignore_index:
            continue
        counts[t][p] += 1
    return counts


def naive_metrics(truth, pred, num_classes: int, ignore_index: Optional[int] = None):
    """(pixel acc, mean acc, mean IU) recomputed pixel by pixel, without a matrix."""
    t_list = np.asarray(truth).ravel().tolist()
    p_list = np.asarray(pred).ravel().tolist()
    pairs = [(t, p) for t, p in zip(t_list, p_list) if ignore_index is None or t != ignore_index]
    correct = sum(1 for t, p in pairs if t == p)
    accs, ious = [], []
    for c in range(num_classes):
        inter = sum(1 for t, p in pairs if t == c and p == c)
        in_truth = sum(1 for t, _ in pairs if t == c)
        union = sum(1 for t, p in pairs if t == c or p == c)
        if in_truth:
            accs.append(inter / in_truth)
        if union:
            ious.append(inter / union)
    return correct / len(pairs), sum(accs) / len(accs), sum(ious) / len(ious)

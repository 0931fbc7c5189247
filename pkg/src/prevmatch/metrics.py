"""Segmentation quality and training-stability measurement."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .nn.tensor import LabelRangeError


class ConfusionMatrix:
    """C x C pixel counts, rows = ground truth, columns = prediction."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred: np.ndarray, true: np.ndarray) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        true = np.asarray(true)
        if pred.shape != true.shape:
            raise ValueError(f"prediction shape {pred.shape} != truth shape {true.shape}")
        c = self.num_classes
        for arr in (true, pred):
            bad = (arr < 0) | (arr >= c)
            if bad.any():
                coord = tuple(int(i) for i in np.argwhere(bad)[0])
                raise LabelRangeError(coord, int(arr[coord]), c)
        idx = true.reshape(-1).astype(np.int64) * c + pred.reshape(-1)
        self.counts += np.bincount(idx, minlength=c * c).reshape(c, c)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, pred: np.ndarray, true: np.ndarray) -> ConfusionMatrix:
    return cm.accumulate(pred, true)


def iou_scores(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN for classes absent from truth and prediction) and mIoU.

    The mean runs over classes with TP + FP + FN > 0 only.
    """
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    union = counts.sum(axis=0) + counts.sum(axis=1) - tp
    present = union > 0
    if not present.any():
        raise ValueError("confusion matrix is empty; no class present")
    iou = np.full(cm.num_classes, np.nan)
    iou[present] = tp[present] / union[present]
    return iou, float(iou[present].mean())


def pseudo_accuracy(pseudo: np.ndarray, mask: np.ndarray, truth: np.ndarray, num_classes: int) -> np.ndarray:
    """Per-class accuracy of masked-in pseudo-labels against hidden truth.

    Entry c is the fraction of masked-in pixels with truth c whose pseudo
    label is c; NaN marks a class with no masked-in truth pixels.
    """
    correct, total = pseudo_counts(pseudo, mask, truth, num_classes)
    out = np.full(num_classes, np.nan)
    has = total > 0
    out[has] = correct[has] / total[has]
    return out


def pseudo_counts(pseudo: np.ndarray, mask: np.ndarray, truth: np.ndarray, num_classes: int):
    """(correct, total) integer tallies behind ``pseudo_accuracy``."""
    mask = np.asarray(mask, dtype=bool)
    t = np.asarray(truth)[mask]
    hit = np.asarray(pseudo)[mask] == t
    total = np.bincount(t.reshape(-1), minlength=num_classes)[:num_classes]
    correct = np.bincount(t[hit].reshape(-1), minlength=num_classes)[:num_classes]
    return correct.astype(np.int64), total.astype(np.int64)


@dataclass
class MetricsRecord:
    epoch: int
    l_s: float
    l_u_std: float
    l_u_prev: float
    lam: float
    miou_val: float
    iou: list[float]
    pacc: list[float]
    mask_std: float = 0.0
    mask_prev: float = 0.0


@dataclass
class StabilityStats:
    std: np.ndarray  # per class
    max_drop: np.ndarray  # per class
    window: int


def _tail(history, tail_frac: float):
    if not 0 < tail_frac <= 1:
        raise ValueError("tail_frac must lie in (0, 1]")
    if len(history) < 2:
        raise ValueError("stability statistics need at least two epochs")
    n = max(2, math.ceil(tail_frac * len(history)))
    return history[-n:]


def stability_stats(history: Sequence, tail_frac: float = 0.3) -> StabilityStats:
    """Per-class std and largest consecutive drop of validation IoU over the tail.

    ``history`` is a sequence of MetricsRecord or of per-class IoU vectors.
    The window holds the last ceil(tail_frac * len) epochs, at least two.
    Epochs where a class is absent (NaN) are skipped for that class.
    """
    rows = [r.iou if isinstance(r, MetricsRecord) else r for r in history]
    tail = np.asarray(_tail(rows, tail_frac), dtype=np.float64)
    if tail.ndim == 1:
        tail = tail[:, None]
    stds, drops = [], []
    for col in tail.T:
        vals = col[~np.isnan(col)]
        if len(vals) == 0:
            stds.append(np.nan)
            drops.append(np.nan)
            continue
        stds.append(float(vals.std()))
        d = vals[:-1] - vals[1:]
        drops.append(float(max(0.0, d.max())) if len(d) else 0.0)
    return StabilityStats(np.asarray(stds), np.asarray(drops), len(tail))


@dataclass
class GeneralizationResult:
    miou_seen: float
    miou_shifted: float
    delta: float
    iou_seen: np.ndarray = field(repr=False, default=None)
    iou_shifted: np.ndarray = field(repr=False, default=None)


def evaluate(predict, scenes, num_classes: int, batch_size: int = 16) -> ConfusionMatrix:
    """Confusion matrix of ``predict(images) -> [B,C,H,W] probs/logits`` over scenes."""
    cm = ConfusionMatrix(num_classes)
    for start in range(0, len(scenes), batch_size):
        chunk = scenes[start:start + batch_size]
        x = np.stack([s.image for s in chunk])
        pred = predict(x).argmax(axis=1)
        cm.accumulate(pred, np.stack([s.labels for s in chunk]))
    return cm


def generalization_delta(predict, test, shifted_test, num_classes: int) -> GeneralizationResult:
    if not test or not shifted_test:
        raise ValueError("both splits must be non-empty")
    iou_a, seen = iou_scores(evaluate(predict, test, num_classes))
    iou_b, shifted = iou_scores(evaluate(predict, shifted_test, num_classes))
    return GeneralizationResult(seen, shifted, seen - shifted, iou_a, iou_b)

"""Confusion matrices and intersection-over-union."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lacrange.errors import ClassRangeError, DimensionError, UndefinedMetricError


@dataclass
class ConfusionMatrix:
    """``counts[gt, pred]`` over the points that were scored."""

    counts: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))


def compute_confusion(preds, gt, num_classes: int, ignore_id: int | None = -1) -> ConfusionMatrix:
    """Accumulate (gt, pred) pairs, skipping points whose ground truth is ``ignore_id``."""
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    gt = np.asarray(gt, dtype=np.int64).reshape(-1)
    if preds.shape != gt.shape:
        raise DimensionError(f"{preds.size} predictions for {gt.size} labels")
    keep = np.ones(gt.shape, dtype=bool) if ignore_id is None else gt != ignore_id
    p, g = preds[keep], gt[keep]
    for name, arr in (("prediction", p), ("label", g)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ClassRangeError(f"{name} ids outside [0, {num_classes})")
    counts = np.bincount(g * num_classes + p, minlength=num_classes * num_classes)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes).astype(np.int64))


def miou(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN where the class is absent) and their mean over present classes."""
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    union = c.sum(axis=0) + c.sum(axis=1) - tp
    present = union > 0
    if not present.any():
        raise UndefinedMetricError("no class occurs in predictions or ground truth")
    iou = np.full(len(tp), np.nan)
    iou[present] = tp[present] / union[present]
    return iou, float(iou[present].mean())

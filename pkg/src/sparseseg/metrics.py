"""Point-level confusion matrix, IoU and accuracy.

Classes whose denominator is zero are undefined: they are reported as NaN and
left out of the means.
"""

from __future__ import annotations

import numpy as np

from sparseseg.errors import InvalidInputError, UndefinedMetricError
from sparseseg.pointcloud import IGNORE


class ConfusionMatrix:
    """C x C counts, rows = ground truth, columns = prediction."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        if num_classes < 1:
            raise InvalidInputError("need at least one class")
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (num_classes, num_classes) or (counts < 0).any():
            raise InvalidInputError("counts must be a non-negative C x C matrix")
        self.counts = counts

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def copy(self) -> ConfusionMatrix:
        return ConfusionMatrix(self.num_classes, self.counts.copy())

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        if other.num_classes != self.num_classes:
            raise InvalidInputError("cannot merge matrices of different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def accumulate(self, pred, gt, ignore: int = IGNORE) -> ConfusionMatrix:
        """Add one count per point with ``gt != ignore``; updates in place."""
        pred = np.asarray(pred, dtype=np.int64).reshape(-1)
        gt = np.asarray(gt, dtype=np.int64).reshape(-1)
        if pred.shape != gt.shape:
            raise InvalidInputError(f"{pred.size} predictions for {gt.size} labels")
        scored = gt != ignore
        p, g = pred[scored], gt[scored]
        c = self.num_classes
        if p.size and (p.min() < 0 or p.max() >= c):
            raise InvalidInputError("prediction outside 0..C-1 (predictions are never IGNORE)")
        if g.size and (g.min() < 0 or g.max() >= c):
            raise InvalidInputError("ground-truth label outside 0..C-1 and not IGNORE")
        self.counts += np.bincount(g * c + p, minlength=c * c).reshape(c, c)
        return self


def accumulate(cm: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    return cm.copy().accumulate(pred, gt)


def _mean_defined(values: np.ndarray, what: str) -> float:
    defined = ~np.isnan(values)
    if not defined.any():
        raise UndefinedMetricError(f"{what} is undefined: no class has a non-zero denominator")
    return float(values[defined].mean())


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    tp = np.diag(cm.counts).astype(np.float64)
    denom = cm.counts.sum(axis=0) + cm.counts.sum(axis=1) - np.diag(cm.counts)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / denom, np.nan)


def acc_per_class(cm: ConfusionMatrix) -> np.ndarray:
    tp = np.diag(cm.counts).astype(np.float64)
    rows = cm.counts.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(rows > 0, tp / rows, np.nan)


def miou(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    per_class = iou_per_class(cm)
    return per_class, _mean_defined(per_class, "mIoU")


def macc(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    per_class = acc_per_class(cm)
    return per_class, _mean_defined(per_class, "mAcc")

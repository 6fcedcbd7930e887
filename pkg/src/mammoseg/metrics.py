"""Segmentation overlap and shape-classification metrics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractViolation
from .phantom import SHAPE_LABELS


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def overlap_counts(gt, pred) -> ConfusionCounts:
    """Pixel set algebra between ground truth A and prediction B."""
    a = np.asarray(gt).astype(bool)
    b = np.asarray(pred).astype(bool)
    if a.shape != b.shape:
        raise ContractViolation(f"mask extents differ: {a.shape} vs {b.shape}")
    tp = int(np.count_nonzero(a & b))
    fp = int(np.count_nonzero(~a & b))
    fn = int(np.count_nonzero(a & ~b))
    return ConfusionCounts(tp, fp, fn, a.size - tp - fp - fn)


def dice_and_iou(c: ConfusionCounts) -> Tuple[float, float]:
    """(2TP / (2TP+FP+FN), TP / (TP+FP+FN)); two empty masks score (1, 1)."""
    union = c.tp + c.fp + c.fn
    if union == 0:
        return 1.0, 1.0
    return 2 * c.tp / (2 * c.tp + c.fp + c.fn), c.tp / union


def dice_iou(gt, pred) -> Tuple[float, float]:
    return dice_and_iou(overlap_counts(gt, pred))


# -- classification --------------------------------------------------------

def confusion_matrix(truth: Sequence[int], pred: Sequence[int],
                     n_classes: int = len(SHAPE_LABELS)) -> np.ndarray:
    """Counts with rows = ground truth and columns = prediction."""
    t = np.asarray(truth, dtype=np.int64)
    p = np.asarray(pred, dtype=np.int64)
    if t.shape != p.shape:
        raise ContractViolation(f"label sequences differ in length: {t.size} vs {p.size}")
    if t.size and (min(t.min(), p.min()) < 0 or max(t.max(), p.max()) >= n_classes):
        raise ContractViolation("label index out of range")
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (t, p), 1)
    return m


def per_class_recall(m: np.ndarray) -> np.ndarray:
    rows = m.sum(axis=1)
    if np.any(rows == 0):
        raise ContractViolation("a ground-truth class has no samples")
    return np.diag(m) / rows


def overall_accuracy(m: np.ndarray) -> float:
    """Macro mean of per-class recalls, in percent."""
    return float(100.0 * per_class_recall(np.asarray(m)).mean())


def micro_accuracy(m: np.ndarray) -> float:
    """Fraction of all samples on the diagonal, in percent."""
    m = np.asarray(m)
    return float(100.0 * np.trace(m) / m.sum())


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    def points(self) -> List[Tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def binary_roc(scores, positive) -> RocCurve:
    """Threshold sweep over distinct scores (ties form one step); trapezoid AUC."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(positive).astype(bool).ravel()
    if s.shape != y.shape:
        raise ContractViolation("scores and truth differ in length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractViolation("ROC needs both positive and negative samples")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last_of_group = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(y)[last_of_group]
    fps = (last_of_group + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    thresholds = np.r_[np.inf, s[last_of_group]]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2))
    return RocCurve(fpr, tpr, thresholds, auc)


def roc_auc(scores, truth: Sequence[int]) -> RocCurve:
    """One-vs-rest micro average: every (sample, class) pair is pooled."""
    sc = np.asarray(scores, dtype=np.float64)
    t = np.asarray(truth, dtype=np.int64)
    if sc.ndim != 2 or sc.shape[0] != t.size:
        raise ContractViolation(f"need one score row per sample, got {sc.shape} for {t.size} labels")
    if np.unique(t).size < 2:
        raise ContractViolation("ROC needs ground truth from at least two classes")
    onehot = np.zeros(sc.shape, dtype=bool)
    onehot[np.arange(t.size), t] = True
    return binary_roc(sc.ravel(), onehot.ravel())


# -- distribution summaries --------------------------------------------------

@dataclass(frozen=True)
class BoxStats:
    n: int
    mean: float
    median: float
    q1: float
    q3: float
    whisker_low: float
    whisker_high: float
    minimum: float
    maximum: float
    outliers: Tuple[float, ...]


def box_stats(values) -> BoxStats:
    """Tukey box: linear-interpolated quartiles, whiskers at the last points within 1.5 IQR."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ContractViolation("box statistics need at least one value")
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    outliers = tuple(float(x) for x in v[(v < lo_fence) | (v > hi_fence)])
    return BoxStats(int(v.size), float(v.mean()), float(med), float(q1), float(q3),
                    float(inside.min()), float(inside.max()), float(v[0]), float(v[-1]), outliers)

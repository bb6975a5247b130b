"""Pixel overlap metrics over pooled one-vs-rest confusion counts.

Counts are kept as a 6x6 int64 confusion matrix (rows = ground truth,
columns = prediction) so accumulators from parallel workers merge by
addition. Ratios are only formed at the end, over the whole evaluation set.
Zero denominators yield ``None`` rather than 0 or 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import NUM_CLASSES, ClassScores, MaskImage, MetricReport, default_class_map

LESION_CLASSES = tuple(range(1, NUM_CLASSES))


class DimensionMismatchError(ValueError):
    pass


class EmptyMeanError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ConfusionAccumulator:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.int64, copy=True)
        if m.shape != (NUM_CLASSES, NUM_CLASSES):
            raise ValueError(f"confusion matrix must be {NUM_CLASSES}x{NUM_CLASSES}, got {m.shape}")
        if np.any(m < 0):
            raise ValueError("confusion counts must be non-negative")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def zero(cls) -> "ConfusionAccumulator":
        return cls(np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64))

    @property
    def total_pixels(self) -> int:
        return int(self.matrix.sum())

    @property
    def tp(self) -> np.ndarray:
        return np.diag(self.matrix).copy()

    @property
    def fp(self) -> np.ndarray:
        return self.matrix.sum(axis=0) - np.diag(self.matrix)

    @property
    def fn(self) -> np.ndarray:
        return self.matrix.sum(axis=1) - np.diag(self.matrix)

    @property
    def tn(self) -> np.ndarray:
        return self.total_pixels - self.tp - self.fp - self.fn

    def counts(self, c: int) -> tuple[int, int, int, int]:
        return int(self.tp[c]), int(self.fp[c]), int(self.fn[c]), int(self.tn[c])

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        return ConfusionAccumulator(self.matrix + other.matrix)

    __add__ = merge

    def __eq__(self, other):
        if not isinstance(other, ConfusionAccumulator):
            return NotImplemented
        return bool(np.array_equal(self.matrix, other.matrix))

    def __hash__(self):
        return hash(self.matrix.tobytes())


def _labels(mask) -> np.ndarray:
    return mask.labels if isinstance(mask, MaskImage) else np.asarray(mask)


def accumulate(acc: ConfusionAccumulator, gt, pred) -> ConfusionAccumulator:
    """Add the pixel confusion of one (ground truth, prediction) pair."""
    g, p = _labels(gt), _labels(pred)
    if g.shape != p.shape:
        raise DimensionMismatchError(f"ground truth {g.shape} and prediction {p.shape} differ")
    g = g.astype(np.int64, copy=False).ravel()
    p = p.astype(np.int64, copy=False).ravel()
    if g.size and (g.min() < 0 or g.max() >= NUM_CLASSES or p.min() < 0 or p.max() >= NUM_CLASSES):
        raise ValueError(f"labels must lie in 0..{NUM_CLASSES - 1}")
    counts = np.bincount(g * NUM_CLASSES + p, minlength=NUM_CLASSES * NUM_CLASSES)
    return acc.merge(ConfusionAccumulator(counts.reshape(NUM_CLASSES, NUM_CLASSES)))


def _ratio(num: int, den: int) -> Optional[float]:
    return None if den == 0 else float(num) / float(den)


def dice_from_counts(tp: int, fp: int, fn: int) -> Optional[float]:
    return _ratio(2 * tp, 2 * tp + fp + fn)


def iou_from_counts(tp: int, fp: int, fn: int) -> Optional[float]:
    return _ratio(tp, tp + fp + fn)


def dice(acc: ConfusionAccumulator, c: int) -> Optional[float]:
    tp, fp, fn, _ = acc.counts(c)
    return dice_from_counts(tp, fp, fn)


def iou(acc: ConfusionAccumulator, c: int) -> Optional[float]:
    tp, fp, fn, _ = acc.counts(c)
    return iou_from_counts(tp, fp, fn)


def mean_over_lesions(values: Mapping) -> float:
    """Arithmetic mean over lesion classes.

    ``values`` maps class index or class name to a score. Background and
    ``None`` entries (class absent from ground truth and prediction) are
    skipped.
    """
    cmap = default_class_map()
    kept = []
    for key, v in values.items():
        idx = cmap.index_of(key) if isinstance(key, str) else int(key)
        if idx == 0 or v is None:
            continue
        kept.append(float(v))
    if not kept:
        raise EmptyMeanError("no lesion class has a defined score")
    return sum(kept) / len(kept)


@dataclass(frozen=True)
class PixelMetrics:
    tpr: Optional[float]
    ppv: Optional[float]
    f1: Optional[float]


def f1_score(tpr: Optional[float], ppv: Optional[float]) -> Optional[float]:
    if tpr is None or ppv is None:
        return None
    if tpr + ppv == 0:
        return 0.0
    return 2 * tpr * ppv / (tpr + ppv)


def micro_pixel_metrics(acc: ConfusionAccumulator, classes: Sequence[int] = LESION_CLASSES) -> PixelMetrics:
    """Recall, precision and F-score with counts pooled over lesion classes.

    A lesion pixel predicted as a different lesion counts as FN for its true
    class and FP for the predicted class.
    """
    idx = list(classes)
    tp = int(acc.tp[idx].sum())
    fp = int(acc.fp[idx].sum())
    fn = int(acc.fn[idx].sum())
    tpr = _ratio(tp, tp + fn)
    ppv = _ratio(tp, tp + fp)
    return PixelMetrics(tpr, ppv, f1_score(tpr, ppv))


def tn_rate(acc: ConfusionAccumulator) -> Optional[float]:
    """TN / (TN + FP) for background pixels, where FP means any lesion label."""
    tn = int(acc.matrix[0, 0])
    fp = int(acc.matrix[0, 1:].sum())
    return _ratio(tn, tn + fp)


def relative_improvement(a: float, b: float) -> float:
    """Lead of ``a`` over ``b`` as a fraction of ``a``: (a - b) / a."""
    if not a > 0:
        raise ValueError(f"reference value must be positive, got {a!r}")
    return (a - b) / a


def build_report(acc: ConfusionAccumulator, provenance: Optional[Mapping] = None, *, with_tn_rate: bool = False) -> MetricReport:
    cmap = default_class_map()
    per_class = {}
    for entry in cmap:
        tp, fp, fn, tn = acc.counts(entry.index)
        per_class[entry.name] = ClassScores(dice_from_counts(tp, fp, fn), iou_from_counts(tp, fp, fn), tp, fp, fn, tn)
    lesion_dice = {i: dice(acc, i) for i in LESION_CLASSES}
    lesion_iou = {i: iou(acc, i) for i in LESION_CLASSES}
    defined = any(v is not None for v in lesion_dice.values())
    pm = micro_pixel_metrics(acc)
    return MetricReport(
        per_class=per_class,
        mean_dice=mean_over_lesions(lesion_dice) if defined else None,
        mean_iou=mean_over_lesions(lesion_iou) if defined else None,
        micro_tpr=pm.tpr,
        micro_ppv=pm.ppv,
        micro_f1=pm.f1,
        tn_rate=tn_rate(acc) if with_tn_rate else None,
        provenance=dict(provenance or {}),
    )

"""Pixel confusion counts, IOU, pooled ROC/PR curves and the slide-level rule."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

#: Fraction of positive pixels an image must exceed to be called positive.
SLIDE_THRESHOLD = 0.005
#: Pixel populations above this size are histogrammed before curve construction.
EXACT_CURVE_LIMIT = 10_000_000
CURVE_BINS = 4096


class DegenerateLabelsError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


def confusion_counts(pred_mask, gt_mask) -> ConfusionCounts:
    """Tumor-class pixel counts; any nonzero value is treated as tumor."""
    pred = np.asarray(pred_mask) != 0
    gt = np.asarray(gt_mask) != 0
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def _ratio_or_one(num: int, den: int) -> float:
    # class absent from both masks counts as perfect agreement
    return 1.0 if den == 0 else num / den


def iou_per_class(counts: ConfusionCounts) -> tuple:
    """``(iou_background, iou_tumor)``."""
    tumor = _ratio_or_one(counts.tp, counts.tp + counts.fp + counts.fn)
    background = _ratio_or_one(counts.tn, counts.tn + counts.fn + counts.fp)
    return background, tumor


def mean_iou(counts: ConfusionCounts) -> float:
    background, tumor = iou_per_class(counts)
    return (background + tumor) / 2


# ---------------------------------------------------------------------------
# curves
# ---------------------------------------------------------------------------


@dataclass
class CurveSeries:
    kind: str  # "ROC" or "PR"
    thresholds: np.ndarray
    x: np.ndarray
    y: np.ndarray
    auc: float

    @property
    def points(self) -> list:
        return list(zip(self.thresholds.tolist(), self.x.tolist(), self.y.tolist()))

    def to_csv(self, path) -> None:
        header = ["threshold", "fpr", "tpr"] if self.kind == "ROC" else ["threshold", "recall", "precision"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for t, x, y in self.points:
                writer.writerow([repr(float(t)), repr(float(x)), repr(float(y))])


def _prepare(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.size} vs {y.size}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    return s, y.astype(bool)


def operating_counts(scores, labels, bins: Optional[int] = None) -> tuple:
    """Cumulative ``(thresholds, tp, fp)`` at each distinct score, descending.

    A point at threshold t counts every sample scoring >= t as positive. With
    ``bins`` set, scores in [0, 1] are first bucketed into that many equal bins
    and the thresholds become the bin lower edges.
    """
    s, y = _prepare(scores, labels)
    if bins is None and s.size > EXACT_CURVE_LIMIT:
        bins = CURVE_BINS
    if bins is not None:
        idx = np.clip(np.floor(s * bins), 0, bins - 1).astype(np.int64)
        pos = np.bincount(idx[y], minlength=bins)[::-1]
        neg = np.bincount(idx[~y], minlength=bins)[::-1]
        keep = (pos + neg) > 0
        edges = (np.arange(bins)[::-1] / bins)[keep]
        return edges, np.cumsum(pos)[keep], np.cumsum(neg)[keep]
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    last = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), s.size - 1]
    tps = np.cumsum(y_sorted)[last]
    fps = (last + 1) - tps
    return s_sorted[last], tps, fps


def roc_curve(scores, labels, bins: Optional[int] = None) -> CurveSeries:
    """Tie-grouped ROC from (inf, 0, 0) to (min score, 1, 1), trapezoidal AUC."""
    thr, tps, fps = operating_counts(scores, labels, bins)
    n_pos, n_neg = (tps[-1], fps[-1]) if tps.size else (0, 0)
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabelsError("degenerate labels: ROC needs both positive and negative samples")
    fpr = np.r_[0.0, fps / n_neg]
    tpr = np.r_[0.0, tps / n_pos]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1])) / 2)
    return CurveSeries("ROC", np.r_[np.inf, thr], fpr, tpr, auc)


def pr_curve(scores, labels, bins: Optional[int] = None) -> CurveSeries:
    """Precision/recall at each distinct threshold; AUC is step-interpolated average precision."""
    thr, tps, fps = operating_counts(scores, labels, bins)
    n_pos = tps[-1] if tps.size else 0
    if n_pos == 0:
        raise DegenerateLabelsError("degenerate labels: PR needs at least one positive sample")
    recall = tps / n_pos
    precision = tps / (tps + fps)
    ap = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    return CurveSeries("PR", thr, recall, precision, ap)


def iso_f1_points(f1_level: float, recall_grid: Sequence[float]) -> list:
    """``(recall, precision)`` pairs with harmonic mean ``f1_level``; recall <= f1/2 is skipped."""
    if not 0 < f1_level < 1:
        raise ValueError(f"f1_level must be in (0, 1), got {f1_level}")
    out = []
    for r in recall_grid:
        r = float(r)
        if r <= f1_level / 2:
            continue
        out.append((r, f1_level * r / (2 * r - f1_level)))
    return out


# ---------------------------------------------------------------------------
# slide level
# ---------------------------------------------------------------------------


@dataclass
class SlideVerdict:
    id: str
    positive_pixel_count: int
    total_pixels: int
    predicted: bool
    truth: Optional[bool] = None

    @property
    def correct(self) -> Optional[bool]:
        return None if self.truth is None else self.predicted == self.truth


def exceeds_fraction(count: int, total: int, fraction=SLIDE_THRESHOLD) -> bool:
    """Exact ``count > fraction * total`` with the fraction read as a decimal."""
    return Fraction(int(count)) > Fraction(str(fraction)) * int(total)


def slide_classify(binary_mask, id: str = "", truth: Optional[bool] = None, threshold_fraction=SLIDE_THRESHOLD) -> SlideVerdict:
    """Positive when predicted tumor pixels exceed ``threshold_fraction`` of the image."""
    mask = np.asarray(binary_mask)
    count = int(np.count_nonzero(mask))
    total = int(mask.size)
    return SlideVerdict(id, count, total, exceeds_fraction(count, total, threshold_fraction), truth)


@dataclass
class SlideSummary:
    accuracy: float
    sensitivity: Optional[float]
    specificity: Optional[float]
    tp: int
    fn: int
    tn: int
    fp: int

    @property
    def table(self) -> dict:
        return {"tp": self.tp, "fn": self.fn, "tn": self.tn, "fp": self.fp}


def slide_metrics(verdicts: Sequence[SlideVerdict]) -> SlideSummary:
    """Accuracy, sensitivity and specificity; a ratio with no denominator is None."""
    if not verdicts:
        raise ValueError("slide_metrics needs at least one verdict")
    if any(v.truth is None for v in verdicts):
        raise ValueError("every verdict needs a ground-truth label")
    tp = sum(1 for v in verdicts if v.truth and v.predicted)
    fn = sum(1 for v in verdicts if v.truth and not v.predicted)
    tn = sum(1 for v in verdicts if not v.truth and not v.predicted)
    fp = sum(1 for v in verdicts if not v.truth and v.predicted)
    return SlideSummary(
        accuracy=(tp + tn) / len(verdicts),
        sensitivity=tp / (tp + fn) if tp + fn else None,
        specificity=tn / (tn + fp) if tn + fp else None,
        tp=tp,
        fn=fn,
        tn=tn,
        fp=fp,
    )


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

SUMMARY_KEYS = (
    "iou_background",
    "iou_tumor",
    "mean_iou",
    "roc_auc",
    "pr_auc",
    "slide_accuracy",
    "slide_sensitivity",
    "slide_specificity",
    "threshold_fraction",
    "n_test_images",
    "n_test_pixels",
)


def summary(counts: ConfusionCounts, roc: Optional[CurveSeries], pr: Optional[CurveSeries], slides: SlideSummary, threshold_fraction: float, n_images: int) -> dict:
    background, tumor = iou_per_class(counts)
    out = {
        "iou_background": background,
        "iou_tumor": tumor,
        "mean_iou": (background + tumor) / 2,
        "roc_auc": roc.auc if roc is not None else None,
        "pr_auc": pr.auc if pr is not None else None,
        "slide_accuracy": slides.accuracy,
        "slide_sensitivity": slides.sensitivity,
        "slide_specificity": slides.specificity,
        "threshold_fraction": float(threshold_fraction),
        "n_test_images": int(n_images),
        "n_test_pixels": int(counts.total),
    }
    assert tuple(out) == SUMMARY_KEYS
    for k, v in out.items():
        if isinstance(v, float) and not math.isfinite(v):
            raise ValueError(f"summary value {k} is not finite")
    return out

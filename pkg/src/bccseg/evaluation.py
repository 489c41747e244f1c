"""Test-set evaluation: pooled pixel curves, IOU and slide verdicts."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import metrics as M
from .data import MissingFileError, normalize, read_mask
from .model import Model, predict_mask


@dataclass
class Evaluation:
    counts: M.ConfusionCounts
    roc: Optional[M.CurveSeries]
    pr: Optional[M.CurveSeries]
    verdicts: list
    slides: M.SlideSummary
    threshold_fraction: float

    @property
    def summary(self) -> dict:
        return M.summary(self.counts, self.roc, self.pr, self.slides, self.threshold_fraction, len(self.verdicts))

    def write(self, report_path=None, roc_path=None, pr_path=None) -> None:
        if report_path is not None:
            Path(report_path).write_text(json.dumps(self.summary, indent=2) + "\n")
        if roc_path is not None and self.roc is not None:
            self.roc.to_csv(roc_path)
        if pr_path is not None and self.pr is not None:
            self.pr.to_csv(pr_path)


def _curves(scores: np.ndarray, labels: np.ndarray) -> tuple:
    roc = M.roc_curve(scores, labels) if 0 < labels.sum() < labels.size else None
    pr = M.pr_curve(scores, labels) if labels.any() else None
    return roc, pr


def evaluate_predictions(
    ids: Sequence[str],
    prob_maps: Sequence[np.ndarray],
    pred_masks: Sequence[np.ndarray],
    gt_masks: Sequence[np.ndarray],
    threshold_fraction: float = M.SLIDE_THRESHOLD,
) -> Evaluation:
    """Pool per-image predictions into one evaluation.

    ROC and PR are computed on the concatenation of every image's pixels;
    a curve whose label population is single-class is reported as None.
    """
    if not ids:
        raise ValueError("nothing to evaluate")
    counts = M.ConfusionCounts(0, 0, 0, 0)
    verdicts = []
    for rid, pred, gt in zip(ids, pred_masks, gt_masks):
        counts = counts + M.confusion_counts(pred, gt)
        verdicts.append(M.slide_classify(pred, rid, bool(np.any(gt)), threshold_fraction))
    scores = np.concatenate([np.ravel(p) for p in prob_maps])
    labels = np.concatenate([(np.ravel(g) != 0).astype(np.int8) for g in gt_masks])
    roc, pr = _curves(scores, labels)
    return Evaluation(counts, roc, pr, verdicts, M.slide_metrics(verdicts), threshold_fraction)


def evaluate_model(
    model: Model,
    records: Sequence,
    threshold_fraction: float = M.SLIDE_THRESHOLD,
    prob_threshold: Optional[float] = None,
    threads: int = 1,
) -> Evaluation:
    """Run ``model`` over ``records`` one image at a time and evaluate.

    Binary masks come from the argmax unless ``prob_threshold`` is given, in
    which case a pixel is tumor when its probability exceeds that value.
    """
    model.eval()

    def run(record):
        prob, mask = predict_mask(model, normalize(record.image))
        if prob_threshold is not None:
            mask = (prob > prob_threshold).astype(np.uint8)
        return prob[0], mask[0]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outputs = list(pool.map(run, records))
    else:
        outputs = [run(r) for r in records]
    return evaluate_predictions(
        [r.id for r in records],
        [o[0] for o in outputs],
        [o[1] for o in outputs],
        [r.mask for r in records],
        threshold_fraction,
    )


def evaluate_mask_dirs(pred_dir, gt_dir, threshold_fraction: float = M.SLIDE_THRESHOLD) -> Evaluation:
    """Evaluate externally produced masks against ground truth, matched by file name.

    Prediction PNGs may be binary (0/255) or grayscale probability maps; the
    gray level / 255 is the pixel score and values above 127 count as tumor.
    """
    from PIL import Image

    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    names = sorted(p.name for p in gt_dir.glob("*.png"))
    if not names:
        raise MissingFileError(f"no ground-truth masks in {gt_dir}")
    ids, probs, preds, gts = [], [], [], []
    for name in names:
        pred_path = pred_dir / name
        if not pred_path.is_file():
            raise MissingFileError(f"missing prediction {pred_path}")
        with Image.open(pred_path) as im:
            gray = np.asarray(im.convert("L"), dtype=np.uint8)
        gt = read_mask(gt_dir / name)
        if gray.shape != gt.shape:
            raise ValueError(f"{name}: prediction is {gray.shape} but ground truth is {gt.shape}")
        ids.append(Path(name).stem)
        probs.append(gray / 255.0)
        preds.append((gray > 127).astype(np.uint8))
        gts.append(gt)
    return evaluate_predictions(ids, probs, preds, gts, threshold_fraction)

import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bccseg import metrics as M
from bccseg.metrics import ConfusionCounts, SlideVerdict

from oracles import enumerated_average_precision, loop_confusion, pairwise_auc

WORKED_LABELS = [0, 0, 1, 1]
WORKED_SCORES = [0.1, 0.4, 0.35, 0.8]


def worked_masks():
    gt = np.zeros((4, 4), np.uint8)
    pred = np.zeros((4, 4), np.uint8)
    gt[0, :4] = 1
    pred[0, :2] = 1
    pred[1, :2] = 1
    return pred, gt


class TestConfusion:
    def test_worked_example(self):
        pred, gt = worked_masks()
        assert M.confusion_counts(pred, gt) == ConfusionCounts(tp=2, fp=2, fn=2, tn=10)

    def test_identical(self):
        m = np.random.default_rng(0).integers(0, 2, (9, 7))
        c = M.confusion_counts(m, m)
        assert c.fp == c.fn == 0

    def test_all_zero_prediction(self):
        gt = np.zeros((5, 5))
        gt[1:3, 1:4] = 255
        c = M.confusion_counts(np.zeros((5, 5)), gt)
        assert (c.tp, c.fn) == (0, 6)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            M.confusion_counts(np.zeros((3, 3)), np.zeros((3, 4)))

    def test_loop_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            h, w = rng.integers(1, 65, size=2)
            pred = rng.integers(0, 2, (h, w)) * 255
            gt = (rng.random((h, w)) < rng.random()).astype(np.uint8)
            c = M.confusion_counts(pred, gt)
            assert (c.tp, c.fp, c.fn, c.tn) == loop_confusion(pred, gt)
            assert c.total == h * w


class TestIou:
    def test_worked_example(self):
        bg, tumor = M.iou_per_class(ConfusionCounts(2, 2, 2, 10))
        assert tumor == pytest.approx(1 / 3, abs=1e-12)
        assert bg == pytest.approx(10 / 14, abs=1e-12)
        assert M.mean_iou(ConfusionCounts(2, 2, 2, 10)) == pytest.approx((1 / 3 + 10 / 14) / 2, abs=1e-12)
        assert M.mean_iou(ConfusionCounts(2, 2, 2, 10)) == pytest.approx(0.5238, abs=1e-4)

    def test_identical_nonempty(self):
        m = np.zeros((4, 4))
        m[1, 1] = 1
        assert M.iou_per_class(M.confusion_counts(m, m)) == (1.0, 1.0)

    def test_both_empty(self):
        c = M.confusion_counts(np.zeros((3, 3)), np.zeros((3, 3)))
        assert M.iou_per_class(c) == (1.0, 1.0)

    def test_all_tumor_background_absent(self):
        m = np.ones((3, 3))
        assert M.iou_per_class(M.confusion_counts(m, m)) == (1.0, 1.0)


class TestRoc:
    def test_worked_example(self):
        roc = M.roc_curve(WORKED_SCORES, WORKED_LABELS)
        assert roc.auc == pytest.approx(0.75, abs=1e-12)
        assert (roc.x[0], roc.y[0]) == (0.0, 0.0)
        assert (roc.x[-1], roc.y[-1]) == (1.0, 1.0)

    def test_separated(self):
        assert M.roc_curve([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]).auc == 1.0

    def test_all_tied(self):
        roc = M.roc_curve(np.full(10, 0.3), [0, 1] * 5)
        assert roc.auc == 0.5
        assert len(roc.points) == 2

    @pytest.mark.parametrize("labels", [[0, 0, 0], [1, 1, 1]])
    def test_degenerate(self, labels):
        with pytest.raises(M.DegenerateLabelsError, match="degenerate labels"):
            M.roc_curve([0.1, 0.2, 0.3], labels)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            M.roc_curve([0.1, 0.2], [0, 1, 1])

    def test_pairwise_oracle_random(self):
        rng = np.random.default_rng(2)
        for k in range(100):
            n = int(rng.integers(2, 400))
            labels = rng.integers(0, 2, n)
            labels[:2] = [0, 1]
            # coarse scores force ties on even instances
            scores = rng.random(n)
            if k % 2 == 0:
                scores = np.round(scores, 1)
            assert abs(M.roc_curve(scores, labels).auc - pairwise_auc(scores, labels)) <= 1e-9

    def test_pairwise_oracle_large(self):
        rng = np.random.default_rng(3)
        labels = rng.integers(0, 2, 10_000)
        scores = np.round(rng.random(10_000) + 0.3 * labels, 3)
        assert abs(M.roc_curve(scores, labels).auc - pairwise_auc(scores, labels)) <= 1e-9

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 20), st.booleans()), min_size=2, max_size=60))
    def test_monotone_in_unit_square(self, pairs):
        scores = [s / 20 for s, _ in pairs]
        labels = [int(b) for _, b in pairs]
        if len(set(labels)) < 2:
            return
        roc = M.roc_curve(scores, labels)
        assert np.all(np.diff(roc.x) >= 0) and np.all(np.diff(roc.y) >= 0)
        assert np.all((roc.x >= 0) & (roc.x <= 1) & (roc.y >= 0) & (roc.y <= 1))
        assert 0 <= roc.auc <= 1

    def test_binned_matches_exact(self):
        rng = np.random.default_rng(4)
        n = 1_000_000
        labels = (rng.random(n) < 0.3).astype(np.int8)
        logit = rng.standard_normal(n) + 1.5 * labels
        scores = 1 / (1 + np.exp(-logit))
        exact = M.roc_curve(scores, labels)
        binned = M.roc_curve(scores, labels, bins=M.CURVE_BINS)
        assert len(binned.points) <= M.CURVE_BINS + 1
        assert abs(exact.auc - binned.auc) <= 1e-3
        assert abs(M.pr_curve(scores, labels).auc - M.pr_curve(scores, labels, bins=M.CURVE_BINS).auc) <= 1e-3

    def test_csv(self, tmp_path):
        M.roc_curve(WORKED_SCORES, WORKED_LABELS).to_csv(tmp_path / "roc.csv")
        rows = list(csv.reader(open(tmp_path / "roc.csv")))
        assert rows[0] == ["threshold", "fpr", "tpr"]
        assert rows[1] == ["inf", "0.0", "0.0"]
        assert [float(v) for v in rows[-1][1:]] == [1.0, 1.0]


class TestPr:
    def test_worked_example(self):
        pr = M.pr_curve(WORKED_SCORES, WORKED_LABELS)
        assert pr.auc == pytest.approx(1.0 * 0.5 + (2 / 3) * 0.5, abs=1e-12)
        assert pr.auc == pytest.approx(0.8333, abs=1e-4)

    def test_all_positive(self):
        assert M.pr_curve([0.2, 0.9, 0.4], [1, 1, 1]).auc == 1.0

    def test_no_positives(self):
        with pytest.raises(M.DegenerateLabelsError):
            M.pr_curve([0.1, 0.2], [0, 0])

    def test_random_scores_give_prevalence(self):
        rng = np.random.default_rng(5)
        labels = rng.integers(0, 2, 10_000)
        ap = M.pr_curve(rng.random(10_000), labels).auc
        assert abs(ap - labels.mean()) <= 0.05

    def test_enumeration_oracle(self):
        rng = np.random.default_rng(6)
        for k in range(100):
            n = int(rng.integers(1, 300))
            labels = rng.integers(0, 2, n)
            labels[0] = 1
            scores = rng.random(n)
            if k % 2:
                scores = np.round(scores, 1)
            assert abs(M.pr_curve(scores, labels).auc - enumerated_average_precision(scores, labels)) <= 1e-9

    def test_recall_monotone(self):
        rng = np.random.default_rng(7)
        pr = M.pr_curve(rng.random(500), rng.integers(0, 2, 500))
        assert np.all(np.diff(pr.x) >= 0)
        assert np.all((pr.y >= 0) & (pr.y <= 1))

    def test_csv_header(self, tmp_path):
        M.pr_curve(WORKED_SCORES, WORKED_LABELS).to_csv(tmp_path / "pr.csv")
        assert open(tmp_path / "pr.csv").readline().strip() == "threshold,recall,precision"


class TestIsoF1:
    def test_symmetric_point(self):
        assert M.iso_f1_points(0.5, [0.5]) == [(0.5, pytest.approx(0.5, abs=1e-9))]

    def test_pole_omitted(self):
        assert M.iso_f1_points(0.6, [0.3, 0.2]) == []

    @given(st.floats(0.01, 0.99), st.lists(st.floats(0.0, 1.0), max_size=30))
    def test_harmonic_identity(self, f1, grid):
        for r, p in M.iso_f1_points(f1, grid):
            assert r > f1 / 2
            assert 2 * p * r / (p + r) == pytest.approx(f1, abs=1e-9)

    @pytest.mark.parametrize("f1", [0.0, 1.0, -0.2, 1.5])
    def test_range(self, f1):
        with pytest.raises(ValueError):
            M.iso_f1_points(f1, [0.5])


class TestSlide:
    def test_clinical_resolution_boundary(self):
        total = 576 * 432
        assert total == 248_832
        mask = np.zeros(total, np.uint8)
        mask[:1244] = 1
        assert not M.slide_classify(mask.reshape(432, 576)).predicted
        mask[:1245] = 1
        v = M.slide_classify(mask.reshape(432, 576))
        assert v.predicted and v.positive_pixel_count == 1245 and v.total_pixels == total

    def test_all_zero(self):
        assert not M.slide_classify(np.zeros((10, 10))).predicted

    def test_random_sizes(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            h, w = (int(v) for v in rng.integers(1, 700, size=2))
            total = h * w
            floor = total // 200  # floor(0.005 * total) in integer arithmetic
            mask = np.zeros(total, np.uint8)
            mask[:floor] = 1
            if floor * 200 < total:
                assert not M.slide_classify(mask.reshape(h, w)).predicted
            if floor + 1 <= total:
                mask[: floor + 1] = 1
                assert M.slide_classify(mask.reshape(h, w)).predicted

    def test_exact_multiple_is_not_exceeded(self):
        # 200 pixels: 0.5% is exactly one pixel, which does not exceed itself
        mask = np.zeros((10, 20))
        mask[0, 0] = 1
        assert not M.slide_classify(mask).predicted

    def test_custom_fraction(self):
        mask = np.zeros((10, 10))
        mask[0, :3] = 1
        assert M.slide_classify(mask, threshold_fraction=0.02).predicted
        assert not M.slide_classify(mask, threshold_fraction=0.03).predicted


def verdicts(tp, fn, tn, fp):
    out = [SlideVerdict("", 1, 1, True, True)] * tp + [SlideVerdict("", 0, 1, False, True)] * fn
    return out + [SlideVerdict("", 0, 1, False, False)] * tn + [SlideVerdict("", 1, 1, True, False)] * fp


class TestSlideMetrics:
    def test_published_counts(self):
        s = M.slide_metrics(verdicts(65, 0, 55, 5))
        assert s.accuracy == pytest.approx(0.96, abs=5e-4)
        assert s.sensitivity == pytest.approx(1.0, abs=5e-4)
        assert s.specificity == pytest.approx(0.917, abs=5e-4)
        assert s.table == {"tp": 65, "fn": 0, "tn": 55, "fp": 5}

    def test_all_correct(self):
        s = M.slide_metrics(verdicts(3, 0, 4, 0))
        assert (s.accuracy, s.sensitivity, s.specificity) == (1.0, 1.0, 1.0)

    def test_no_negatives(self):
        s = M.slide_metrics(verdicts(3, 1, 0, 0))
        assert s.specificity is None
        assert s.sensitivity == 0.75

    def test_empty(self):
        with pytest.raises(ValueError):
            M.slide_metrics([])

    def test_missing_truth(self):
        with pytest.raises(ValueError):
            M.slide_metrics([SlideVerdict("", 0, 1, False)])


class TestSummary:
    def test_keys_and_values(self):
        roc = M.roc_curve(WORKED_SCORES, WORKED_LABELS)
        pr = M.pr_curve(WORKED_SCORES, WORKED_LABELS)
        s = M.summary(ConfusionCounts(2, 2, 2, 10), roc, pr, M.slide_metrics(verdicts(1, 0, 1, 0)), 0.005, 2)
        assert tuple(s) == M.SUMMARY_KEYS
        assert s["n_test_pixels"] == 16
        assert s["roc_auc"] == 0.75
        assert all(v is None or math.isfinite(v) for v in s.values())

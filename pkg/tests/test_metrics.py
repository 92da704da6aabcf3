import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from attnseg.metrics import (
    REPORT_KEYS, ConfusionMatrix, UndefinedMetricError, accumulate, balanced_accuracy, ciw_iou, f1,
    format_report, fwiou, iou, mcc, report,
)
from oracles import binary_mcc, brute_metrics, tally

HAND = ConfusionMatrix(2, [[6, 2], [1, 3]])


def _cm(pred, gt, k):
    return accumulate(ConfusionMatrix(k), pred, gt)


class TestAccumulate:
    def test_single_class(self):
        cm = _cm(np.full((4, 5), 2), np.full((4, 5), 2), 3)
        expected = np.zeros((3, 3), int)
        expected[2, 2] = 20
        np.testing.assert_array_equal(cm.counts, expected)

    def test_empty_pair(self):
        cm = _cm(np.zeros((0, 3), int), np.zeros((0, 3), int), 3)
        assert cm.total == 0

    def test_brute_force_tally(self):
        rng = np.random.default_rng(0)
        pred, gt = rng.integers(0, 4, (16, 16)), rng.integers(0, 4, (16, 16))
        _, _, _, ref = tally(pred, gt, 4)
        np.testing.assert_array_equal(_cm(pred, gt, 4).counts, ref)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            _cm(np.array([0, 3]), np.array([0, 1]), 3)
        with pytest.raises(ValueError):
            _cm(np.array([0, 1]), np.array([-1, 1]), 3)


class TestHandMatrix:
    def test_iou(self):
        per, mean = iou(HAND)
        assert per == pytest.approx([6 / 9, 3 / 6])
        assert mean == pytest.approx(0.583333333, abs=1e-8)
        assert iou(HAND, include_background=False)[1] == pytest.approx(0.5)

    def test_fwiou(self):
        assert fwiou(HAND) == pytest.approx((8 / 12) * (6 / 9) + (4 / 12) * (3 / 6))
        assert fwiou(HAND) == pytest.approx(0.611111111, abs=1e-8)

    def test_f1(self):
        per, macro = f1(HAND)
        assert per == pytest.approx([0.8, 2 / 3])
        assert macro == pytest.approx((0.8 + 2 / 3) / 2)

    def test_balanced_accuracy(self):
        assert balanced_accuracy(HAND) == pytest.approx(0.75)

    def test_mcc(self):
        assert mcc(HAND) == pytest.approx(16 / math.sqrt(7 * 8 * 5 * 4), abs=1e-12)
        assert mcc(HAND) == pytest.approx(0.4781, abs=1e-4)


class TestEdgeCases:
    def test_perfect(self):
        gt = np.random.default_rng(1).integers(0, 4, (10, 10))
        cm = _cm(gt, gt, 4)
        assert iou(cm)[1] == 1.0
        assert fwiou(cm) == pytest.approx(1.0)
        assert ciw_iou(cm, [0, 1, 0.5, 0.2]) == pytest.approx(1.0)
        assert f1(cm)[1] == 1.0
        assert balanced_accuracy(cm) == 1.0
        assert mcc(cm) == pytest.approx(1.0)

    def test_disjoint_binary(self):
        cm = ConfusionMatrix(2, [[0, 5], [5, 0]])
        assert iou(cm)[0][1] == 0.0

    def test_single_class_gt_fwiou(self):
        cm = ConfusionMatrix(3, [[7, 2, 1], [0, 0, 0], [0, 0, 0]])
        per, _ = iou(cm)
        assert fwiou(cm) == pytest.approx(per[0])

    def test_equal_ciw_is_mean_iou(self):
        cm = ConfusionMatrix(3, [[5, 1, 0], [2, 4, 1], [0, 0, 0]])
        assert ciw_iou(cm, [1, 1, 1]) == pytest.approx(iou(cm)[1])

    def test_ciw_hand(self):
        cm = ConfusionMatrix(3, [[10, 1, 1], [2, 4, 0], [1, 1, 2]])
        i1 = 4 / (4 + 2 + 2)
        i2 = 2 / (2 + 1 + 2)
        assert ciw_iou(cm, [0, 1.0, 0.5]) == pytest.approx((1.0 * i1 + 0.5 * i2) / 1.5)

    def test_never_predicted_class_f1_zero(self):
        cm = ConfusionMatrix(2, [[5, 0], [3, 0]])
        assert f1(cm)[0][1] == 0.0

    def test_minority_missed_balanced(self):
        assert balanced_accuracy(ConfusionMatrix(2, [[90, 0], [10, 0]])) == pytest.approx(0.5)

    def test_independent_prediction_mcc_zero(self):
        assert mcc(ConfusionMatrix(3, np.full((3, 3), 4))) == pytest.approx(0.0, abs=1e-15)

    def test_absent_class_excluded(self):
        cm = ConfusionMatrix(3, [[4, 0, 0], [0, 4, 0], [0, 0, 0]])
        per, mean = iou(cm)
        assert math.isnan(per[2]) and mean == 1.0
        assert iou(cm, absent="zero")[1] == pytest.approx(2 / 3)

    def test_empty_matrix(self):
        with pytest.raises(UndefinedMetricError):
            iou(ConfusionMatrix(2))

    def test_nobg_undefined_when_only_background(self):
        with pytest.raises(UndefinedMetricError):
            iou(ConfusionMatrix(2, [[3, 0], [0, 0]]), include_background=False)


def _random_pair(seed, k, n=200):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, k, n)
    pred = np.where(rng.random(n) < 0.6, gt, rng.integers(0, k, n))
    return pred, gt


@given(st.integers(0, 10_000), st.integers(2, 5))
@settings(max_examples=40, deadline=None)
def test_matches_brute_force_oracle(seed, k):
    pred, gt = _random_pair(seed, k)
    ciw = [0.0] + [1.0 / c for c in range(1, k)]
    cm = _cm(pred, gt, k)
    ref = brute_metrics(pred, gt, k, ciw)
    rep = report(cm, [str(c) for c in range(k)], ciw)
    for key in ("iou_bg", "iou_nobg", "fwiou", "ciw_iou", "f1", "balanced_acc", "mcc"):
        assert rep[key] == pytest.approx(ref[key], abs=1e-12), key


@given(st.integers(0, 10_000), st.permutations(range(4)))
@settings(max_examples=30, deadline=None)
def test_class_permutation_invariance(seed, perm):
    pred, gt = _random_pair(seed, 4)
    perm = np.asarray(perm)
    a, b = _cm(pred, gt, 4), _cm(perm[pred], perm[gt], 4)
    assert iou(a)[1] == pytest.approx(iou(b)[1])
    assert fwiou(a) == pytest.approx(fwiou(b))
    assert f1(a)[1] == pytest.approx(f1(b)[1])
    assert balanced_accuracy(a) == pytest.approx(balanced_accuracy(b))
    assert mcc(a) == pytest.approx(mcc(b))
    w = np.array([0.1, 0.7, 0.3, 1.0])
    inv = np.empty(4, float)
    inv[perm] = w
    assert ciw_iou(a, w) == pytest.approx(ciw_iou(b, inv))


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_batch_additivity(seed):
    pred, gt = _random_pair(seed, 3, 300)
    whole = _cm(pred, gt, 3)
    parts = _cm(pred[:100], gt[:100], 3) + _cm(pred[100:], gt[100:], 3)
    np.testing.assert_array_equal(whole.counts, parts.counts)
    inc = ConfusionMatrix(3)
    for s in (slice(0, 50), slice(50, 220), slice(220, 300)):
        inc.accumulate(pred[s], gt[s])
    assert mcc(inc) == mcc(whole) and iou(inc)[1] == iou(whole)[1]


@given(st.lists(st.integers(0, 50), min_size=4, max_size=4))
@settings(max_examples=60, deadline=None)
def test_binary_mcc_reduction(c):
    tn, fp, fn, tp = c
    if tn + fp + fn + tp == 0:
        return
    cm = ConfusionMatrix(2, [[tn, fp], [fn, tp]])
    assert mcc(cm) == pytest.approx(binary_mcc(tp, tn, fp, fn), abs=1e-10)


@given(st.integers(0, 10_000), st.integers(2, 5))
@settings(max_examples=30, deadline=None)
def test_fwiou_equals_mean_when_balanced(seed, k):
    rng = np.random.default_rng(seed)
    gt = np.repeat(np.arange(k), 20)
    pred = np.where(rng.random(gt.size) < 0.7, gt, rng.integers(0, k, gt.size))
    cm = _cm(pred, gt, k)
    assert fwiou(cm) == pytest.approx(iou(cm)[1], abs=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_ranges(seed):
    pred, gt = _random_pair(seed, 4)
    rep = report(_cm(pred, gt, 4), list("abcd"), [0, 1, 1, 1])
    for key in REPORT_KEYS:
        lo = -1 if key == "mcc" else 0
        assert lo <= rep[key] <= 1


def test_report_text_and_schema(tmp_path):
    rep = report(HAND, ["bg", "fg"], [0, 1])
    assert set(REPORT_KEYS) <= set(rep)
    assert rep["confusion_matrix"] == [[6, 2], [1, 3]]
    assert rep["per_class"]["support"] == [8, 4]
    txt = format_report(rep)
    assert "mcc" in txt and "fg" in txt

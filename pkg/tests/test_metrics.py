import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from ucelab.errors import DataError, UndefinedMetricError
from ucelab.metrics import (
    CalibrationBins,
    ConfusionMatrix,
    MetricsReport,
    binary_accuracy_map,
    ece,
    miou,
    munc,
    update_confusion,
)


def test_confusion_perfect_is_diagonal():
    truth = np.array([[0, 1], [2, 1]])
    cm = update_confusion(ConfusionMatrix(3), truth, truth)
    assert np.array_equal(cm.counts, np.diag([1, 2, 1]))


def test_confusion_void_skipped():
    cm = ConfusionMatrix(2)
    update_confusion(cm, np.array([0, 1]), np.array([255, 255]))
    assert cm.total == 0


def test_confusion_hand_tally():
    cm = update_confusion(ConfusionMatrix(2), np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1]))
    assert cm.counts.tolist() == [[1, 1], [0, 2]]


def test_confusion_out_of_range():
    with pytest.raises(DataError):
        update_confusion(ConfusionMatrix(2), np.array([2]), np.array([0]))


def test_miou_perfect():
    cm = update_confusion(ConfusionMatrix(3), np.array([0, 1, 2]), np.array([0, 1, 2]))
    assert miou(cm) == 1.0


def test_miou_hand_case():
    cm = update_confusion(ConfusionMatrix(2), np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1]))
    assert cm.per_class_iou() == [0.5, pytest.approx(2 / 3)]
    assert miou(cm) == pytest.approx(7 / 12, abs=1e-12)


def test_miou_never_predicted_class_scores_zero():
    # class 1 appears twice in truth, never predicted: TP=0, FN=2 -> IoU 0 (counted)
    cm = update_confusion(ConfusionMatrix(3), np.array([0, 0, 0]), np.array([0, 1, 1]))
    ious = cm.per_class_iou()
    assert ious[1] == 0.0 and ious[2] is None
    assert miou(cm) == pytest.approx((1 / 3 + 0.0) / 2)
    assert miou(cm, absent="zero") == pytest.approx((1 / 3) / 3)


def test_miou_empty():
    with pytest.raises(UndefinedMetricError):
        miou(ConfusionMatrix(2))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**16))
def test_miou_relabel_invariant(seed):
    g = np.random.default_rng(seed)
    truth = g.integers(0, 4, 50)
    pred = g.integers(0, 4, 50)
    perm = g.permutation(4)
    a = miou(update_confusion(ConfusionMatrix(4), pred, truth))
    b = miou(update_confusion(ConfusionMatrix(4), perm[pred], perm[truth]))
    assert a == pytest.approx(b, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**16))
def test_confusion_mergeable(seed):
    g = np.random.default_rng(seed)
    t1, t2 = g.integers(0, 3, 20), g.integers(0, 3, 15)
    p1, p2 = g.integers(0, 3, 20), g.integers(0, 3, 15)
    whole = update_confusion(ConfusionMatrix(3), np.concatenate([p1, p2]), np.concatenate([t1, t2]))
    merged = update_confusion(ConfusionMatrix(3), p1, t1).merge(update_confusion(ConfusionMatrix(3), p2, t2))
    assert np.array_equal(whole.counts, merged.counts)


def test_ece_perfect_degenerate():
    assert ece([1.0, 1.0, 1.0], [True, True, True]) == 0.0


def test_ece_hand_binned():
    value = ece([0.95, 0.95, 0.65, 0.55], [True, False, True, True], num_bins=10)
    expected = 0.5 * abs(0.5 - 0.95) + 0.25 * abs(1 - 0.65) + 0.25 * abs(1 - 0.55)
    assert expected == pytest.approx(0.425, abs=1e-15)
    assert value == pytest.approx(0.425, abs=1e-9)


def test_ece_single_bin_matched():
    assert ece([0.72, 0.78], [True, True], 10) == pytest.approx(0.25, abs=1e-12)
    assert ece([0.75, 0.75, 0.75, 0.75], [True, True, True, False]) == pytest.approx(0.0, abs=1e-12)


def test_ece_empty():
    with pytest.raises(UndefinedMetricError):
        ece([], [])


def test_calibration_right_closed_last_bin():
    bins = CalibrationBins(10)
    assert bins.bin_index(np.array([0.0, 0.05, 0.1, 0.999, 1.0])).tolist() == [0, 0, 1, 9, 9]


@settings(max_examples=40, deadline=None)
@given(
    hnp.arrays(np.float64, 30, elements=st.floats(0, 1)),
    hnp.arrays(np.bool_, 30),
    st.integers(0, 2**16),
)
def test_ece_bounds_and_order_invariance(conf, correct, seed):
    value = ece(conf, correct)
    assert 0.0 <= value <= 1.0
    perm = np.random.default_rng(seed).permutation(30)
    assert ece(conf[perm], correct[perm]) == pytest.approx(value, abs=1e-12)


def test_calibration_merge():
    g = np.random.default_rng(0)
    conf, corr = g.random(40), g.random(40) < 0.6
    whole = CalibrationBins().update(conf, corr)
    merged = CalibrationBins().update(conf[:13], corr[:13]).merge(CalibrationBins().update(conf[13:], corr[13:]))
    assert np.array_equal(whole.counts, merged.counts)
    assert np.array_equal(whole.correct_sum, merged.correct_sum)
    assert whole.ece() == pytest.approx(merged.ece(), abs=1e-12)


def test_munc_zero():
    assert munc(np.zeros((2, 3)), np.array([[0, 1, 1], [2, 0, 1]]), 3) == 0.0


def test_munc_hand_grouped():
    sigma = np.array([0.1, 0.3, 0.2])
    pred = np.array([0, 0, 1])
    assert munc(sigma, pred, 2) == pytest.approx(0.2, abs=1e-12)


def test_munc_absent_class_excluded():
    assert munc(np.array([0.4, 0.2]), np.array([0, 0]), 5) == pytest.approx(0.3)


def test_munc_empty():
    with pytest.raises(UndefinedMetricError):
        munc(np.array([0.1]), np.array([0]), 2, valid=np.array([False]))


@given(st.floats(0.01, 100), st.integers(0, 2**16))
def test_munc_linear(k, seed):
    g = np.random.default_rng(seed)
    sigma, pred = g.random(25), g.integers(0, 4, 25)
    assert munc(sigma * k, pred, 4) == pytest.approx(k * munc(sigma, pred, 4), rel=1e-12)


def test_binary_accuracy_map_cases():
    truth = np.array([[0, 1], [2, 1]])
    assert not binary_accuracy_map(truth, truth).any()
    assert binary_accuracy_map(truth, np.full((2, 2), 255)).all()
    g = np.random.default_rng(1)
    pred, tr = g.integers(0, 3, (5, 5)), g.integers(0, 3, (5, 5))
    tr[0, :] = 255
    amap = binary_accuracy_map(pred, tr)
    for i in range(5):
        for j in range(5):
            assert amap[i, j] == (tr[i, j] == 255 or pred[i, j] != tr[i, j])


def test_report_csv():
    rep = MetricsReport([0.5, None], 0.5, 0.1, 0.2, 0.9)
    assert rep.csv_header().split(",")[:4] == ["miou", "ece", "munc", "pixel_accuracy"]
    cells = rep.csv_row().split(",")
    assert cells[0] == "0.5" and cells[-1] == ""

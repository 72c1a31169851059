import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from semiseg.metrics import (
    ConfusionMatrix,
    MetricsError,
    MetricsReport,
    mean_accuracy,
    mean_iu,
    naive_confusion,
    naive_metrics,
    per_class_accuracy,
    per_class_iu,
    pixel_accuracy,
)
from semiseg.verify import metrics_suite


def cm_from(counts):
    cm = ConfusionMatrix(len(counts))
    cm.counts[:] = counts
    return cm


def test_hand_case():
    cm = cm_from([[3, 1], [2, 4]])
    assert pixel_accuracy(cm) == pytest.approx(0.7, abs=1e-12)
    assert mean_accuracy(cm) == pytest.approx(0.70833, abs=5e-6)
    assert mean_iu(cm) == pytest.approx(0.53571, abs=5e-6)
    assert mean_accuracy(cm) == (3 / 4 + 4 / 6) / 2
    assert mean_iu(cm) == (3 / 6 + 4 / 7) / 2


def test_identity_predictions():
    truth = np.random.default_rng(0).integers(0, 4, size=(16, 16))
    cm = ConfusionMatrix(4).accumulate(truth, truth)
    assert np.count_nonzero(cm.counts - np.diag(np.diag(cm.counts))) == 0
    assert pixel_accuracy(cm) == mean_accuracy(cm) == mean_iu(cm) == 1.0


def test_all_ignored_is_zero_matrix():
    truth = np.full((4, 4), 255)
    cm = ConfusionMatrix(3).accumulate(truth, np.zeros((4, 4), int), ignore_index=255)
    assert cm.total == 0 and not cm.counts.any()
    with pytest.raises(MetricsError):
        pixel_accuracy(cm)


def test_ignored_pixels_skipped():
    truth = np.array([[0, 1], [255, 1]])
    pred = np.array([[0, 0], [3, 1]])
    cm = ConfusionMatrix(4).accumulate(truth, pred, ignore_index=255)
    assert cm.total == 3
    assert cm.counts.tolist() == naive_confusion(truth, pred, 4, ignore_index=255)


def test_out_of_range_names_pixel():
    truth = np.zeros((3, 3), int)
    pred = np.zeros((3, 3), int)
    pred[1, 2] = 7
    with pytest.raises(MetricsError, match=r"\(1, 2\)"):
        ConfusionMatrix(4).accumulate(truth, pred)


def test_shape_mismatch():
    with pytest.raises(MetricsError):
        ConfusionMatrix(2).accumulate(np.zeros((2, 2), int), np.zeros((2, 3), int))


def test_absent_class_excluded():
    # class 2 never appears in truth or prediction
    truth = np.array([0, 0, 1, 1])
    pred = np.array([0, 1, 1, 1])
    cm = ConfusionMatrix(3).accumulate(truth, pred)
    assert np.isnan(per_class_iu(cm)[2]) and np.isnan(per_class_accuracy(cm)[2])
    assert mean_iu(cm) == pytest.approx((1 / 2 + 2 / 3) / 2)
    assert mean_accuracy(cm) == pytest.approx((1 / 2 + 1) / 2)


def test_random_pairs_match_naive_oracle():
    rng = np.random.default_rng(42)
    for _ in range(100):
        truth = rng.integers(0, 4, size=(16, 16))
        pred = rng.integers(0, 4, size=(16, 16))
        cm = ConfusionMatrix(4).accumulate(truth, pred)
        assert cm.counts.tolist() == naive_confusion(truth, pred, 4)
        got = (pixel_accuracy(cm), mean_accuracy(cm), mean_iu(cm))
        for a, b in zip(got, naive_metrics(truth, pred, 4)):
            assert abs(a - b) <= 1e-12


labels = hnp.arrays(np.int64, (8, 8), elements=st.integers(0, 3))


@settings(max_examples=60)
@given(labels, labels)
def test_merge_is_order_independent(a, b):
    one = ConfusionMatrix(4).accumulate(a, b).accumulate(b, a)
    two = ConfusionMatrix(4).accumulate(b, a).merge(ConfusionMatrix(4).accumulate(a, b))
    assert np.array_equal(one.counts, two.counts)
    assert one.total == 128


@settings(max_examples=60)
@given(labels, labels, st.permutations(range(4)))
def test_class_permutation_invariance(truth, pred, perm):
    perm = np.array(perm)
    a = ConfusionMatrix(4).accumulate(truth, pred)
    b = ConfusionMatrix(4).accumulate(perm[truth], perm[pred])
    assert pixel_accuracy(a) == pixel_accuracy(b)
    assert mean_accuracy(a) == pytest.approx(mean_accuracy(b), abs=1e-15)
    assert mean_iu(a) == pytest.approx(mean_iu(b), abs=1e-15)


@settings(max_examples=60)
@given(labels, labels)
def test_iu_bounded_by_accuracy(truth, pred):
    cm = ConfusionMatrix(4).accumulate(truth, pred)
    iu, acc = per_class_iu(cm), per_class_accuracy(cm)
    present = ~np.isnan(acc)
    assert np.all(iu[present] <= acc[present] + 1e-15)
    for v in (pixel_accuracy(cm), mean_accuracy(cm), mean_iu(cm)):
        assert 0 <= v <= 1


def test_report_roundtrip_and_consistency():
    cm = cm_from([[5, 1, 0], [0, 3, 2], [1, 0, 4]])
    r = MetricsReport.from_confusion(cm, step=9)
    again = MetricsReport.from_dict(json.loads(r.to_line()))
    assert again == r
    assert np.mean(r.per_class_iu) == pytest.approx(r.mean_iu)


def test_metrics_suite_all_pass():
    assert all(r.passed for r in metrics_suite())

import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from psdebnn.errors import ContractError
from psdebnn.metrics import (
    PredictionSet,
    accuracy,
    ece,
    entropy_histogram,
    predictive_entropy,
    reliability_bins,
    roc_auc,
    write_histogram_csv,
    write_metrics_csv,
)


def prob_sets(n_max=30, classes=3):
    logits = arrays(np.float64, st.tuples(st.integers(1, n_max), st.just(classes)), elements=st.floats(-5, 5))
    return logits.map(lambda z: np.exp(z - z.max(axis=1, keepdims=True)) /
                      np.exp(z - z.max(axis=1, keepdims=True)).sum(axis=1, keepdims=True))


def test_accuracy_examples():
    assert accuracy(PredictionSet(np.eye(3), [0, 1, 2])) == 1.0
    p = np.array([[0.9, 0.1], [0.9, 0.1], [0.2, 0.8], [0.2, 0.8]])
    assert accuracy(PredictionSet(p, [0, 1, 1, 0])) == 0.5
    assert accuracy(PredictionSet(np.full((4, 3), 1 / 3), [0, 0, 0, 0])) == 1.0


def test_accuracy_needs_labels_and_examples():
    with pytest.raises(ContractError):
        accuracy(PredictionSet(np.eye(2)))
    with pytest.raises(ContractError):
        accuracy(PredictionSet(np.zeros((0, 2)), np.zeros(0)))


def test_prediction_set_validation():
    with pytest.raises(ContractError):
        PredictionSet(np.array([[0.5, 0.6]]))
    with pytest.raises(ContractError):
        PredictionSet(np.array([[1.2, -0.2]]))
    with pytest.raises(ContractError):
        PredictionSet(np.eye(2), source="test")


def test_ece_confident_but_90_percent_right():
    p = np.tile([1.0, 0.0], (10, 1))
    labels = np.array([0] * 9 + [1])
    assert abs(ece(PredictionSet(p, labels)) - 0.1) < 1e-12


def test_ece_sixty_percent_at_confidence_point_six():
    p = np.tile([0.6, 0.4], (10, 1))
    labels = np.array([0] * 6 + [1] * 4)
    assert abs(ece(PredictionSet(p, labels))) < 1e-12


def test_ece_perfectly_calibrated_bins():
    # bin (0.6, 0.667]: conf 0.65, 65 of 100 right; bin (0.933, 1]: conf 1.0, all right
    p = np.vstack([np.tile([0.65, 0.35], (100, 1)), np.tile([1.0, 0.0], (20, 1))])
    labels = np.array([0] * 65 + [1] * 35 + [0] * 20)
    assert abs(ece(PredictionSet(p, labels), 15)) < 1e-12


def test_reliability_bins_are_right_closed():
    p = np.array([[0.6, 0.4], [0.4, 0.6]])
    counts, _, _ = reliability_bins(PredictionSet(p, [0, 1]), num_bins=5)
    np.testing.assert_array_equal(counts, [0, 0, 2, 0, 0])  # 0.6 closes (0.4, 0.6]
    with pytest.raises(ContractError):
        reliability_bins(PredictionSet(p, [0, 1]), num_bins=0)


@settings(max_examples=100, deadline=None)
@given(p=prob_sets(), seed=st.integers(0, 2**31))
def test_ece_properties(p, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, size=len(p))
    preds = PredictionSet(p, labels)
    value = ece(preds)
    assert 0.0 <= value <= 1.0
    perm = rng.permutation(len(p))
    assert ece(PredictionSet(p[perm], labels[perm])) == pytest.approx(value, abs=1e-12)
    single = abs(accuracy(preds) - p.max(axis=1).mean())
    assert ece(preds, num_bins=1) == pytest.approx(single, abs=1e-12)


def test_entropy_examples():
    assert predictive_entropy([0.0, 1.0, 0.0]) == 0.0
    assert abs(predictive_entropy(np.full(10, 0.1)) - math.log(10)) < 1e-12
    assert abs(predictive_entropy([0.5, 0.5, 0.0, 0.0]) - math.log(2)) < 1e-12
    np.testing.assert_allclose(predictive_entropy(np.array([[1.0, 0.0], [0.5, 0.5]])), [0.0, math.log(2)])


@settings(max_examples=100, deadline=None)
@given(p=prob_sets(classes=4), seed=st.integers(0, 2**31))
def test_entropy_bounds_and_class_symmetry(p, seed):
    h = predictive_entropy(p)
    assert np.all(h >= -1e-15) and np.all(h <= math.log(4) + 1e-12)
    perm = np.random.default_rng(seed).permutation(4)
    np.testing.assert_allclose(predictive_entropy(p[:, perm]), h, rtol=1e-12, atol=1e-15)


def test_auc_examples():
    assert roc_auc([0.1, 0.2], [0.5, 0.9]).auc == 1.0
    assert roc_auc([0.1, 0.4, 0.4], [0.4, 0.1, 0.4]).auc == 0.5
    assert abs(roc_auc([0.1, 0.4], [0.3, 0.9]).auc - 0.75) < 1e-12


def test_auc_matches_brute_force_with_ties():
    rng = np.random.default_rng(0)
    a = rng.integers(0, 5, size=40).astype(float)
    b = rng.integers(0, 5, size=30).astype(float)
    brute = np.mean([(y > x) + 0.5 * (y == x) for x in a for y in b])
    assert abs(roc_auc(a, b).auc - brute) < 1e-12


@settings(max_examples=100, deadline=None)
@given(xs=st.lists(st.floats(-10, 10), min_size=2, max_size=20, unique=True), data=st.data())
def test_auc_swap_symmetry(xs, data):
    k = data.draw(st.integers(1, len(xs) - 1))
    a, b = xs[:k], xs[k:]
    assert roc_auc(a, b).auc + roc_auc(b, a).auc == pytest.approx(1.0, abs=1e-12)


def test_roc_curve_endpoints():
    roc = roc_auc([0.1, 0.4, 0.2], [0.3, 0.9])
    assert roc.fpr[0] == 0 and roc.tpr[0] == 0 and roc.fpr[-1] == 1 and roc.tpr[-1] == 1
    assert np.all(np.diff(roc.fpr) >= 0) and np.all(np.diff(roc.tpr) >= 0)
    assert np.trapezoid(roc.tpr, roc.fpr) == pytest.approx(roc.auc)
    with pytest.raises(ContractError):
        roc_auc([], [1.0])


def test_csv_exports(tmp_path):
    path = tmp_path / "m.csv"
    write_metrics_csv(path, [("accuracy", 0.5, "test"), ("ece", 0.1, "test")])
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["metric", "value", "split"] and rows[1] == ["accuracy", "0.5", "test"]
    hist = entropy_histogram([0.1, 0.2, 0.6], np.linspace(0, 0.7, 8), "ID")
    assert sum(r[2] for r in hist) == 3
    path = tmp_path / "h.csv"
    write_histogram_csv(path, hist)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["bin_left", "bin_right", "count", "source"] and len(rows) == 8

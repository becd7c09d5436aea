import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hyperfusion.metrics import (
    MetricError,
    auc_binary,
    auc_macro,
    balanced_accuracy,
    classification_report,
    confusion_matrix,
    f1_macro,
    mae,
    mann_whitney_u,
    per_class_recall,
    precision_macro,
)

CM = np.array([[8, 2, 0], [1, 6, 3], [0, 2, 8]])


def test_hand_worked_confusion_matrix():
    assert round(balanced_accuracy(CM), 4) == 0.7333
    assert balanced_accuracy(CM) == pytest.approx((0.8 + 0.6 + 0.8) / 3, abs=1e-15)
    # (8/9 + 6/10 + 8/11) / 3 = 0.73872 by direct evaluation
    assert round(precision_macro(CM), 4) == 0.7387
    assert precision_macro(CM) == pytest.approx((8 / 9 + 6 / 10 + 8 / 11) / 3, abs=1e-15)


def test_f1_matches_per_class_hand_values():
    f1s = []
    for c in range(3):
        tp = CM[c, c]
        p = tp / CM[:, c].sum()
        r = tp / CM[c].sum()
        f1s.append(2 * p * r / (p + r))
    assert f1_macro(CM) == pytest.approx(np.mean(f1s), abs=1e-12)


def test_perfect_diagonal():
    cm = np.diag([3, 4, 5])
    assert balanced_accuracy(cm) == 1.0
    assert precision_macro(cm) == 1.0
    assert f1_macro(cm) == 1.0


def test_empty_true_class_is_named():
    with pytest.raises(MetricError, match="class 1"):
        per_class_recall(np.array([[2, 0, 1], [0, 0, 0], [0, 1, 3]]))


def test_single_predicted_class_precision_warns():
    cm = np.array([[10, 0, 0], [10, 0, 0], [10, 0, 0]])
    with pytest.warns(UserWarning, match="never predicted"):
        assert precision_macro(cm) == pytest.approx((1 / 3) / 3)


def test_confusion_matrix_layout():
    cm = confusion_matrix([0, 0, 1, 2], [0, 1, 1, 0], 3)
    np.testing.assert_array_equal(cm, [[1, 1, 0], [0, 1, 0], [1, 0, 0]])
    assert cm.sum() == 4


def test_uniform_random_predictions_give_chance_ba():
    rng = np.random.default_rng(0)
    y = np.repeat(np.arange(3), 20_000)
    cm = confusion_matrix(y, rng.integers(0, 3, y.size), 3)
    assert balanced_accuracy(cm) == pytest.approx(1 / 3, abs=0.01)


def _auc_pairs(scores, positive):
    pos, neg = scores[positive], scores[~positive]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (len(pos) * len(neg))


def test_auc_matches_pair_counting_oracle():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n = int(rng.integers(5, 60))
        scores = np.round(rng.random(n), 1)  # rounding forces ties
        positive = rng.random(n) < 0.4
        if positive.all() or not positive.any():
            continue
        assert auc_binary(scores, positive) == pytest.approx(_auc_pairs(scores, positive), abs=1e-12)


def test_auc_perfect_and_random():
    y = np.array([0, 0, 1, 1])
    assert auc_binary(np.array([0.1, 0.2, 0.8, 0.9]), y == 1) == 1.0
    rng = np.random.default_rng(2)
    y = rng.random(40_000) < 0.5
    assert auc_binary(rng.random(40_000), y) == pytest.approx(0.5, abs=0.01)


def test_auc_single_class_undefined():
    with pytest.raises(MetricError):
        auc_macro(np.full((3, 2), 0.5), np.zeros(3, dtype=int))


def test_auc_macro_one_vs_rest():
    rng = np.random.default_rng(3)
    P = rng.dirichlet(np.ones(3), size=90)
    y = np.repeat(np.arange(3), 30)
    expect = np.mean([_auc_pairs(P[:, c], y == c) for c in range(3)])
    assert auc_macro(P, y) == pytest.approx(expect, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_auc_invariant_under_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    s = rng.standard_normal(30)
    y = np.arange(30) % 2 == 0
    assert auc_binary(np.exp(3 * s) + 1, y) == pytest.approx(auc_binary(s, y), abs=1e-12)


def test_mae_examples_and_oracle():
    assert mae([0, 2], [1, 0]) == 1.5
    assert mae([1.0, 2.0], [1.0, 2.0]) == 0.0
    rng = np.random.default_rng(4)
    y, yh = rng.standard_normal(100), rng.standard_normal(100)
    total = 0.0
    for a, b in zip(y, yh):
        total += abs(a - b)
    assert mae(y, yh) == pytest.approx(total / 100, abs=1e-12)
    assert mae(y, yh) == mae(yh, y)
    with pytest.raises(MetricError):
        mae([], [])
    with pytest.raises(MetricError):
        mae([1.0], [1.0, 2.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_ba_and_prc_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    cm = rng.integers(1, 20, size=(4, 4))
    perm = rng.permutation(4)
    pcm = cm[np.ix_(perm, perm)]
    assert balanced_accuracy(pcm) == pytest.approx(balanced_accuracy(cm), abs=1e-12)
    assert precision_macro(pcm) == pytest.approx(precision_macro(cm), abs=1e-12)


def test_mann_whitney_identical_samples():
    assert mann_whitney_u([1, 2, 3], [3, 2, 1]) == 1.0
    assert mann_whitney_u([5, 5, 5], [5, 5]) == 1.0


def test_mann_whitney_separated_samples():
    assert mann_whitney_u(np.arange(1, 21), np.arange(100, 121)) < 0.001


def test_mann_whitney_three_vs_three_exact_oracle():
    a, b = np.array([1.0, 2.0, 3.0]), np.array([4.0, 5.0, 6.0])
    pooled = np.concatenate([a, b])
    observed = a.sum()
    sums = [pooled[list(c)].sum() for c in itertools.combinations(range(6), 3)]
    mid = np.mean(sums)
    exact = np.mean([abs(s - mid) >= abs(observed - mid) for s in sums])
    assert exact == pytest.approx(0.1)
    assert abs(mann_whitney_u(a, b) - exact) < 0.02


def test_mann_whitney_empty():
    with pytest.raises(MetricError):
        mann_whitney_u([], [1.0])


def test_classification_report_fields():
    y = np.array([0, 0, 1, 1, 2, 2])
    P = np.eye(3)[[0, 0, 1, 2, 2, 2]] * 0.9 + 0.1 / 3
    rep = classification_report(y, P, 3)
    assert rep["n"] == 6 and rep["ba"] == pytest.approx(5 / 6)
    assert rep["tp_rates"] == [1.0, 0.5, 1.0]
    assert rep["confusion"] == [[2, 0, 0], [0, 1, 1], [0, 0, 2]]
    assert rep["confusion_normalized"][1] == [0.0, 0.5, 0.5]
    for key in ("ba", "prc", "f1_macro", "auc_macro"):
        assert 0.0 <= rep[key] <= 1.0


def test_report_on_subgroup_without_a_class():
    y = np.array([0, 0, 2])
    P = np.eye(3)[[0, 1, 2]]
    rep = classification_report(y, P, 3)
    assert rep["absent_classes"] == [1]
    assert rep["tp_rates"][1] is None
    assert rep["ba"] == pytest.approx(0.75)


def test_metrics_are_pure():
    y = np.array([0, 1, 2, 1])
    P = np.random.default_rng(5).dirichlet(np.ones(3), size=4)
    assert classification_report(y, P) == classification_report(y, P)

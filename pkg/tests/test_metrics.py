import math
import random

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from magekt.metrics import EvalResult, acc, auc, evaluate

from conftest import pairwise_auc


def test_worked_example_is_exact():
    assert auc([1, 0, 1, 0], [0.8, 0.8, 0.3, 0.1]) == 0.625


def test_separated_scores():
    assert auc([0, 0, 1, 1], [0.1, 0.2, 0.7, 0.9]) == 1.0


def test_single_class_rejected():
    with pytest.raises(ValueError):
        auc([1, 1], [0.2, 0.3])


def test_length_mismatch_rejected():
    with pytest.raises(ValueError):
        auc([1, 0], [0.2])


def test_random_scores_near_half():
    rng = np.random.default_rng(0)
    n_pos = n_neg = 5000
    y = np.r_[np.ones(n_pos), np.zeros(n_neg)]
    s = rng.random(n_pos + n_neg)
    sd = math.sqrt((n_pos + n_neg + 1) / (12 * n_pos * n_neg))
    assert abs(auc(y, s) - 0.5) <= 3 * sd


labelled = st.lists(st.tuples(st.integers(0, 1), st.integers(0, 8).map(lambda v: v / 8)), min_size=2, max_size=60)


@given(labelled)
def test_rank_auc_equals_pairwise_oracle(rows):
    y, s = zip(*rows)
    assume(0 < sum(y) < len(y))
    assert auc(y, s) == pytest.approx(pairwise_auc(y, s), abs=1e-12)


@given(labelled)
def test_monotone_transform_invariance(rows):
    y, s = zip(*rows)
    assume(0 < sum(y) < len(y))
    assert auc(y, s) == auc(y, [math.exp(3 * v) - 7 for v in s])


@given(st.lists(st.tuples(st.integers(0, 1), st.floats(0, 1)), min_size=2, max_size=40, unique_by=lambda r: r[1]))
def test_flipped_labels_complement(rows):
    y, s = zip(*rows)
    assume(0 < sum(y) < len(y))
    assert auc(y, s) + auc([1 - v for v in y], s) == pytest.approx(1.0, abs=1e-12)


def test_accuracy_examples():
    assert acc([1, 0, 1], [0.9, 0.1, 0.6]) == 1.0
    assert acc([1, 0, 1, 0], [0.9, 0.1, 0.2, 0.7]) == 0.5
    labels = [1, 1, 0, 0, 1, 0]
    scores = [0.5, 0.49, 0.5, 0.1, 0.99, 0.51]
    manual = sum((s >= 0.5) == bool(y) for y, s in zip(labels, scores)) / 6
    assert acc(labels, scores) == manual == 0.5
    with pytest.raises(ValueError):
        acc([], [])


def test_evaluate_bundle():
    r = evaluate([1, 0, 1, 0], [0.8, 0.8, 0.3, 0.1])
    assert (r.auc, r.acc, r.n, r.threshold) == (0.625, 0.5, 4, 0.5)
    with pytest.raises(ValueError):
        EvalResult(0.5, 0.5, 0)

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mggnet.metrics import MetricCounters, accumulate, evaluate, finalize


def test_accumulate_true_positive():
    c = accumulate(MetricCounters.zeros(1), [0.7], [1])
    assert (c.T, c.correct[0], c.P_correct[0], c.P[0], c.I[0]) == (1, 1, 1, 1, 0)


def test_tie_counts_as_positive():
    c = accumulate(MetricCounters.zeros(1), [0.5], [0])
    assert (c.I[0], c.I_correct[0], c.correct[0], c.P[0]) == (1, 0, 0, 0)


def test_perfect_predictor():
    labels = np.array([[1, 0], [0, 1], [1, 1], [0, 0]])
    r = evaluate(labels.astype(float), labels)
    assert r.mean_prediction == 1.0 and r.mean_balanced == 1.0


def test_constant_positive_on_30_70():
    labels = np.array([1] * 30 + [0] * 70)[:, None]
    r = evaluate(np.ones((100, 1)), labels)
    assert r.pred_acc[0] == 0.30 and r.bal_acc[0] == 0.50
    assert r.mean_prediction == 0.30 and r.mean_balanced == 0.50


def test_mean_of_two_attributes():
    c = MetricCounters(100, np.array([50, 50]), np.array([46, 40]), np.array([50, 50]), np.array([46, 48]))
    assert finalize(c).mean_prediction == pytest.approx(0.90, abs=1e-15)


def test_single_class_attribute_is_excluded():
    labels = np.array([[1, 1], [1, 0], [1, 1]])
    probs = np.array([[0.9, 0.9], [0.9, 0.1], [0.2, 0.8]])
    with pytest.warns(UserWarning, match=r"\[1\]"):
        r = evaluate(probs, labels)
    assert np.isnan(r.bal_acc[0]) and r.mean_balanced == r.bal_acc[1]
    rows = r.to_csv().splitlines()
    assert rows[0] == "index,name,pred_acc,bal_acc"
    assert rows[1].endswith(",") and rows[-1].startswith("MEAN,")


def test_threshold_range():
    with pytest.raises(ValueError):
        accumulate(MetricCounters.zeros(1), [0.5], [1], threshold=1.0)
    with pytest.raises(ValueError):
        finalize(MetricCounters.zeros(2))


def batches(draw_seed, n, N):
    rng = np.random.default_rng(draw_seed)
    return rng.uniform(size=(n, N)), rng.integers(0, 2, size=(n, N))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 40), st.integers(1, 5))
def test_counter_invariants(seed, n, N):
    probs, labels = batches(seed, n, N)
    c = accumulate(MetricCounters.zeros(N), probs, labels)
    assert (c.P + c.I == c.T).all()
    assert ((0 <= c.P_correct) & (c.P_correct <= c.P)).all()
    assert ((0 <= c.I_correct) & (c.I_correct <= c.I)).all()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        r = finalize(c)
    np.testing.assert_array_equal(r.pred_acc, (c.P_correct + c.I_correct) / c.T)
    assert ((0 <= r.pred_acc) & (r.pred_acc <= 1)).all()


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 30), st.integers(1, 4))
def test_constant_predictor_balanced_is_half(seed, n, N):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=(n, N))
    labels[0], labels[1] = 1, 0  # both classes present
    for p in (0.1, 0.9):
        r = evaluate(np.full((n, N), p), labels)
        np.testing.assert_array_equal(r.bal_acc, 0.5)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 30), st.integers(2, 5))
def test_means_permutation_invariant(seed, n, N):
    probs, labels = batches(seed, n, N)
    labels[0], labels[1] = 1, 0
    perm = np.random.default_rng(seed + 1).permutation(N)
    a, b = evaluate(probs, labels), evaluate(probs[:, perm], labels[:, perm])
    assert a.mean_prediction == pytest.approx(b.mean_prediction, abs=1e-15)
    assert a.mean_balanced == pytest.approx(b.mean_balanced, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 60), st.lists(st.integers(0, 60), max_size=5))
def test_merge_over_shards_equals_whole(seed, n, cuts):
    probs, labels = batches(seed, n, 3)
    whole = accumulate(MetricCounters.zeros(3), probs, labels)
    edges = sorted({0, n, *[min(c, n) for c in cuts]})
    shards = [accumulate(MetricCounters.zeros(3), probs[a:b], labels[a:b]) for a, b in zip(edges, edges[1:]) if b > a]
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(shards))
    merged = MetricCounters.zeros(3)
    for k in order:
        merged = merged.merge(shards[k])
    assert merged == whole
    if len(shards) >= 3:
        x, y, z = shards[:3]
        assert x.merge(y).merge(z) == x.merge(y.merge(z))
        assert x.merge(y) == y.merge(x)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fd_check, leaf
from mggnet import functional as F
from mggnet.gradcheck import tiny_config
from mggnet.heads import (
    PredictionSet,
    attribute_order,
    bce,
    expected_term_count,
    fuse_predictions,
    predict_head,
    total_loss,
    weighted_bce,
)
from mggnet.groups import GroupAssignment, AttributeCatalog
from mggnet.model import MGGNet
from mggnet.tensor import DimensionError, Tape, Tensor, backward

LN2 = math.log(2.0)


def constant_predictions(S, N, blocks, p=0.5):
    y = lambda: Tensor(np.full((S, N), p))  # noqa: E731
    return PredictionSet(y(), y(), {b: y() for b in blocks}, {b: y() for b in blocks})


# -- heads --------------------------------------------------------------------------


def test_predict_head_values():
    f = Tensor(np.ones((2, 3)))
    np.testing.assert_array_equal(predict_head(f, Tensor(np.zeros(3)), Tensor(0.0)).data, 0.5)
    assert (predict_head(f, Tensor(np.zeros(3)), Tensor(20.0)).data > 0.999).all()
    with pytest.raises(DimensionError):
        predict_head(f, Tensor(np.zeros(4)), Tensor(0.0))


def test_predict_head_gradients(rng):
    f, w, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=4)), leaf(0.3)
    assert fd_check(lambda f, w, b: F.sum(F.log(predict_head(f, w, b))), [f, w, b]) <= 1e-5


def test_fusion_examples():
    assert fuse_predictions(Tensor([0.9]), [Tensor([0.6]), Tensor([0.6])]).data[0] == pytest.approx(0.7, abs=1e-15)
    np.testing.assert_allclose(fuse_predictions(Tensor([0.3]), [Tensor([0.3])] * 3).data, 0.3, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=5))
def test_fusion_stays_in_unit_interval(ps):
    y = fuse_predictions(Tensor([ps[0]]), [Tensor([p]) for p in ps[1:]]).data[0]
    assert min(ps) - 1e-15 <= y <= max(ps) + 1e-15


def test_attribute_order_permutes_group_columns():
    ga = GroupAssignment.from_groups([("a", [3, 1]), ("b", [2, 4])], AttributeCatalog.generic(4))
    order = attribute_order(ga)
    group_cols = np.array([3, 1, 2, 4])  # attribute held by each concatenated column
    assert group_cols[order].tolist() == [1, 2, 3, 4]


# -- losses -----------------------------------------------------------------------------


def test_bce_examples():
    assert bce(Tensor([0.5, 0.5]), [0, 1]).data == pytest.approx([LN2, LN2], abs=1e-15)
    assert bce(Tensor([1.0, 0.0]), [1, 0]).data.max() < 1e-11
    assert bce(Tensor([0.8]), [1]).data[0] == pytest.approx(-math.log(0.8), abs=1e-15)


def test_weighted_bce_examples():
    v = weighted_bce(Tensor([0.8]), [1], 4, 1).data[0]
    assert v == pytest.approx(0.75 * -math.log(0.8), abs=1e-15)
    assert abs(v - 0.167358) < 1e-6
    for t in (0, 1):
        half = weighted_bce(Tensor([0.3]), [t], 4, 2).data[0]
        assert half == 0.5 * bce(Tensor([0.3]), [t]).data[0]
    assert weighted_bce(Tensor([0.3]), [1], 4, 4).data[0] == 0.0
    assert weighted_bce(Tensor([0.3]), [0], 4, 0).data[0] == 0.0


def test_weighted_bce_bad_counts():
    with pytest.raises(ValueError):
        weighted_bce(Tensor([0.5]), [1], 4, 5)


@pytest.mark.parametrize("N,B,count", [(40, 2, 240), (6, 2, 36), (12, 3, 96)])
def test_term_count(N, B, count):
    blocks = list(range(3, 3 + B))
    labels = np.random.default_rng(0).integers(0, 2, size=(4, N))
    total, rep = total_loss(constant_predictions(4, N, blocks), labels, blocks)
    assert len(rep) == count == expected_term_count(N, B)
    assert float(total.data) == pytest.approx(count * LN2, abs=1e-9)
    assert abs(rep.total - sum(v for _, v in rep.terms)) <= 1e-9


def test_term_labels_and_order():
    labels = np.array([[1, 0], [0, 1]])
    _, rep = total_loss(constant_predictions(2, 2, [3, 4]), labels, [3, 4], "balanced")
    got = [lab for lab, _ in rep.terms]
    sources = ["fused", "base", "gal_b3", "gal_b4", "gcl_b3", "gcl_b4"]
    assert got == [f"weighted_bce:{s}:a{a:02d}" for a in (1, 2) for s in sources]


def test_balanced_batch_halves_plain_total(rng):
    S, N = 6, 5
    labels = np.zeros((S, N), dtype=int)
    for a in range(N):
        labels[rng.permutation(S)[: S // 2], a] = 1
    y = lambda: Tensor(rng.uniform(0.05, 0.95, size=(S, N)))  # noqa: E731
    preds = PredictionSet(y(), y(), {3: y()}, {3: y()})
    plain, _ = total_loss(preds, labels, [3], "plain")
    bal, _ = total_loss(preds, labels, [3], "balanced")
    assert float(bal.data) == pytest.approx(0.5 * float(plain.data), rel=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["plain", "balanced"]))
def test_loss_nonnegative(seed, mode):
    rng = np.random.default_rng(seed)
    y = lambda: Tensor(rng.uniform(0, 1, size=(4, 3)))  # noqa: E731
    preds = PredictionSet(y(), y(), {3: y()}, {3: y()})
    _, rep = total_loss(preds, rng.integers(0, 2, size=(4, 3)), [3], mode)
    assert all(v >= 0.0 for _, v in rep.terms)


def test_missing_source():
    preds = constant_predictions(2, 2, [3])
    with pytest.raises(KeyError):
        total_loss(preds, np.ones((2, 2)), [3, 4])


def test_every_family_receives_gradient():
    cfg = tiny_config()
    model = MGGNet(cfg, seed=3)
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(4, *cfg.backbone.input_shape))
    y = rng.integers(0, 2, size=(4, cfg.N))
    with Tape():
        loss, _ = total_loss(model.forward(x).preds, y, cfg.blocks)
        backward(loss)
    for family, names in model.store.owners().items():
        norm = sum(float(np.abs(model.store[n].grad).sum()) for n in names)
        assert norm > 0, family
    for name in model.store.names("heads"):
        if name.endswith("weight"):
            assert np.abs(model.store[name].grad).sum() > 0, name

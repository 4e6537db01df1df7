import numpy as np
import pytest

from conftest import fd_check, leaf
from oracles import direct_conv
from mggnet import functional as F
from mggnet.functional import RunningStats
from mggnet.params import SGD, ParamStore, read_tensor, sgd_step, write_tensor
from mggnet.tensor import (
    DimensionError,
    EngineError,
    GraphError,
    NumericError,
    Tape,
    Tensor,
    backward,
    no_grad,
)


def sq(t):
    return t * t


def cube(t):
    return t * t * t


# -- conv2d -----------------------------------------------------------------


def test_conv_scalar_product():
    out = F.conv2d(Tensor([[[[2.0]]]]), Tensor([[[[3.0]]]]), Tensor([0.0]))
    assert out.data.tolist() == [[[[6.0]]]]


def test_conv_valid_sum_of_ones():
    out = F.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding="valid")
    assert out.shape == (1, 1, 1, 1) and out.data.item() == 9.0


def test_conv_same_matches_direct_summation(rng):
    x, w, b = rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(1, 2, 3, 3)), rng.normal(size=1)
    out = F.conv2d(Tensor(x), Tensor(w), Tensor(b), padding="same")
    assert out.shape == (1, 1, 4, 4)
    np.testing.assert_allclose(out.data, direct_conv(x, w, b, 1), rtol=0, atol=1e-12)


def test_conv_stride_two_subsamples_stride_one(rng):
    x, w = rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(4, 3, 3, 3))
    full = F.conv2d(Tensor(x), Tensor(w), padding="same").data
    strided = F.conv2d(Tensor(x), Tensor(w), padding="same", stride=2).data
    np.testing.assert_allclose(strided, full[:, :, ::2, ::2], atol=1e-12)


def test_conv_impulse_reproduces_kernel(rng):
    w = rng.normal(size=(1, 1, 3, 3))
    delta = np.zeros((1, 1, 5, 5))
    delta[0, 0, 2, 2] = 1.0
    out = F.conv2d(Tensor(delta), Tensor(w), padding="valid").data[0, 0]
    # correlation with an impulse gives the kernel flipped in both axes
    np.testing.assert_array_equal(out, w[0, 0, ::-1, ::-1])


def test_conv_shape_errors():
    with pytest.raises(DimensionError):
        F.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(DimensionError):
        F.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))), padding="same")


@pytest.mark.parametrize("padding,stride", [("same", 1), ("valid", 1), ("same", 2)])
def test_conv_gradients(rng, padding, stride):
    x, w, b = leaf(rng.normal(size=(2, 2, 4, 4))), leaf(rng.normal(size=(3, 2, 3, 3))), leaf(rng.normal(size=3))
    err = fd_check(lambda x, w, b: F.sum(sq(F.conv2d(x, w, b, padding, stride))), [x, w, b])
    assert err <= 1e-5


# -- batchnorm -------------------------------------------------------------


def test_batchnorm_constant_input_is_zero():
    out = F.batchnorm2d(Tensor(np.full((2, 3, 2, 2), 4.2)), Tensor(np.ones(3)), Tensor(np.zeros(3)), "train", RunningStats.fresh(3))
    np.testing.assert_array_equal(out.data, 0.0)


def test_batchnorm_gamma_zero_gives_beta(rng):
    out = F.batchnorm2d(Tensor(rng.normal(size=(2, 3, 4, 4))), Tensor(np.zeros(3)), Tensor(np.full(3, 5.0)), "train", RunningStats.fresh(3))
    np.testing.assert_array_equal(out.data, 5.0)


def test_batchnorm_moments(rng):
    # output variance is v / (v + eps); v >= 10 keeps it within 1e-6 of 1
    x = rng.normal(2.0, 5.0, size=(2, 3, 4, 4))
    y = F.batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), "train", RunningStats.fresh(3)).data
    m = x.shape[0] * x.shape[2] * x.shape[3]
    for c in range(3):
        vals = y[:, c].reshape(-1)
        mean = sum(vals) / m
        var = sum((v - mean) ** 2 for v in vals) / m
        assert abs(mean) <= 1e-9
        assert abs(var - 1.0) <= 1e-6
        v = x[:, c].var()
        assert var == pytest.approx(v / (v + 1e-5), abs=1e-12)


def test_batchnorm_running_stats_and_eval(rng):
    x = rng.normal(1.0, 2.0, size=(4, 2, 3, 3))
    rs = RunningStats.fresh(2)
    F.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), "train", rs)
    m = 4 * 9
    bm = x.mean(axis=(0, 2, 3))
    bv = x.var(axis=(0, 2, 3)) * m / (m - 1)
    np.testing.assert_allclose(rs.mean, 0.1 * bm, atol=1e-15)
    np.testing.assert_allclose(rs.var, 0.9 + 0.1 * bv, atol=1e-15)
    out = F.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), "eval", rs).data
    expect = (x - rs.mean[None, :, None, None]) / np.sqrt(rs.var[None, :, None, None] + 1e-5)
    np.testing.assert_allclose(out, expect, atol=1e-12)


def test_batchnorm_degenerate_batch():
    with pytest.raises(EngineError, match="degenerate"):
        F.batchnorm2d(Tensor(np.ones((1, 2, 1, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)), "train", RunningStats.fresh(2))


def test_batchnorm_gradients(rng):
    x, g, b = leaf(rng.normal(size=(2, 3, 3, 3))), leaf(rng.normal(size=3)), leaf(rng.normal(size=3))
    target = rng.normal(size=(2, 3, 3, 3))

    def build(x, g, b):
        y = F.batchnorm2d(x, g, b, "train", RunningStats.fresh(3))
        return F.sum(y * Tensor(target))

    assert fd_check(build, [x, g, b]) <= 1e-5


# -- activations, softmax, pooling, linear ----------------------------------


def test_relu_values():
    assert F.relu(Tensor(-1.5)).data == 0.0
    assert F.relu(Tensor(2.0)).data == 2.0


def test_sigmoid_value_and_slope():
    x = leaf(0.0)
    with Tape():
        y = F.sigmoid(x)
        backward(y)
    assert y.data == 0.5 and x.grad == 0.25


def test_sigmoid_extremes_are_finite():
    y = F.sigmoid(Tensor([-800.0, 800.0])).data
    assert y[0] == 0.0 and y[1] == 1.0


def test_sigmoid_gradient_17_points(rng):
    x = leaf(rng.normal(scale=3.0, size=17))
    assert fd_check(lambda x: F.sum(F.sigmoid(x)), [x]) <= 1e-6


def test_activation_dispatch():
    assert F.activation(Tensor(-1.0), "relu").data == 0.0
    assert F.activation(Tensor(0.0), "sigmoid").data == 0.5
    with pytest.raises(ValueError):
        F.activation(Tensor(0.0), "tanh")


def test_softmax_uniform():
    np.testing.assert_allclose(F.softmax_vec(np.zeros(7)).data, 1 / 7, atol=1e-15)


def test_softmax_no_overflow():
    p = F.softmax_vec([1000.0, 0.0]).data
    assert np.isfinite(p).all() and abs(p[0] - 1.0) < 1e-12 and p[1] >= 0.0


def test_softmax_jacobian(rng):
    z = rng.normal(size=5)
    for k in range(5):
        x = leaf(z)
        assert fd_check(lambda x: F.index(F.softmax_vec(x), k), [x]) <= 1e-5


def test_masked_softmax_excludes_masked_entries(rng):
    logits = rng.normal(size=(3, 4, 4))
    mask = ~np.eye(4, dtype=bool)
    p = F.softmax(Tensor(logits), axis=-1, mask=mask).data
    assert np.all(p[:, np.arange(4), np.arange(4)] == 0.0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


def test_global_avg_pool():
    np.testing.assert_array_equal(F.global_avg_pool(Tensor(np.full((2, 3, 4, 5), 1.5))).data, 1.5)
    assert F.global_avg_pool(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])).data.tolist() == [[2.5]]
    x = leaf(np.ones((1, 2, 3, 4)))
    with Tape():
        backward(F.sum(F.global_avg_pool(x)))
    np.testing.assert_array_equal(x.grad, 1 / 12)


def test_linear_examples(rng):
    v = rng.normal(size=3)
    np.testing.assert_array_equal(F.linear(Tensor(v), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, v)
    assert F.linear(Tensor([2.0, 3.0]), Tensor([[1.0, 1.0]]), Tensor([1.0])).data.tolist() == [6.0]
    with pytest.raises(DimensionError):
        F.linear(Tensor([1.0, 2.0]), Tensor(np.ones((2, 3))))


def test_linear_gradients(rng):
    x, w, b = leaf(rng.normal(size=(2, 3))), leaf(rng.normal(size=(4, 3))), leaf(rng.normal(size=4))
    assert fd_check(lambda x, w, b: F.sum(F.sigmoid(F.linear(x, w, b))), [x, w, b]) <= 1e-5


# -- every op at 10 random points --------------------------------------------

UNARY = {
    "exp": lambda x: F.exp(x),
    "log": lambda x: F.log(F.exp(x) + 1.0),
    "relu": lambda x: F.relu(x),
    "sigmoid": lambda x: F.sigmoid(x),
    "clip": lambda x: F.clip(x, -0.5, 0.5),
    "reshape": lambda x: F.reshape(x, (5, 2)) * F.reshape(x, (5, 2)),
    "transpose": lambda x: sq(F.transpose(F.reshape(x, (2, 5)), (1, 0))),
    "index": lambda x: cube(F.index(x, slice(2, 7))),
    "mean": lambda x: F.mean(x * x, axis=0, keepdims=True),
    "softmax": lambda x: F.softmax(x, axis=0) * Tensor(np.arange(10.0)),
    "div": lambda x: 1.0 / (x * x + 1.0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_op_gradients(name, rng):
    z = rng.normal(size=10)
    if name in ("relu", "clip"):
        # keep points away from the kinks
        z = np.where(np.abs(np.abs(z) - 0.5) < 0.05, z + 0.2, z)
        z = np.where(np.abs(z) < 0.05, 0.3, z)
    x = leaf(z)
    assert fd_check(lambda x: F.sum(UNARY[name](x)), [x]) <= 1e-5


def test_binary_and_structural_gradients(rng):
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4,)))
    assert fd_check(lambda a, b: F.sum((a + b) * (a - b) / (b * b + 1.0)), [a, b]) <= 1e-5
    assert fd_check(lambda a, b: F.sum(sq(F.concat([a, F.reshape(b, (1, 4))], axis=0))), [a, b]) <= 1e-5
    assert fd_check(lambda a, b: F.sum(cube(F.stack([a[0], b], axis=0))), [a, b]) <= 1e-5
    c = leaf(rng.normal(size=(4, 2)))
    assert fd_check(lambda a, c: F.sum(sq(F.matmul(a, c))), [a, c]) <= 1e-5
    assert fd_check(lambda a, c: F.sum(sq(F.einsum("ij,jk->ik", a, c))), [a, c]) <= 1e-5


# -- backward semantics --------------------------------------------------------


def test_backward_identity_and_product():
    x = leaf(5.0)
    with Tape():
        backward(x * 1.0)
    assert x.grad == 1.0
    x, y = leaf(2.0), leaf(3.0)
    with Tape():
        backward(x * y)
    assert x.grad == 3.0 and y.grad == 2.0


def test_backward_accumulates():
    x = leaf(2.0)
    with Tape():
        backward(x * x)
    with Tape():
        backward(x * x)
    assert x.grad == 8.0


def test_backward_errors():
    x = leaf([1.0, 2.0])
    with Tape():
        with pytest.raises(DimensionError):
            backward(x * 2.0)
    with Tape(), pytest.raises(GraphError):
        backward(Tensor(1.0) * 2.0)


def test_no_grad_records_nothing():
    x = leaf(1.0)
    with Tape() as tape, no_grad():
        y = x * 3.0
    assert len(tape) == 0 and not y.requires_grad


def test_non_finite_is_an_error():
    with pytest.raises(NumericError):
        Tensor([np.nan])
    with pytest.raises(NumericError):
        F.log(Tensor([0.0]))


def test_forward_backward_bit_identical(rng):
    x0, w0 = rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3))

    def run():
        x, w = leaf(x0), leaf(w0)
        with Tape():
            y = F.conv2d(x, w)
            y = F.batchnorm2d(y, Tensor(np.ones(3)), Tensor(np.zeros(3)), "train", RunningStats.fresh(3))
            loss = F.sum(F.sigmoid(y))
            backward(loss)
        return loss.data.copy(), x.grad.copy(), w.grad.copy()

    for a, b in zip(run(), run()):
        assert a.tobytes() == b.tobytes()


# -- optimizer and tensor files -------------------------------------------------


def test_sgd_plain_step():
    store = ParamStore(0)
    p = store.add("p", np.array([1.0]))
    p.grad = np.array([0.5])
    sgd_step(store, 0.1)
    assert p.data[0] == pytest.approx(0.95, abs=1e-15)
    assert p.grad is None
    p.grad = np.array([0.0])
    sgd_step(store, 0.1)
    assert p.data[0] == pytest.approx(0.95, abs=1e-15)


def test_sgd_momentum_recurrence():
    store = ParamStore(0)
    p = store.add("p", np.array([0.0]))
    opt = SGD(store, 0.1, momentum=0.9)
    steps = []
    for _ in range(2):
        before = p.data[0]
        p.grad = np.array([1.0])
        opt.step()
        steps.append(before - p.data[0])
    assert steps[0] == pytest.approx(0.1, abs=1e-15)
    assert steps[1] == pytest.approx(0.19, abs=1e-15)


def test_sgd_missing_grad_names_parameter():
    store = ParamStore(0)
    store.add("heads.x", np.zeros(2))
    with pytest.raises(EngineError, match="heads.x"):
        SGD(store, 0.1).step()


def test_tensor_file_round_trip(tmp_path, rng):
    for shape in [(), (3,), (2, 3, 4)]:
        arr = rng.normal(size=shape)
        write_tensor(tmp_path / "t.mggt", arr)
        raw = (tmp_path / "t.mggt").read_bytes()
        assert raw[:4] == b"MGGT"
        back = read_tensor(tmp_path / "t.mggt")
        assert back.shape == arr.shape and back.tobytes() == np.asarray(arr, "<f8").tobytes()


def test_param_store_seeded_and_unique():
    a, b = ParamStore(3), ParamStore(3)
    wa = a.fan_in_uniform("backbone.w", (4, 3), 3)
    wb = b.fan_in_uniform("backbone.w", (4, 3), 3)
    assert wa.data.tobytes() == wb.data.tobytes()
    assert np.abs(wa.data).max() <= np.sqrt(3.0 / 3)
    with pytest.raises(KeyError):
        a.add("backbone.w", np.zeros(1))

"""Differentiable operations over :class:`~mggnet.tensor.Tensor`.

Each op is a :class:`Function` subclass plus a lowercase convenience wrapper.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, DimensionError, EngineError, Function, NumericError, Tensor, as_tensor


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{name}: cannot broadcast {a.shape} with {b.shape}") from exc


# --------------------------------------------------------------------------
# elementwise arithmetic


class Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        _check_broadcast(a, b, "add")
        ctx.shapes = (a.shape, b.shape)
        return a + b

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx.shapes
        return unbroadcast(g, sa), unbroadcast(g, sb)


class Sub(Function):
    @staticmethod
    def forward(ctx, a, b):
        _check_broadcast(a, b, "sub")
        ctx.shapes = (a.shape, b.shape)
        return a - b

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx.shapes
        return unbroadcast(g, sa), unbroadcast(-g, sb)


class Mul(Function):
    @staticmethod
    def forward(ctx, a, b):
        _check_broadcast(a, b, "mul")
        ctx.a, ctx.b = a, b
        return a * b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.a, ctx.b
        ga = unbroadcast(g * b, a.shape) if ctx.needs_input_grad[0] else None
        gb = unbroadcast(g * a, b.shape) if ctx.needs_input_grad[1] else None
        return ga, gb


class Div(Function):
    @staticmethod
    def forward(ctx, a, b):
        _check_broadcast(a, b, "div")
        if np.any(b == 0):
            raise EngineError("division by zero")
        ctx.a, ctx.b = a, b
        return a / b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.a, ctx.b
        ga = unbroadcast(g / b, a.shape) if ctx.needs_input_grad[0] else None
        gb = unbroadcast(-g * a / (b * b), b.shape) if ctx.needs_input_grad[1] else None
        return ga, gb


class Exp(Function):
    @staticmethod
    def forward(ctx, x):
        ctx.out = np.exp(x)
        return ctx.out

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.out,)


class Log(Function):
    @staticmethod
    def forward(ctx, x):
        if np.any(x <= 0):
            raise NumericError("log of a non-positive value")
        ctx.x = x
        return np.log(x)

    @staticmethod
    def backward(ctx, g):
        return (g / ctx.x,)


class ReLU(Function):
    @staticmethod
    def forward(ctx, x):
        ctx.mask = x > 0
        return np.where(ctx.mask, x, 0.0)

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.mask,)


class Sigmoid(Function):
    @staticmethod
    def forward(ctx, x):
        # split by sign so exp never overflows
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        ctx.out = out
        return out

    @staticmethod
    def backward(ctx, g):
        s = ctx.out
        return (g * s * (1.0 - s),)


class Clip(Function):
    @staticmethod
    def forward(ctx, x, lo: float, hi: float):
        ctx.pass_mask = (x >= lo) & (x <= hi)
        return np.clip(x, lo, hi)

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.pass_mask,)


# --------------------------------------------------------------------------
# shape and reduction


class Sum(Function):
    @staticmethod
    def forward(ctx, x, axis=None, keepdims=False):
        ctx.shape = x.shape
        ctx.axis = axis
        ctx.keepdims = keepdims
        return np.sum(x, axis=axis, keepdims=keepdims)

    @staticmethod
    def backward(ctx, g):
        if ctx.axis is not None and not ctx.keepdims:
            g = np.expand_dims(g, ctx.axis)
        return (np.broadcast_to(g, ctx.shape).copy(),)


class Reshape(Function):
    @staticmethod
    def forward(ctx, x, shape):
        ctx.shape = x.shape
        return x.reshape(shape)

    @staticmethod
    def backward(ctx, g):
        return (g.reshape(ctx.shape),)


class Transpose(Function):
    @staticmethod
    def forward(ctx, x, axes):
        ctx.inverse = tuple(np.argsort(axes))
        return np.transpose(x, axes)

    @staticmethod
    def backward(ctx, g):
        return (np.transpose(g, ctx.inverse),)


class Index(Function):
    @staticmethod
    def forward(ctx, x, index):
        ctx.shape = x.shape
        ctx.index = index
        return x[index]

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx.shape, dtype=DTYPE)
        np.add.at(out, ctx.index, g)
        return (out,)


class Concat(Function):
    @staticmethod
    def forward(ctx, *xs, axis=0):
        ctx.axis = axis
        ctx.splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return np.concatenate(xs, axis=axis)

    @staticmethod
    def backward(ctx, g):
        return tuple(np.split(g, ctx.splits, axis=ctx.axis))


class Stack(Function):
    @staticmethod
    def forward(ctx, *xs, axis=0):
        ctx.axis = axis
        return np.stack(xs, axis=axis)

    @staticmethod
    def backward(ctx, g):
        return tuple(np.moveaxis(g, ctx.axis, 0))


class Einsum(Function):
    """Explicit-output einsum. Every input index must also appear in the
    output or in another operand, and no operand may repeat an index."""

    @staticmethod
    def forward(ctx, *ops, subscripts: str):
        lhs, out = subscripts.replace(" ", "").split("->")
        ins = lhs.split(",")
        if len(ins) != len(ops):
            raise DimensionError(f"einsum '{subscripts}' got {len(ops)} operands")
        for k, s in enumerate(ins):
            if len(set(s)) != len(s):
                raise DimensionError(f"einsum operand '{s}' repeats an index")
            others = out + "".join(ins[:k] + ins[k + 1 :])
            if any(c not in others for c in s):
                raise DimensionError(f"einsum operand '{s}' has a private summed index")
        ctx.ins, ctx.out, ctx.ops = ins, out, ops
        try:
            return np.einsum(subscripts, *ops, optimize=len(ops) > 2)
        except ValueError as exc:
            raise DimensionError(f"einsum '{subscripts}': {exc}") from exc

    @staticmethod
    def backward(ctx, g):
        grads = []
        for k, s in enumerate(ctx.ins):
            if not ctx.needs_input_grad[k]:
                grads.append(None)
                continue
            others = [ctx.ops[j] for j in range(len(ctx.ops)) if j != k]
            subs = [ctx.ins[j] for j in range(len(ctx.ins)) if j != k]
            expr = ",".join([ctx.out] + subs) + "->" + s
            grads.append(np.einsum(expr, g, *others, optimize=len(others) > 1))
        return tuple(grads)


class MatMul(Function):
    @staticmethod
    def forward(ctx, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
        ctx.a, ctx.b = a, b
        return a @ b

    @staticmethod
    def backward(ctx, g):
        ga = g @ ctx.b.T if ctx.needs_input_grad[0] else None
        gb = ctx.a.T @ g if ctx.needs_input_grad[1] else None
        return ga, gb


class Softmax(Function):
    """Softmax along ``axis``; entries where ``mask`` is False get probability 0."""

    @staticmethod
    def forward(ctx, x, axis=-1, mask=None):
        if mask is None:
            z = x - x.max(axis=axis, keepdims=True)
            e = np.exp(z)
        else:
            mask = np.broadcast_to(mask, x.shape)
            if not mask.any(axis=axis).all():
                raise DimensionError("softmax: a slice has no unmasked entries")
            shift = np.where(mask, x, -np.inf).max(axis=axis, keepdims=True)
            e = np.where(mask, np.exp(np.where(mask, x - shift, 0.0)), 0.0)
        s = e / e.sum(axis=axis, keepdims=True)
        ctx.s, ctx.axis = s, axis
        return s

    @staticmethod
    def backward(ctx, g):
        s = ctx.s
        return (s * (g - (g * s).sum(axis=ctx.axis, keepdims=True)),)


# --------------------------------------------------------------------------
# convolution and normalization


def _pad_amount(kh: int, kw: int, padding: str) -> tuple[int, int]:
    if padding == "valid":
        return 0, 0
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise DimensionError("padding='same' needs odd kernel sizes")
        return (kh - 1) // 2, (kw - 1) // 2
    raise ValueError(f"unknown padding {padding!r}")


class Conv2d(Function):
    """Cross-correlation via im2col. x: [B,C,H,W], w: [O,C,kh,kw], b: [O]."""

    @staticmethod
    def forward(ctx, x, w, b, padding="same", stride=1):
        if x.ndim != 4 or w.ndim != 4 or b.ndim != 1:
            raise DimensionError(f"conv2d: bad ranks {x.shape}, {w.shape}, {b.shape}")
        B, C, H, W = x.shape
        O, Cw, kh, kw = w.shape
        if C != Cw or b.shape[0] != O:
            raise DimensionError(f"conv2d: input {x.shape} vs weight {w.shape} / bias {b.shape}")
        ph, pw = _pad_amount(kh, kw, padding)
        xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
        Hp, Wp = xp.shape[2], xp.shape[3]
        if Hp < kh or Wp < kw:
            raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than input {H}x{W}")
        Ho = (Hp - kh) // stride + 1
        Wo = (Wp - kw) // stride + 1
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
        wmat = w.reshape(O, -1)
        out = cols @ wmat.T + b
        ctx.cols, ctx.wmat = cols, wmat
        ctx.geom = (B, C, H, W, O, kh, kw, ph, pw, Ho, Wo, stride, Hp, Wp)
        return out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    @staticmethod
    def backward(ctx, g):
        B, C, H, W, O, kh, kw, ph, pw, Ho, Wo, s, Hp, Wp = ctx.geom
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gx = gw = gb = None
        if ctx.needs_input_grad[1]:
            gw = (g2.T @ ctx.cols).reshape(O, C, kh, kw)
        if ctx.needs_input_grad[2]:
            gb = g2.sum(axis=0)
        if ctx.needs_input_grad[0]:
            dcols = (g2 @ ctx.wmat).reshape(B, Ho, Wo, C, kh, kw)
            dxp = np.zeros((B, C, Hp, Wp), dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + s * Ho : s, j : j + s * Wo : s] += dcols[..., i, j].transpose(0, 3, 1, 2)
            gx = dxp[:, :, ph : ph + H, pw : pw + W]
        return gx, gw, gb


@dataclass
class RunningStats:
    """Per-channel running mean/variance, updated in place in train mode."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1) -> "RunningStats":
        return cls(np.zeros(channels, dtype=DTYPE), np.ones(channels, dtype=DTYPE), momentum)


class BatchNorm2dTrain(Function):
    @staticmethod
    def forward(ctx, x, gamma, beta, eps=1e-5):
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        ctx.xhat, ctx.inv_std, ctx.gamma, ctx.m = xhat, inv_std, gamma, m
        ctx.batch_mean, ctx.batch_var = mean, var
        return gamma[None, :, None, None] * xhat + beta[None, :, None, None]

    @staticmethod
    def backward(ctx, g):
        xhat, inv_std, gamma, m = ctx.xhat, ctx.inv_std, ctx.gamma, ctx.m
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gx = None
        if ctx.needs_input_grad[0]:
            dxhat = g * gamma[None, :, None, None]
            gx = (inv_std[None, :, None, None] / m) * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        return gx, ggamma, gbeta


# --------------------------------------------------------------------------
# wrappers


def add(a: Any, b: Any) -> Tensor:
    return Add.apply(a, b)


def sub(a: Any, b: Any) -> Tensor:
    return Sub.apply(a, b)


def mul(a: Any, b: Any) -> Tensor:
    return Mul.apply(a, b)


def div(a: Any, b: Any) -> Tensor:
    return Div.apply(a, b)


def exp(x: Tensor) -> Tensor:
    return Exp.apply(x)


def log(x: Tensor) -> Tensor:
    return Log.apply(x)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    return Clip.apply(x, lo=lo, hi=hi)


def sum(x: Tensor, axis: Any = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    if isinstance(axis, list):
        axis = tuple(axis)
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x: Tensor, axis: Any = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return sum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    return Transpose.apply(x, axes=tuple(axes))


def index(x: Tensor, idx: Any) -> Tensor:
    return Index.apply(x, index=idx)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*xs, axis=axis)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Stack.apply(*xs, axis=axis)


def einsum(subscripts: str, *ops: Tensor) -> Tensor:
    return Einsum.apply(*ops, subscripts=subscripts)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    return Softmax.apply(x, axis=axis, mask=mask)


def softmax_vec(logits: Any) -> Tensor:
    x = as_tensor(logits)
    if x.ndim != 1 or x.shape[0] < 1:
        raise DimensionError(f"softmax_vec needs a non-empty vector, got shape {x.shape}")
    return softmax(x, axis=0)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight.T + bias``; ``x`` is a vector or a [batch, in] matrix."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} vs weight {weight.shape}")
    if x.ndim == 1:
        out = einsum("oi,i->o", weight, x)
    else:
        out = matmul(x, transpose(weight, (1, 0)))
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"linear: bias {bias.shape} vs weight {weight.shape}")
        out = out + bias
    return out


def conv2d(
    x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, padding: str = "same", stride: int = 1
) -> Tensor:
    if bias is None:
        bias = Tensor(np.zeros(weight.shape[0]))
    return Conv2d.apply(x, weight, bias, padding=padding, stride=stride)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mode: str,
    running: RunningStats,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (batch, H, W).

    In ``train`` mode the batch moments normalize the input and ``running`` is
    updated by exponential moving average (unbiased variance). ``eval`` uses
    the running moments.
    """
    x = as_tensor(x)
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batchnorm2d: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    if mode == "train":
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m < 2:
            raise EngineError(f"batchnorm2d: degenerate batch (B*H*W = {m} < 2)")
        out = BatchNorm2dTrain.apply(x, gamma, beta, eps=eps)
        mom = running.momentum
        bm = x.data.mean(axis=(0, 2, 3))
        bv = x.data.var(axis=(0, 2, 3)) * (m / (m - 1))
        running.mean[:] = (1 - mom) * running.mean + mom * bm
        running.var[:] = (1 - mom) * running.var + mom * bv
        return out
    if mode == "eval":
        scale = Tensor(1.0 / np.sqrt(running.var + eps))
        shift = Tensor(running.mean)
        xhat = (x - reshape(shift, (1, -1, 1, 1))) * reshape(scale, (1, -1, 1, 1))
        return xhat * reshape(gamma, (1, -1, 1, 1)) + reshape(beta, (1, -1, 1, 1))
    raise ValueError(f"unknown batchnorm mode {mode!r}")


def global_avg_pool(x: Tensor) -> Tensor:
    """[B, C, H, W] -> [B, C] spatial mean."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool needs a 4-d input, got {x.shape}")
    return mean(x, axis=(2, 3))

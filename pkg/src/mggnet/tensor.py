"""Dense float64 tensors with a define-by-run reverse-mode tape.

Every differentiable operation is a :class:`Function` subclass with static
``forward``/``backward`` rules. Applying a function appends one record to the
active :class:`Tape`; :func:`backward` walks that tape in reverse order.
Backward rules are looked up on the class at backward time, so patching a
rule affects tapes that were already recorded.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field
from types import SimpleNamespace
from typing import Any, Callable, Iterator, Optional, Sequence

import numpy as np

DTYPE = np.float64


class EngineError(Exception):
    """Base class for tensor engine failures."""


class DimensionError(EngineError, ValueError):
    pass


class NumericError(EngineError, FloatingPointError):
    pass


class GraphError(EngineError, RuntimeError):
    pass


@dataclass
class TapeRecord:
    fn: type
    ctx: SimpleNamespace
    inputs: tuple
    output_id: int


@dataclass
class Tape:
    """Ordered log of operations; inputs always precede the op that consumes them."""

    records: list = field(default_factory=list)

    def __post_init__(self) -> None:
        self._ids = itertools.count()

    def next_id(self) -> int:
        return next(self._ids)

    def __len__(self) -> int:
        return len(self.records)

    def __enter__(self) -> "Tape":
        _STATE.tapes.append(self)
        return self

    def __exit__(self, *exc: Any) -> None:
        _STATE.tapes.pop()


class _State:
    def __init__(self) -> None:
        self.default_tape = Tape()
        self.tapes: list[Tape] = []
        self.grad_enabled = True

    @property
    def tape(self) -> Tape:
        return self.tapes[-1] if self.tapes else self.default_tape


_STATE = _State()


def active_tape() -> Tape:
    return _STATE.tape


def reset_default_tape() -> None:
    _STATE.default_tape = Tape()


@contextmanager
def no_grad() -> Iterator[None]:
    prev = _STATE.grad_enabled
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = prev


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode gradients.

    Leaf tensors (parameters, inputs) have ``node_id = None``; tensors produced
    by a recorded op carry the id of their tape record.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_tape")
    __array_priority__ = 1000

    def __init__(self, data: Any, requires_grad: bool = False) -> None:
        arr = np.array(data, dtype=DTYPE)
        if not np.isfinite(arr).all():
            raise NumericError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self._tape: Optional[Tape] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = requires_grad
        out.grad = None
        out.node_id = None
        out._tape = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic -------------------------------------------------------
    def __add__(self, other: Any) -> "Tensor":
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other: Any) -> "Tensor":
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other: Any) -> "Tensor":
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: Any) -> "Tensor":
        from . import functional as F
        return F.div(self, other)

    def __rtruediv__(self, other: Any) -> "Tensor":
        from . import functional as F
        return F.div(other, self)

    def __neg__(self) -> "Tensor":
        from . import functional as F
        return F.mul(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        from . import functional as F
        return F.matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        from . import functional as F
        return F.index(self, index)

    def sum(self, axis: Any = None, keepdims: bool = False) -> "Tensor":
        from . import functional as F
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Any = None, keepdims: bool = False) -> "Tensor":
        from . import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: Any) -> "Tensor":
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)


def as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Function:
    """Differentiable op. Subclasses define ``forward(ctx, *arrays, **kw)``
    returning an ndarray and ``backward(ctx, grad)`` returning one gradient
    (or None) per input."""

    @staticmethod
    def forward(ctx: SimpleNamespace, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(ctx: SimpleNamespace, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Any, **kwargs: Any) -> Tensor:
        tensors = tuple(as_tensor(x) for x in inputs)
        ctx = SimpleNamespace()
        out = cls.forward(ctx, *(t.data for t in tensors), **kwargs)
        out = np.asarray(out, dtype=DTYPE)
        if not np.isfinite(out).all():
            raise NumericError(f"{cls.__name__} produced NaN or Inf")
        needs_grad = _STATE.grad_enabled and any(t.requires_grad for t in tensors)
        result = Tensor._wrap(out, needs_grad)
        if needs_grad:
            tape = _STATE.tape
            for t in tensors:
                if t._tape is not None and t._tape is not tape:
                    raise GraphError("inputs were recorded on a different tape")
            ctx.needs_input_grad = tuple(t.requires_grad for t in tensors)
            result.node_id = tape.next_id()
            result._tape = tape
            tape.records.append(TapeRecord(cls, ctx, tensors, result.node_id))
        return result


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    Gradients add to whatever is already stored, so calling this twice
    without clearing doubles them.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")
    if loss.node_id is None:
        _accumulate_leaf(loss, np.ones_like(loss.data))
        return
    tape = loss._tape
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    # record ids increase along the tape, so start at the loss' own record
    end = _record_position(tape, loss.node_id)
    for rec in reversed(tape.records[: end + 1]):
        g = grads.pop(rec.output_id, None)
        if g is None:
            continue
        in_grads = rec.fn.backward(rec.ctx, g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            gi = np.asarray(gi, dtype=DTYPE)
            if gi.shape != t.data.shape:
                raise DimensionError(
                    f"{rec.fn.__name__}.backward returned grad of shape {gi.shape} for input {t.data.shape}"
                )
            if t.node_id is None:
                _accumulate_leaf(t, gi)
            elif t.node_id in grads:
                grads[t.node_id] = grads[t.node_id] + gi
            else:
                grads[t.node_id] = gi


def _record_position(tape: Tape, node_id: int) -> int:
    recs = tape.records
    lo, hi = 0, len(recs) - 1
    while lo <= hi:
        mid = (lo + hi) // 2
        rid = recs[mid].output_id
        if rid == node_id:
            return mid
        if rid < node_id:
            lo = mid + 1
        else:
            hi = mid - 1
    raise GraphError(f"node {node_id} is not on its tape (was the tape reset?)")


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def numerical_gradient(f: Callable[[], float], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` w.r.t. ``t.data``."""
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = f()
        flat[k] = orig - h
        fm = f()
        flat[k] = orig
        gflat[k] = (fp - fm) / (2 * h)
    return grad

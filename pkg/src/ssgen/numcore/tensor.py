"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable primitive produces a new :class:`Tensor` and, when any
input requires a gradient, appends the output node to the global :class:`Tape`.
Because nodes are recorded in creation order the tape is already topologically
sorted, so :func:`backward` is a single reverse sweep.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

from ssgen.errors import ContractError, NumericFailure

_DTYPE: type = np.float32
_GRAD_ENABLED = True


def get_dtype() -> type:
    return _DTYPE


def set_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported dtype {dtype!r}")
    _DTYPE = dtype


@contextlib.contextmanager
def float64_mode() -> Iterator[None]:
    """Switch new tensors to 64-bit for the duration of the block (gradient checking)."""
    previous = _DTYPE
    set_dtype(np.float64)
    try:
        yield
    finally:
        set_dtype(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tape:
    """Ordered record of primitive applications since the last ``clear``."""

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def record(self, node: "Tensor") -> None:
        node._tape_index = len(self.nodes)
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node._parents = ()
            node._backward = None
            node._tape_index = -1
        self.nodes = []

    def __len__(self) -> int:
        return len(self.nodes)


TAPE = Tape()


def clear_tape() -> None:
    TAPE.clear()


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NumericFailure(f"non-finite values produced by {op}")


class Tensor:
    """An n-d array of reals with an optional gradient.

    Leaves created by users (parameters, inputs) keep their ``grad`` across
    backward passes until :meth:`zero_grad`; interior nodes live on the tape.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_tape_index")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or _DTYPE)
        _check_finite(arr, "tensor construction")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._tape_index = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar; each maps onto a primitive below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._tape_index = -1
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
        TAPE.record(out)
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def backward(g):
        return (g * c,)

    return _make(a.data * a.data.dtype.type(c), (a,), backward, "scale")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ContractError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _make(np.where(mask, a.data, 0).astype(a.data.dtype), (a,), backward, "relu")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _make(out, (a,), backward, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return _make(out, (a,), backward, "log")


def clamp(a, lo: float, hi: float) -> Tensor:
    """Hard clamp; the gradient is zero where the bound is active."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        return (g * inside,)

    return _make(np.clip(a.data, lo, hi), (a,), backward, "clamp")


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(np.asarray(out, dtype=a.data.dtype), (a,), backward, "mean")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors:
        if t.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax
        ):
            raise ContractError(
                f"concat along axis {axis}: incompatible shapes {[t.shape for t in tensors]}"
            )
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        parts = []
        for i in range(len(tensors)):
            idx = [slice(None)] * ndim
            idx[ax] = slice(bounds[i], bounds[i + 1])
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def slice_(a, index) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ContractError(f"slice {index!r} invalid for shape {a.shape}: {exc}") from None
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), backward, "slice")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ContractError(str(exc)) from None

    def backward(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), backward, "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inverse),)

    return _make(out, (a,), backward, "transpose")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ContractError(str(exc)) from None

    def backward(g):
        return (_unbroadcast(g, a.shape),)

    return _make(np.array(out), (a,), backward, "broadcast")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax")


def softmax(x, axis: int = -1) -> np.ndarray:
    """Row-stabilised softmax on raw values (prediction only, no tape)."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    shifted = data - data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ContractError(f"logits must be (B, C), got {logits.shape}")
    batch, classes = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if batch < 1 or labels.shape[0] != batch:
        raise ContractError(f"{labels.shape[0]} labels for a batch of {batch}")
    if labels.min() < 0 or labels.max() >= classes:
        raise ContractError(f"labels must lie in [0, {classes})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(batch)
    losses = lse - shifted[rows, labels]
    out = np.asarray(losses.mean(), dtype=logits.data.dtype)

    def backward(g):
        probs = np.exp(shifted - lse[:, None])
        probs[rows, labels] -= 1.0
        return (probs * (g / batch),)

    return _make(out, (logits,), backward, "softmax_cross_entropy")


# ---------------------------------------------------------------- backward


def backward(loss: Tensor, retain_tape: bool = False) -> dict[Tensor, np.ndarray]:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Returns a map from each such leaf to its gradient. Gradients accumulate
    into existing leaf ``.grad`` arrays, so callers zero them between steps.
    Unless ``retain_tape`` is set the tape is cleared afterwards.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = getattr(loss, "shape", None)
        raise ContractError(f"backward needs a scalar tensor, got shape {shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")

    leaves: dict[Tensor, np.ndarray] = {}
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    def push(node: Tensor, g: np.ndarray) -> None:
        if node.is_leaf:
            g = np.asarray(g, dtype=node.data.dtype).reshape(node.shape)
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad = node.grad + g
            leaves[node] = node.grad
            return
        key = id(node)
        if key in pending:
            pending[key] = pending[key] + g
        else:
            pending[key] = g

    if loss.is_leaf:
        push(loss, pending.pop(id(loss)))
    else:
        stop = loss._tape_index
        for node in reversed(TAPE.nodes[: stop + 1]):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            grads = node._backward(g)
            for parent, pg in zip(node._parents, grads):
                if pg is not None and parent.requires_grad:
                    push(parent, pg)
    if not retain_tape:
        TAPE.clear()
    return leaves

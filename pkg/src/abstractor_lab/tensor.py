"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a contiguous numpy array. Every differentiable
operation records its parents and a backward closure on the output, so a
forward pass builds the operation graph dynamically; :meth:`Tensor.backward`
replays it in reverse topological order.

Training runs in float32. :func:`precision` switches the default dtype to
float64 for gradient checks, and :func:`debug_mode` turns on finiteness
checks after every operation and every backward pass.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

_local = threading.local()


def _get(name, default):
    return getattr(_local, name, default)


def default_dtype() -> np.dtype:
    return _get("dtype", np.dtype(np.float32))


def grad_enabled() -> bool:
    return _get("grad", True)


def debug_enabled() -> bool:
    return _get("debug", False)


@contextlib.contextmanager
def _setting(name, value, default):
    old = _get(name, default)
    setattr(_local, name, value)
    try:
        yield
    finally:
        setattr(_local, name, old)


def no_grad():
    """Context manager: operations inside do not record a graph."""
    return _setting("grad", False, True)


def precision(dtype):
    """Context manager setting the dtype of newly created tensors."""
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ConfigError(f"unsupported dtype {dtype}")
    return _setting("dtype", dtype, np.dtype(np.float32))


def debug_mode(enabled: bool = True):
    return _setting("debug", enabled, False)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {what}")


class Tensor:
    """n-dimensional float array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        dtype = np.dtype(dtype) if dtype is not None else default_dtype()
        arr = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        _check_finite(arr, "tensor data")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = ""
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = cls.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        needs = grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = tuple(parents) if needs else ()
        out._backward = backward if needs else None
        out._op = op
        if debug_enabled():
            _check_finite(data, f"output of {op}")
        return out

    # basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # autodiff ---------------------------------------------------------
    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
        if not self.requires_grad:
            raise ContractError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        if debug_enabled():
            for node in order:
                if node.grad is not None:
                    _check_finite(node.grad, "gradient")

    # operator sugar ---------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, dtype=None, name=None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, np.ndarray) and x.dtype in (np.float32, np.float64):
        dtype = x.dtype
    return Tensor(x, dtype=dtype)


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# elementwise arithmetic -------------------------------------------------
def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const(a, b)
    b = b if isinstance(b, Tensor) else _const(b, a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const(a, b)
    b = b if isinstance(b, Tensor) else _const(b, a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const(a, b)
    b = b if isinstance(b, Tensor) else _const(b, a)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const(a, b)
    b = b if isinstance(b, Tensor) else _const(b, a)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(a.data / b.data, (a, b), backward, "div")


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out = a.data**p

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return Tensor._result(out, (a,), backward, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return Tensor._result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return Tensor._result(np.maximum(a.data, 0), (a,), lambda g: (g * pos,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    ex = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex)).astype(a.dtype)
    return Tensor._result(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


ELEMENTWISE_KINDS = ("relu", "sigmoid", "tanh", "linear")


def elementwise(a: Tensor, kind: str) -> Tensor:
    """Apply an entrywise activation: relu, sigmoid, tanh or linear (identity)."""
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "tanh":
        return tanh(a)
    if kind == "linear":
        return a
    raise ConfigError(f"unknown elementwise activation {kind!r}; expected one of {ELEMENTWISE_KINDS}")


# linear algebra ----------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading (batch) axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(out, (a, b), backward, "matmul")


# reductions and shape ----------------------------------------------------
def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=a.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return Tensor._result(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor._result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)
    return Tensor._result(out, (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out = np.swapaxes(a.data, ax1, ax2)
    return Tensor._result(out, (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def getitem(a: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._result(np.ascontiguousarray(out), (a,), backward, "getitem")


def take_rows(table: Tensor, idx) -> Tensor:
    """Gather rows ``table[idx]`` for an integer index array of any shape."""
    idx = np.asarray(idx, dtype=np.int64)
    out = table.data[idx]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (full,)

    return Tensor._result(out, (table,), backward, "take_rows")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor._result(out, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._result(out, tensors, backward, "stack")


def broadcast_to(a: Tensor, shape) -> Tensor:
    out = np.broadcast_to(a.data, shape)
    return Tensor._result(np.ascontiguousarray(out), (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast")


# fused normalizations ----------------------------------------------------
def row_softmax(a: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis with max-subtraction.

    ``mask`` (boolean, broadcastable, True = keep) excludes entries; a row
    with every entry masked yields all zeros.
    """
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        x = np.where(mask, x, -np.inf)
    peak = np.max(x, axis=-1, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    e = np.exp(x - peak)
    total = e.sum(axis=-1, keepdims=True)
    out = np.divide(e, total, out=np.zeros_like(e), where=total > 0).astype(a.dtype)

    def backward(g):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        return (out * (g - dot),)

    return Tensor._result(out, (a,), backward, "softmax")


def softmax(a: Tensor, mask=None) -> Tensor:
    return row_softmax(a, mask)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then apply gain and bias."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    d = x.shape[-1]

    def backward(g):
        gg = _unbroadcast(g * xhat, gain.shape) if gain.requires_grad else None
        gb = _unbroadcast(g, bias.shape) if bias.requires_grad else None
        ga = None
        if a.requires_grad:
            gx = g * gain.data
            ga = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / d)
        return ga, gg, gb

    dtype = np.result_type(a.dtype, gain.dtype, bias.dtype)
    return Tensor._result(out.astype(dtype), (a, gain, bias), backward, "layer_norm")


def cross_entropy(logits: Tensor, targets, ignore_index: int | None = None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``softmax(logits)``.

    Positions whose target equals ``ignore_index`` contribute neither loss
    nor gradient.
    """
    targets = np.asarray(targets, dtype=np.int64)
    vocab = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    flat_logits = logits.data.reshape(-1, vocab)
    flat_t = targets.reshape(-1)
    keep = np.ones(flat_t.shape, dtype=bool) if ignore_index is None else flat_t != ignore_index
    count = int(keep.sum())
    if count == 0:
        raise ContractError("cross_entropy: every position is ignored")
    bad = keep & ((flat_t < 0) | (flat_t >= vocab))
    if bad.any():
        raise ContractError(f"cross_entropy: targets outside [0, {vocab})")
    safe_t = np.where(keep, flat_t, 0)
    shifted = flat_logits - flat_logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    picked = logp[np.arange(len(safe_t)), safe_t]
    loss = -(picked * keep).sum() / count

    def backward(g):
        p = np.exp(logp)
        p[np.arange(len(safe_t)), safe_t] -= 1.0
        p *= keep[:, None] / count
        return ((g * p).reshape(logits.shape).astype(logits.dtype),)

    return Tensor._result(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


# finite-difference verification ----------------------------------------
def grad_check(
    f: Callable[[Tensor], Tensor],
    x,
    h: float = 1e-3,
    coords: Iterable[int] | None = None,
    reference_dtype=np.float64,
    floor: float = 1e-3,
    scale: float | None = None,
    refinements: int = 3,
) -> float:
    """Worst relative error between backprop and central differences.

    The backward pass runs at the dtype of ``x`` (float32 by default). The
    central differences re-evaluate ``f`` on ``x +- h e_i`` promoted to
    ``reference_dtype`` so that rounding in the reference does not swamp
    the comparison. Per coordinate the error is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor * max|numeric|)``;
    the floor keeps coordinates with vanishing gradient from dominating.
    ``scale`` overrides ``max|numeric|`` as the floor's reference, useful when
    checking one parameter of a larger model whose gradient is identically
    zero (e.g. a key bias under softmax). ``coords`` restricts the check to
    a subset of flat indices.

    Each coordinate's difference is repeated with a tenfold smaller step. If
    the two estimates disagree the step straddles a kink (a ReLU switching),
    and the step keeps shrinking, up to ``refinements`` times, until two
    consecutive estimates agree; the last estimate is used. The analytic
    gradient plays no part in choosing the step.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x)
    if not np.issubdtype(base.dtype, np.floating):
        base = base.astype(default_dtype())
    probe = Tensor(base, requires_grad=True, dtype=base.dtype)
    out = f(probe)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ContractError("grad_check needs f to return a scalar Tensor")
    out.backward()
    analytic = np.zeros(base.size) if probe.grad is None else probe.grad.astype(np.float64).reshape(-1)

    ref = base.astype(reference_dtype).reshape(-1)
    idx = range(base.size) if coords is None else list(coords)
    numeric = {}

    def central(i, step):
        plus, minus = ref.copy(), ref.copy()
        plus[i] += step
        minus[i] -= step
        fp = f(Tensor(plus.reshape(base.shape), dtype=reference_dtype)).data
        fm = f(Tensor(minus.reshape(base.shape), dtype=reference_dtype)).data
        return (fp.reshape(-1)[0] - fm.reshape(-1)[0]) / (2 * step)

    with precision(reference_dtype), no_grad():
        for i in idx:
            step = h
            est = central(i, step)
            for _ in range(refinements):
                step /= 10
                finer = central(i, step)
                settled = abs(finer - est) <= 1e-4 * max(abs(finer), abs(est)) + 1e-12
                est = finer
                if settled:
                    break
            numeric[i] = est
    if not numeric:
        return 0.0
    if scale is None:
        scale = max(abs(v) for v in numeric.values())
    worst = 0.0
    for i, n in numeric.items():
        a = analytic[i]
        denom = max(abs(a), abs(n), floor * scale)
        if denom == 0.0:
            continue
        worst = max(worst, abs(a - n) / denom)
    return worst

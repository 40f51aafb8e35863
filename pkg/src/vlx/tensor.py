"""Dense float64 tensors with a reverse-mode gradient tape.

Only the handful of operations the dual-encoder model needs are provided.
Every op that touches a tensor with ``requires_grad`` appends a node to the
thread's current :class:`Tape`; :func:`backward` replays that tape in reverse
and then discards it.
"""
from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

EPS_NORM = 1e-12
GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715

_DEBUG = False


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateEmbeddingError(ValueError):
    """A row norm fell below the normalization threshold."""


class ContractError(RuntimeError):
    """An autodiff precondition was violated."""


def set_debug(flag: bool) -> None:
    """Check every op output for NaN/Inf when enabled."""
    global _DEBUG
    _DEBUG = bool(flag)


class Tape:
    """Ordered record of executed differentiable operations."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], grad_fn: Callable) -> None:
        if self.consumed:
            raise ContractError("tape already consumed by a backward pass")
        self.nodes.append((out, inputs, grad_fn))
        out._tape = self

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None or tape.consumed:
        tape = Tape()
        _local.tape = tape
    return tape


def new_tape() -> Tape:
    """Start a fresh tape for the calling thread and return it."""
    _local.tape = Tape()
    return _local.tape


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> Tensor:
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t._tape = None
        if _DEBUG and not np.all(np.isfinite(arr)):
            raise FloatingPointError("non-finite value produced by tensor op")
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(arr: np.ndarray, inputs: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, needs)
    if needs:
        current_tape().record(out, tuple(inputs), grad_fn)
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64).reshape(t.shape)
    else:
        t.grad = t.grad + g.reshape(t.shape)


# --------------------------------------------------------------------------
# binary ops with restricted broadcasting


def _broadcast_kind(a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "same"
    if b.size == 1:
        return "b_scalar"
    if a.size == 1:
        return "a_scalar"
    if a.data.ndim == 2 and b.data.ndim in (1, 2) and b.size == a.shape[1] and (
        b.data.ndim == 1 or b.shape[0] == 1
    ):
        return "b_row"
    if b.data.ndim == 2 and a.data.ndim in (1, 2) and a.size == b.shape[1] and (
        a.data.ndim == 1 or a.shape[0] == 1
    ):
        return "a_row"
    raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, kind: str, side: str, shape) -> np.ndarray:
    if kind == "same":
        return g
    if kind == f"{side}_scalar":
        return np.full(shape, g.sum())
    if kind == f"{side}_row":
        return g.sum(axis=0).reshape(shape)
    return g


def _operands(a, b) -> tuple[Tensor, Tensor]:
    return as_tensor(a), as_tensor(b)


def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    kind = _broadcast_kind(a, b)
    arr = _bcast(a, kind, "a") + _bcast(b, kind, "b")

    def grad_fn(g):
        return _reduce_to(g, kind, "a", a.shape), _reduce_to(g, kind, "b", b.shape)

    return _result(arr, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)
    kind = _broadcast_kind(a, b)
    arr = _bcast(a, kind, "a") - _bcast(b, kind, "b")

    def grad_fn(g):
        return _reduce_to(g, kind, "a", a.shape), _reduce_to(-g, kind, "b", b.shape)

    return _result(arr, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)
    kind = _broadcast_kind(a, b)
    av, bv = _bcast(a, kind, "a"), _bcast(b, kind, "b")
    arr = av * bv

    def grad_fn(g):
        return _reduce_to(g * bv, kind, "a", a.shape), _reduce_to(g * av, kind, "b", b.shape)

    return _result(arr, (a, b), grad_fn)


def _bcast(t: Tensor, kind: str, side: str) -> np.ndarray:
    if kind == f"{side}_scalar":
        return t.data.reshape(())
    if kind == f"{side}_row":
        return t.data.reshape(1, -1)
    return t.data


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _operands(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.data, b.data

    def grad_fn(g):
        return g @ bv.T, av.T @ g

    return _result(av @ bv, (a, b), grad_fn)


# --------------------------------------------------------------------------
# unary ops


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximate GELU, ``0.5 x (1 + tanh(c (x + k x^3)))``.

    The backward pass is the exact derivative of this approximation:
    ``0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 k x^2)`` with ``t`` the tanh term.
    """
    x = a.data
    t = np.tanh(GELU_C * (x + GELU_K * x**3))
    out = 0.5 * x * (1.0 + t)
    dydx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
    return _result(out, (a,), lambda g: (g * dydx,))


def l2_normalize_rows(a: Tensor, eps: float = EPS_NORM) -> Tensor:
    x = a.data if a.data.ndim == 2 else a.data.reshape(1, -1)
    norms = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    if np.any(norms < eps):
        bad = int(np.argmin(norms[:, 0]))
        raise DegenerateEmbeddingError(f"row {bad} has norm {float(norms[bad, 0]):.3g} < {eps:g}")
    y = x / norms

    def grad_fn(g):
        g2 = g.reshape(y.shape)
        return ((g2 - y * np.sum(y * g2, axis=1, keepdims=True)) / norms).reshape(a.shape),

    return _result(y.reshape(a.shape), (a,), grad_fn)


def mean_pool_rows(a: Tensor, group: int | None = None) -> Tensor:
    """Mean over consecutive blocks of ``group`` rows; all rows when ``group`` is None."""
    if a.data.ndim != 2:
        raise DimensionError(f"mean_pool_rows expects a matrix, got {a.shape}")
    n, d = a.shape
    group = n if group is None else group
    if group < 1 or n % group:
        raise DimensionError(f"{n} rows do not split into groups of {group}")
    out = a.data.reshape(n // group, group, d).mean(axis=1)

    def grad_fn(g):
        return np.repeat(g / group, group, axis=0),

    return _result(out, (a,), grad_fn)


def log_softmax_rows(a: Tensor) -> Tensor:
    x = a.data
    m = x.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=1, keepdims=True))
    out = x - lse
    sm = np.exp(out)
    return _result(out, (a,), lambda g: (g - sm * g.sum(axis=1, keepdims=True),))


def softmax_rows(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)
    return _result(s, (a,), lambda g: (s * (g - np.sum(g * s, axis=1, keepdims=True)),))


def total(a: Tensor) -> Tensor:
    """Sum of all entries as a 1-element tensor."""
    shape = a.shape
    return _result(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.data.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


_OPS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "gelu": gelu,
    "relu": relu,
    "l2_normalize_rows": l2_normalize_rows,
    "mean_pool_rows": mean_pool_rows,
    "scale": scale,
}


def elementwise(op: str, *args, **kwargs) -> Tensor:
    """Dispatch one of the named elementwise ops."""
    try:
        fn = _OPS[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args, **kwargs)


# --------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Fill ``.grad`` of every requires-grad tensor that ``loss`` depends on.

    Gradients accumulate additively into existing ``.grad`` buffers. The tape
    holding ``loss`` is consumed; a second call on the same graph is an error.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        # constant w.r.t. every differentiable input
        return
    if tape.consumed:
        raise ContractError("tape already consumed by a backward pass")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for out, inputs, grad_fn in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, grad_fn(g)):
            if not t.requires_grad:
                continue
            if t._tape is tape:
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
            else:
                _accumulate(t, gi)
    tape.nodes.clear()
    tape.consumed = True

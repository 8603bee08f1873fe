"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation executed on a tensor that requires gradients
appends a node to the tape.  Nodes carry a global, monotonically increasing
sequence number, so the tape order is the order of execution.  ``backward``
collects the nodes reachable from the loss and replays them in reverse tape
order, which makes the traversal deterministic and independent of Python's
set/dict iteration.

Only leaves accumulate into ``.grad``; intermediate gradients live in a
scratch table for the duration of a single ``backward`` call, so the graph can
be replayed again (a second call adds the same gradient a second time).

Broadcasting is limited to scalar operands (shape ``()``); matmul additionally
accepts a stack of matrices on the left against a single matrix on the right.
"""

from __future__ import annotations

import itertools
import threading
import zlib
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DegenerateEmbeddingError,
    DimensionError,
    DomainError,
    NumericError,
)

LOG_FLOOR = 1e-12
NORM_FLOOR = 1e-12

_seq = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate without recording onto the tape (thread-local)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class _Node:
    __slots__ = ("seq", "op", "out", "inputs", "backward")

    def __init__(self, op: str, out: "Tensor", inputs: tuple, backward: Callable):
        self.seq = next(_seq)
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tensor:
    """A float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._node: _Node | None = None
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    # -- introspection -------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out_data: np.ndarray, inputs: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.name = None
    out.grad = None
    out._node = None
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        out._node = _Node(op, out, inputs, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    # only scalar broadcasting is supported
    return np.asarray(g.sum()).reshape(shape)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# -- elementwise ---------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", a.data * b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _record("exp", y, (a,), lambda g: (g * y,))


def log(a: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    """Natural log with inputs in ``[0, floor)`` raised to ``floor``.

    The clamped entries receive zero gradient.  Negative or NaN inputs are a
    bug upstream and raise :class:`NumericError`.
    """
    x = a.data
    bad = ~(x >= 0.0)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NumericError(f"log of invalid value {x[idx]!r} at index {idx}")
    clamped = x < floor
    safe = np.where(clamped, floor, x)
    y = np.log(safe)

    def bw(g):
        return (np.where(clamped, 0.0, g / safe),)

    return _record("log", y, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _record("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


# -- reductions ----------------------------------------------------------------
def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = a.shape
    if axis is None:
        return _record("sum", np.asarray(a.data.sum()), (a,),
                       lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % a.ndim

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _record("sum", a.data.sum(axis=ax), (a,), bw)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    if count == 0:
        raise ContractError("mean of an empty extent")
    return scale(sum(a, axis), 1.0 / count)


# -- shape manipulation ----------------------------------------------------------
def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise DimensionError(f"transpose needs >= 2 dims, got shape {a.shape}")
    return _record("transpose", np.swapaxes(a.data, -1, -2), (a,),
                   lambda g: (np.swapaxes(g, -1, -2),))


def take(a: Tensor, index, axis: int = 0) -> Tensor:
    idx = np.asarray(index, dtype=np.int64)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, (slice(None),) * axis + (idx,), g)
        return (out,)

    return _record("take", np.take(a.data, idx, axis=axis), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _record("concat", data, tensors, bw)


# -- linear algebra ----------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; ``a`` may be a stack ``(B, m, k)`` against ``b`` of
    shape ``(k, n)`` or ``(B, k, n)``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or b.ndim > a.ndim or a.shape[-1] != b.shape[-2] \
            or (b.ndim == 3 and a.shape[0] != b.shape[0]):
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
        if b.requires_grad:
            if ad.ndim == bd.ndim:
                gb = np.swapaxes(ad, -1, -2) @ g
            else:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _record("matmul", ad @ bd, (a, b), bw)


def softmax_rows(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Softmax over the last axis of ``x / temperature`` (max-subtracted)."""
    if not temperature > 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return ((y * (g - (g * y).sum(axis=-1, keepdims=True))) / temperature,)

    return _record("softmax", y, (x,), bw)


def log_softmax_rows(x: Tensor, temperature: float = 1.0) -> Tensor:
    """``log softmax(x / temperature)`` over the last axis, without a floor.

    Stays finite and keeps its gradient where the probability itself would
    underflow the log floor.
    """
    if not temperature > 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(y)

    def bw(g):
        return ((g - p * g.sum(axis=-1, keepdims=True)) / temperature,)

    return _record("log_softmax", y, (x,), bw)


def l2_normalize_rows(x: Tensor) -> Tensor:
    norms = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if (norms < NORM_FLOOR).any() or not np.isfinite(norms).all():
        row = tuple(int(i) for i in np.argwhere(~(norms >= NORM_FLOOR))[0][:-1])
        raise DegenerateEmbeddingError(f"row {row} has norm below {NORM_FLOOR}")
    y = x.data / norms

    def bw(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norms,)

    return _record("l2norm", y, (x,), bw)


# -- reverse pass ----------------------------------------------------------------
def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss.is_leaf:
        loss.grad = loss.grad + 1.0
        return

    nodes: list[_Node] = []
    seen: set[int] = set()
    stack = [loss._node]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        for t in node.inputs:
            if t._node is not None and id(t._node) not in seen:
                stack.append(t._node)
    nodes.sort(key=lambda n: n.seq, reverse=True)

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in nodes:
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._node is None:
                t.grad = t.grad + gi
            else:
                key = id(t)
                pending[key] = pending[key] + gi if key in pending else gi


# -- random numbers ----------------------------------------------------------------
class Rng:
    """Seeded Philox-4x64 stream (counter-based, platform independent).

    ``fork(label)`` derives an independent child stream from the seed and a
    label, so components can draw without disturbing one another.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def fork(self, label: str) -> "Rng":
        return Rng(self.seed, self.path + (zlib.crc32(label.encode()),))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape) * std

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def kaiming_normal(rng: Rng, shape: tuple[int, ...], name: str | None = None) -> Tensor:
    """Zero-mean Gaussian with std sqrt(2 / fan_in), fan_in = last extent."""
    fan_in = shape[-1]
    return Tensor(rng.normal(shape, np.sqrt(2.0 / fan_in)), requires_grad=True, name=name)

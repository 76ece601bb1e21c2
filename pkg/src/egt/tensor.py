"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a row-major numpy array.  Every differentiable
operation records its parents together with a closure that maps the
gradient of the output to gradients of the inputs; :meth:`Tensor.backward`
walks that graph once in reverse topological order.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, LabelError, ShapeError

_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32
_grad_enabled = True


def set_default_dtype(name: str) -> None:
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"precision must be one of {sorted(_DTYPES)}, got {name!r}")
    _default_dtype = _DTYPES[name]


def get_default_dtype() -> type:
    return _default_dtype


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the dtype used for newly created tensors."""
    previous = _default_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        globals()["_default_dtype"] = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run operations without recording a graph (inference)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, dtype=None, op: str = "leaf"):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or (None if isinstance(data, (np.ndarray, np.generic)) else _default_dtype))
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_default_dtype)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"extents must be positive, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    # -- basic properties -------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data, op="detach")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- autodiff ---------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every leaf that requires it."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar root, got shape {self.shape}")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def iter_graph(self) -> list[Tensor]:
        """Nodes reachable from this tensor, parents before children."""
        return _topological_order(self)


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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    """Wrap ``data`` as the output of an op, recording the graph edge if needed."""
    out = Tensor(data, op=op)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or _default_dtype))


# -- construction ------------------------------------------------------------

@dataclass(frozen=True)
class Uniform:
    low: float = -1.0
    high: float = 1.0


@dataclass(frozen=True)
class Normal:
    mean: float = 0.0
    std: float = 1.0


@dataclass(frozen=True)
class Kaiming:
    """Fan-in scaled normal: std = sqrt(2 / fan_in)."""

    fan_in: int


def tensor_new(shape: Sequence[int], fill=0.0, seed: int = 0, *, dtype=None,
               requires_grad: bool = False) -> Tensor:
    """Create a tensor filled with a constant or with seeded random values.

    ``fill`` is a number, one of the init specs above, or the shortcuts
    ``"normal"`` / ``"uniform"``.  Random draws happen in float64 and are cast
    afterwards, so 32- and 64-bit tensors built with the same seed agree.
    """
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"extents must be >= 1, got {list(shape)}")
    dtype = dtype or _default_dtype
    if fill == "normal":
        fill = Normal()
    elif fill == "uniform":
        fill = Uniform()
    rng = np.random.default_rng(seed)
    if isinstance(fill, Normal):
        data = rng.normal(fill.mean, fill.std, size=shape)
    elif isinstance(fill, Uniform):
        data = rng.uniform(fill.low, fill.high, size=shape)
    elif isinstance(fill, Kaiming):
        data = rng.standard_normal(size=shape) * np.sqrt(2.0 / fill.fan_in)
    elif isinstance(fill, (int, float, np.floating)):
        data = np.full(shape, float(fill))
    else:
        raise ValueError(f"unsupported fill {fill!r}")
    return Tensor(data.astype(dtype), requires_grad=requires_grad)


# -- elementwise ---------------------------------------------------------------

def _is_scalar(t: Tensor) -> bool:
    return t.ndim == 0


def _reduce_to(g: np.ndarray, like: Tensor) -> np.ndarray:
    if g.shape == like.shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(like.shape)


def _check_elementwise(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} differ and neither is a scalar")


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _check_elementwise(a, b, "add")

    def backward(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return make_result(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _check_elementwise(a, b, "mul")

    def backward(g):
        return _reduce_to(g * b.data, a), _reduce_to(g * a.data, b)

    return make_result(a.data * b.data, (a, b), backward, "mul")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(a.dtype)

    def backward(g):
        return (g * out * (1 - out),)

    return make_result(out, (a,), backward, "sigmoid")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return make_result(a.data @ b.data, (a, b), backward, "matmul")


# -- reductions and reshaping --------------------------------------------------

def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return make_result(np.asarray(out, dtype=a.dtype), (a,), backward, "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).astype(a.dtype, copy=True),)

    return make_result(np.asarray(out, dtype=a.dtype), (a,), backward, "mean")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(tuple(shape))
    return make_result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def index(a: Tensor, i: int) -> Tensor:
    """Select entry ``i`` along the first axis."""
    out = a.data[i]

    def backward(g):
        full = np.zeros_like(a.data)
        full[i] = g
        return (full,)

    return make_result(np.asarray(out), (a,), backward, "index")


# -- classification ------------------------------------------------------------

def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: Tensor) -> Tensor:
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError(f"softmax expects [N, K>=2], got {logits.shape}")
    x = logits.data
    e = np.exp(x - x.max(axis=1, keepdims=True))
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return make_result(out, (logits,), backward, "softmax")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``)."""
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError(f"cross_entropy expects [N, K>=2], got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if labels.shape[0] != n:
        raise ShapeError(f"cross_entropy: {labels.shape[0]} labels for batch of {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    logp = _log_softmax(logits.data)
    rows = np.arange(n)
    # log-softmax entries are <= 0; adding 0.0 turns a possible -0.0 into +0.0
    loss = np.asarray(-logp[rows, labels].mean() + 0.0, dtype=logits.dtype)

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1
        return (d * (g / n),)

    return make_result(loss, (logits,), backward, "cross_entropy")

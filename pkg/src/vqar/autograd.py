"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor`.  When at least one input
requires a gradient the result records its parents and a backward rule, so
calling :meth:`Tensor.backward` on a scalar walks the recorded graph in
reverse topological order.

Broadcasting is deliberately narrow: two operands must either share a shape,
or one of them must be a scalar, or one of them must equal the other's shape
with the leading (batch) dimension removed.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

from .errors import ContractError, DomainError, GraphError, NonFiniteError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, EMA updates)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


_ROW_STABLE = False


@contextlib.contextmanager
def row_stable():
    """Make every forward matrix product row-wise reproducible.

    BLAS picks different kernels (and summation orders) depending on how many
    rows a product has, so row ``k`` of a large batch can differ in the last
    bits from the same row computed alone.  Inside this block products run as
    a stack of single-row products, which costs some speed but makes each
    row independent of its neighbours.
    """
    global _ROW_STABLE
    previous = _ROW_STABLE
    _ROW_STABLE = True
    try:
        yield
    finally:
        _ROW_STABLE = previous


def mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` for plain arrays, honouring :func:`row_stable`."""
    if _ROW_STABLE and a.ndim == 2:
        return np.matmul(a[:, None, :], b)[:, 0]
    return a @ b


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    __array_ufunc__ = None  # ndarray <op> Tensor defers to the Tensor reflected operator

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._consumed = False

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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- backward ----------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if self.data.shape != ():
            raise ContractError(f"backward() needs a scalar root, got shape {self.shape}")
        if self._consumed:
            raise GraphError("backward() already ran on this graph; rebuild it with a new forward pass")
        if not self.requires_grad:
            raise GraphError("root does not depend on any tensor that requires grad")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones((), dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    _check_finite(g, "backward")
                    node.grad = g.copy() if node.grad is None else node.grad + g
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
        for node in order:
            if node._backward is not None:
                node._consumed = True
                node._parents = ()
                node._backward = None
                node._op = "consumed"

    # -- operator sugar ----------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)


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
        if node._consumed:
            raise GraphError("graph contains nodes already consumed by an earlier backward()")
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


# ---------------------------------------------------------------------------
# helpers

def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(out: np.ndarray, op: str) -> None:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"non-finite value produced by '{op}'")


def _make(out: np.ndarray, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    _check_finite(out, op)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t._op = op
    t._consumed = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._backward = backward
    else:
        t.requires_grad = False
        t._parents = ()
        t._backward = None
    return t


def _broadcast_shape(a: tuple, b: tuple, op: str) -> None:
    if a == b or a == () or b == ():
        return
    if len(a) == len(b) + 1 and a[1:] == b:
        return
    if len(b) == len(a) + 1 and b[1:] == a:
        return
    raise ContractError(f"{op}: incompatible shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    return g.sum(axis=0)


# ---------------------------------------------------------------------------
# elementwise binary ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, "div", (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


# ---------------------------------------------------------------------------
# linear algebra and structural ops

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ContractError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.outer(g, bd) if bd.ndim == 1 else g @ bd.T
        if b.requires_grad:
            if ad.ndim == 1:
                gb = np.outer(ad, g) if bd.ndim == 2 else ad * g
            else:
                gb = ad.T @ g
        return ga, gb

    return _make(mm(ad, bd), "matmul", (a, b), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat: empty input")
    ndim = ts[0].ndim
    ax = axis % ndim if ndim else 0
    for t in ts[1:]:
        if t.ndim != ndim or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ContractError(f"concat: incompatible shapes {ts[0].shape} and {t.shape}")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(int(lo), int(hi))
            out.append(g[tuple(idx)])
        return out

    return _make(np.concatenate([t.data for t in ts], axis=ax), "concat", tuple(ts), backward)


def getitem(a, index) -> Tensor:
    """Basic (slice/int) indexing; advanced integer-array indexing is :func:`take`."""
    a = as_tensor(a)
    shape = a.shape
    out = a.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    def backward(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _make(out, "slice", (a,), backward)


def take(table, indices) -> Tensor:
    """Row gather ``table[indices]`` (embedding and codebook lookup)."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ContractError(f"take: table must be 2-D, got shape {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ContractError(f"take: index out of range for table with {table.shape[0]} rows")
    shape = table.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(table.data[idx], "take", (table,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    for t in ts[1:]:
        if t.shape != ts[0].shape:
            raise ContractError(f"stack: incompatible shapes {ts[0].shape} and {t.shape}")
    return _make(np.stack([t.data for t in ts], axis=axis), "stack", tuple(ts),
                 lambda g: [np.take(g, i, axis=axis) for i in range(len(ts))])


# ---------------------------------------------------------------------------
# elementwise unary ops

def _sigmoid(x: np.ndarray) -> np.ndarray:
    return special.expit(x)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _make(np.logaddexp(0.0, x), "softplus", (a,), lambda g: (g * _sigmoid(x),))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return _make(out, "log", (a,), lambda g: (g / x,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def lgamma(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if (x <= 0).any():
        raise DomainError("lgamma: argument must be strictly positive")
    return _make(special.gammaln(x), "lgamma", (a,), lambda g: (g * special.digamma(x),))


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _make(x * x, "square", (a,), lambda g: (2.0 * g * x,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _make(out, "sqrt", (a,), lambda g: (0.5 * g / out,))


# ---------------------------------------------------------------------------
# reductions

def _expand(g: np.ndarray, shape: tuple, axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.shape
    return _make(np.asarray(a.data.sum(axis=axis)), "sum", (a,),
                 lambda g: (np.array(_expand(g, shape, axis)),))


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    n = a.size if axis is None else shape[axis]
    return _make(np.asarray(a.data.mean(axis=axis)), "mean", (a,),
                 lambda g: (np.array(_expand(g, shape, axis)) / n,))


def l2norm(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.sqrt((x * x).sum(axis=axis))
    out = np.asarray(out)

    def backward(g):
        denom = out if axis is None else np.expand_dims(out, axis)
        gg = g if axis is None else np.expand_dims(g, axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            res = np.where(denom > 0, gg * x / denom, 0.0)
        return (res,)

    return _make(out, "l2norm", (a,), backward)


# ---------------------------------------------------------------------------
# gradient routing

def stop_gradient(a) -> Tensor:
    """Forward identity that contributes no gradient to its argument."""
    a = as_tensor(a)
    return Tensor(a.data)


def straight_through(h_enc, z) -> Tensor:
    """Value of ``z`` whose gradient is passed unchanged to ``h_enc``.

    Equivalent to ``h_enc + stop_gradient(z - h_enc)``; the forward value is
    ``z`` bit for bit rather than the rounded sum.
    """
    h_enc, z = as_tensor(h_enc), as_tensor(z)
    if h_enc.shape != z.shape:
        raise ContractError(f"straight_through: incompatible shapes {h_enc.shape} and {z.shape}")
    return _make(z.data.copy(), "straight_through", (h_enc,), lambda g: (g,))


def parameters_grads(params: Iterable[Tensor]) -> list[np.ndarray]:
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array and, when any input requires a
gradient, records the closure that propagates the output gradient back to
its parents.  :func:`backward` walks the recorded graph in reverse
topological order exactly once per node.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import NonFiniteError

DTYPE = np.float64


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=DTYPE)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (undo numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Dense real tensor with an optional autodiff history."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None, op: str = "leaf",
                 check: bool = True):
        arr = _as_array(data)
        if check and not np.all(np.isfinite(arr)):
            bad = np.argwhere(~np.isfinite(arr))
            where = tuple(int(i) for i in bad[0]) if bad.size else ()
            raise NonFiniteError(f"non-finite value in {op} output at index {where}")
        self.data = arr
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self.name = name

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def from_op(data, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        """Build an op output; the graph edge is kept only if a parent needs it.

        ``backward(g)`` returns one gradient (or None) per parent.
        """
        needs = any(p.requires_grad for p in parents)
        if not needs:
            return Tensor(data, op=op)
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)

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
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, check=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- operators ------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE, copy=True), requires_grad=True, name=name)


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor.from_op(a.data + b.data, (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor.from_op(a.data - b.data, (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return Tensor.from_op(ad * bd, (a, b),
                          lambda g: (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                                     _unbroadcast(g * ad, bd.shape) if b.requires_grad else None),
                          "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(out, (a, b), backward, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    return Tensor.from_op(ad ** exponent, (a,),
                          lambda g: (g * exponent * ad ** (exponent - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(invalid="ignore", divide="ignore"):  # reported by the finiteness check
        out = np.log(ad)
    return Tensor.from_op(out, (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def abs_(a: Tensor) -> Tensor:
    # subgradient 0 at the kink
    s = np.sign(a.data)
    return Tensor.from_op(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor.from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor.from_op(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation of GELU (smooth everywhere)."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return Tensor.from_op(out, (a,), backward, "gelu")


def clamp_min(a: Tensor, lo: float) -> Tensor:
    mask = a.data >= lo
    return Tensor.from_op(np.where(mask, a.data, lo), (a,), lambda g: (g * mask,), "clamp_min")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data >= lo) & (a.data <= hi)
    return Tensor.from_op(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,), "clamp")


# -- reductions and shape ops -------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor.from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor.from_op(np.transpose(a.data, axes), (a,),
                          lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return Tensor.from_op(np.swapaxes(a.data, i, j), (a,),
                          lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return Tensor.from_op(a.data[index], (a,), backward, "getitem")


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather along axis 0 with an integer index array (scatter-add backward)."""
    idx = np.asarray(idx)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor.from_op(a.data[idx], (a,), backward, "take_rows")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                          lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return Tensor.from_op(np.stack([t.data for t in tensors], axis=axis), tensors, backward, "stack")


def pad_axis(a: Tensor, axis: int, before: int, after: int) -> Tensor:
    widths = [(0, 0)] * a.ndim
    widths[axis] = (before, after)
    n = a.shape[axis]

    def backward(g):
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(before, before + n)
        return (g[tuple(sl)],)

    return Tensor.from_op(np.pad(a.data, widths), (a,), backward, "pad")


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul expects operands with ndim >= 2")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(ad @ bd, (a, b), backward, "matmul")


def cross(a: Tensor, b: Tensor) -> Tensor:
    """Cross product along the last axis (length 3)."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        # d(a x b)·g / da = b x g ; / db = g x a
        ga = _unbroadcast(np.cross(bd, g), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.cross(g, ad), bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(np.cross(ad, bd), (a, b), backward, "cross")


def norm(a: Tensor, axis: int = -1, keepdims: bool = True) -> Tensor:
    return sqrt(sum_(a * a, axis=axis, keepdims=keepdims))


def normalize(a: Tensor, axis: int = -1) -> Tensor:
    return a / norm(a, axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(out, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=axis, keepdims=True))
    out = x - lse
    sm = np.exp(out)

    def backward(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return Tensor.from_op(out, (a,), backward, "log_softmax")


def custom(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Register an op whose vector-Jacobian product is supplied by the caller."""
    return Tensor.from_op(data, [as_tensor(p) for p in parents], backward, op)


# -- graph traversal ----------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, int]] = [(root, 0)]
    while stack_:
        node, i = stack_.pop()
        if i == 0:
            if id(node) in seen:
                continue
            seen.add(id(node))
        if i < len(node._parents):
            stack_.append((node, i + 1))
            parent = node._parents[i]
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, 0))
        else:
            order.append(node)
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor] | Sequence[Tensor]):
    """Gradients of a scalar ``loss`` w.r.t. ``params``.

    Returns a dict keyed like ``params`` (names for a mapping, positions for a
    sequence).  Parameters that do not influence the loss get zeros.
    """
    if loss.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    items = list(params.items()) if isinstance(params, Mapping) else list(enumerate(params))
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_topological(loss)):
            g = grads.get(id(node))
            if g is None or node._backward is None:
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
            if node._parents:
                # interior gradients are not needed after propagation
                del grads[id(node)]
    out = {}
    for key, p in items:
        g = grads.get(id(p))
        out[key] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=DTYPE).reshape(p.shape)
    return out


def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-4,
                      indices: Iterable[int] | None = None,
                      kink_key: Callable[[np.ndarray], object] | None = None,
                      analytic: np.ndarray | None = None, atol: float = 1e-8) -> float:
    """Max relative error between backward() and central differences.

    The error of one coordinate is ``|a - n| / (|a| + atol)``.

    ``indices`` restricts the probe to flat coordinates.  ``kink_key`` maps an
    input to a hashable signature of its non-smooth state (e.g. a sort order);
    coordinates whose probes change the signature are skipped.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x0 = np.array(as_tensor(x).data, dtype=DTYPE, copy=True)

    def evaluate(arr: np.ndarray) -> float:
        val = f(Tensor(arr, requires_grad=False))
        v = float(np.asarray(val.data).reshape(()))
        if not np.isfinite(v):
            raise NonFiniteError("function under check returned a non-finite value")
        return v

    if analytic is None:
        leaf = Tensor(x0.copy(), requires_grad=True)
        out = f(leaf)
        if not np.isfinite(out.data).all():
            raise NonFiniteError("function under check returned a non-finite value")
        analytic = backward(out, [leaf])[0]
    analytic = np.asarray(analytic, dtype=DTYPE).ravel()
    base_key = kink_key(x0) if kink_key is not None else None
    flat = x0.ravel()
    coords = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in coords:
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        xp = xp.reshape(x0.shape)
        xm = xm.reshape(x0.shape)
        if kink_key is not None and not (kink_key(xp) == base_key == kink_key(xm)):
            continue
        numeric = (evaluate(xp) - evaluate(xm)) / (2.0 * h)
        err = abs(analytic[i] - numeric) / (abs(analytic[i]) + atol)
        worst = max(worst, err)
    return worst

"""Reverse-mode automatic differentiation over a dynamically recorded graph.

Each :class:`Tensor` holds a float64 numpy value (0-d for scalars) and, for
non-leaf nodes, the parents it was computed from together with a
vector-Jacobian product closure. :func:`backward` walks the graph once in
reverse topological order.

The module-level functions (``sin``, ``cos``, ``stack`` ...) accept either
tensors or plain arrays, so numeric code written against them runs on both
paths: plain arrays stay plain, tensors record onto the tape.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces a non-finite value or gradient."""


class GraphConsumedError(RuntimeError):
    """Raised when backward is called twice on the same graph."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def pairwise_sum0(g: np.ndarray) -> np.ndarray:
    """Sum over axis 0 as a balanced tree of additions."""
    parts = list(g)
    while len(parts) > 1:
        nxt = [parts[i] + parts[i + 1] for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        # inner broadcast axes first, then a pairwise sum over the outermost one:
        # identical batch slices then add up exactly for power-of-two batch sizes
        if extra > 1:
            g = g.sum(axis=tuple(range(1, extra)))
        g = pairwise_sum0(g)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    __slots__ = ("value", "grad", "parents", "vjp", "op", "requires_grad", "_consumed")

    __array_priority__ = 100.0

    def __init__(self, value, requires_grad: bool = False, *, parents=(), vjp=None, op: str = "leaf"):
        self.value = _as_array(value)
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = parents
        self.vjp: Callable | None = vjp
        self.op = op
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._consumed = False

    def __repr__(self) -> str:
        return f"Tensor({self.value!r}, op={self.op})"

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __len__(self) -> int:
        return len(self.value)

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def zero_grad(self) -> None:
        self.grad = None

    # arithmetic -------------------------------------------------------
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
        return _make(-self.value, (self,), lambda g: (-g,), "neg")

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, k):
        return power(self, k)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def _make(value, parents, vjp, op) -> Tensor:
    value = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        if all(np.all(np.isfinite(p.value)) for p in parents):
            raise NonFiniteError(f"{op}: non-finite output from finite inputs")
    if not any(p.requires_grad for p in parents):
        return Tensor(value, op=op)
    return Tensor(value, parents=parents, vjp=vjp, op=op)


def is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# --- binary ops --------------------------------------------------------------


def add(a, b):
    if not (is_tensor(a) or is_tensor(b)):
        return np.add(a, b)
    a, b = lift(a), lift(b)
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    if not (is_tensor(a) or is_tensor(b)):
        return np.subtract(a, b)
    a, b = lift(a), lift(b)
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    if not (is_tensor(a) or is_tensor(b)):
        return np.multiply(a, b)
    a, b = lift(a), lift(b)
    av, bv = a.value, b.value
    return _make(
        av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul"
    )


def div(a, b):
    if not (is_tensor(a) or is_tensor(b)):
        return np.divide(a, b)
    a, b = lift(a), lift(b)
    av, bv = a.value, b.value
    if np.any(bv == 0.0):
        raise NonFiniteError("div: division by zero")
    out = av / bv
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
        "div",
    )


def matmul(a, b):
    if not (is_tensor(a) or is_tensor(b)):
        return np.matmul(a, b)
    a, b = lift(a), lift(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul on the tape expects operands with ndim >= 2")

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _make(np.matmul(av, bv), (a, b), vjp, "matmul")


def arctan2(y, x):
    """Elementwise atan2 in radians."""
    if not (is_tensor(y) or is_tensor(x)):
        return np.arctan2(y, x)
    y, x = lift(y), lift(x)
    yv, xv = y.value, x.value
    r2 = yv * yv + xv * xv
    if np.any(r2 == 0.0):
        raise NonFiniteError("arctan2: undefined derivative at the origin")
    return _make(
        np.arctan2(yv, xv),
        (y, x),
        lambda g: (_unbroadcast(g * xv / r2, yv.shape), _unbroadcast(-g * yv / r2, xv.shape)),
        "arctan2",
    )


def where(mask, a, b):
    """Select ``a`` where ``mask`` holds, else ``b``; ``mask`` is constant."""
    mask = np.asarray(mask, dtype=bool)
    if not (is_tensor(a) or is_tensor(b)):
        return np.where(mask, a, b)
    a, b = lift(a), lift(b)
    sa, sb = a.shape, b.shape
    return _make(
        np.where(mask, a.value, b.value),
        (a, b),
        lambda g: (_unbroadcast(np.where(mask, g, 0.0), sa), _unbroadcast(np.where(mask, 0.0, g), sb)),
        "where",
    )


# --- unary ops ---------------------------------------------------------------


def _unary(x, fwd, dfn, name):
    if not is_tensor(x):
        return fwd(np.asarray(x, dtype=np.float64))
    xv = x.value
    out = fwd(xv)

    def vjp(g):
        return (g * dfn(xv, out),)

    return _make(out, (x,), vjp, name)


def tanh(x):
    return _unary(x, np.tanh, lambda v, o: 1.0 - o * o, "tanh")


def sin(x):
    return _unary(x, np.sin, lambda v, o: np.cos(v), "sin")


def cos(x):
    return _unary(x, np.cos, lambda v, o: -np.sin(v), "cos")


def exp(x):
    return _unary(x, np.exp, lambda v, o: o, "exp")


def sqrt(x):
    v = value_of(x)
    if np.any(v < 0.0):
        raise NonFiniteError("sqrt: negative argument")
    if is_tensor(x) and np.any(v == 0.0):
        raise NonFiniteError("sqrt: infinite derivative at zero")
    return _unary(x, np.sqrt, lambda v, o: 0.5 / o, "sqrt")


def arcsin(x):
    v = value_of(x)
    if np.any(np.abs(v) > 1.0):
        raise NonFiniteError("arcsin: argument outside [-1, 1]")
    if is_tensor(x) and np.any(np.abs(v) == 1.0):
        raise NonFiniteError("arcsin: infinite derivative at +-1")
    return _unary(x, np.arcsin, lambda v, o: 1.0 / np.sqrt(1.0 - v * v), "arcsin")


def absolute(x):
    # subgradient 0 at 0
    return _unary(x, np.abs, lambda v, o: np.sign(v), "abs")


def power(x, k: float):
    if not is_tensor(x):
        return np.power(x, k)
    return _unary(x, lambda v: np.power(v, k), lambda v, o: k * np.power(v, k - 1), f"pow{k}")


# --- structural ops ----------------------------------------------------------


def tsum(x, axis=None):
    if not is_tensor(x):
        return np.sum(x, axis=axis)
    shape = x.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(x.value, axis=axis), (x,), vjp, "sum")


def mean(x, axis=None):
    if not is_tensor(x):
        return np.mean(x, axis=axis)
    n = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis) / float(n)


def _advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(x, idx):
    if not is_tensor(x):
        return np.asarray(x)[idx]
    shape = x.shape
    adv = _advanced(idx)

    def vjp(g):
        out = np.zeros(shape)
        if adv:
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return _make(x.value[idx], (x,), vjp, "getitem")


def take_along_axis(x, idx, axis: int):
    """Gather with an index array; ``idx`` must hold a permutation along ``axis``."""
    idx = np.asarray(idx)
    if not is_tensor(x):
        return np.take_along_axis(np.asarray(x), idx, axis=axis)
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        np.put_along_axis(out, idx, g, axis=axis)
        return (out,)

    return _make(np.take_along_axis(x.value, idx, axis=axis), (x,), vjp, "take")


def reshape(x, shape):
    if not is_tensor(x):
        return np.reshape(x, shape)
    old = x.shape
    return _make(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def swapaxes(x, a1: int, a2: int):
    if not is_tensor(x):
        return np.swapaxes(x, a1, a2)
    return _make(np.swapaxes(x.value, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),), "swapaxes")


def expand_dims(x, axis: int):
    if not is_tensor(x):
        return np.expand_dims(x, axis)
    return reshape(x, np.expand_dims(x.value, axis).shape)


def stack(items: Sequence, axis: int = 0):
    if not any(is_tensor(i) for i in items):
        return np.stack([np.asarray(i, dtype=np.float64) for i in items], axis=axis)
    items = tuple(lift(i) for i in items)
    n = len(items)

    def vjp(g):
        return tuple(np.take(g, k, axis=axis) for k in range(n))

    return _make(np.stack([i.value for i in items], axis=axis), items, vjp, "stack")


def concatenate(items: Sequence, axis: int = 0):
    if not any(is_tensor(i) for i in items):
        return np.concatenate([np.asarray(i, dtype=np.float64) for i in items], axis=axis)
    items = tuple(lift(i) for i in items)
    bounds = np.cumsum([i.shape[axis] for i in items])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([i.value for i in items], axis=axis), items, vjp, "concat")


# --- backward ----------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(output: Tensor) -> None:
    """Accumulate d(output)/d(leaf) into ``leaf.grad`` for every leaf.

    A graph can be differentiated once; a second call raises
    :class:`GraphConsumedError`.
    """
    if output.value.size != 1:
        raise ValueError("backward expects a scalar output")
    if output._consumed:
        raise GraphConsumedError("backward already ran on this graph; rebuild it first")
    order = _topo_order(output)
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.value)}
    for node in reversed(order):
        node._consumed = True
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if not parent.requires_grad:
                continue
            if not np.all(np.isfinite(pg)):
                raise NonFiniteError(f"backward through {node.op}: non-finite gradient")
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def grad(fn: Callable[..., Tensor], params: Iterable[np.ndarray]) -> tuple[float, list[np.ndarray]]:
    """Evaluate ``fn`` on fresh leaves built from ``params``; return value and gradients."""
    leaves = [Tensor(p, requires_grad=True) for p in params]
    out = fn(*leaves)
    backward(out)
    return out.item(), [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value) for leaf in leaves]

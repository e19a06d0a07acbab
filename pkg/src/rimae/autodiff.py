"""Small reverse-mode automatic differentiation engine over float64 arrays.

Forward ops build a DAG of ``Tensor`` nodes; ``backward`` walks it in reverse
topological order and returns a gradient for every reachable leaf that has
``requires_grad`` set. Gradients are returned in a dict rather than stored on
the tensors, so concurrent forward/backward passes over shared parameters
never mutate shared state.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_vjps")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjps: tuple = ()

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, vjps) -> Tensor:
    # constant folding: subgraphs with no trainable inputs carry no tape
    if not any(p.requires_grad for p in parents):
        return Tensor(data)
    out = Tensor(data, requires_grad=True)
    out._parents = tuple(parents)
    out._vjps = tuple(vjps)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _node(
        a.data + b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g, a.data.shape),
            lambda g: _unbroadcast(g, b.data.shape),
        ),
    )


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _node(
        a.data - b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g, a.data.shape),
            lambda g: _unbroadcast(-g, b.data.shape),
        ),
    )


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _node(
        a.data * b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.data.shape),
            lambda g: _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def neg(a) -> Tensor:
    a = _wrap(a)
    return _node(-a.data, (a,), (lambda g: -g,))


def scale(a, factor: float) -> Tensor:
    a = _wrap(a)
    factor = float(factor)
    return _node(a.data * factor, (a,), (lambda g: g * factor,))


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    return _node(
        np.matmul(a.data, b.data),
        (a, b),
        (
            lambda g: _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape),
            lambda g: _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape),
        ),
    )


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.data.shape).copy()

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), (vjp,))


def tmax(a, axis: int) -> Tensor:
    a = _wrap(a)
    idx = a.data.argmax(axis=axis)

    def vjp(g):
        out = np.zeros_like(a.data)
        np.put_along_axis(out, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return out

    return _node(a.data.max(axis=axis), (a,), (vjp,))


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    old = a.data.shape
    return _node(a.data.reshape(shape), (a,), (lambda g: g.reshape(old),))


def broadcast_to(a, shape) -> Tensor:
    a = _wrap(a)
    return _node(
        np.broadcast_to(a.data, shape).copy(),
        (a,),
        (lambda g: _unbroadcast(g, a.data.shape),),
    )


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * parts[i].data.ndim
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: g[sl]

    return _node(
        np.concatenate([p.data for p in parts], axis=axis),
        tuple(parts),
        tuple(make_vjp(i) for i in range(len(parts))),
    )


def gather_rows(a, index) -> Tensor:
    """out[i, ...] = a[index[i, ...], ...]; duplicate indices accumulate."""
    a = _wrap(a)
    index = np.asarray(index)

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return out

    return _node(a.data[index], (a,), (vjp,))


def scatter_rows(a, index, num_rows: int) -> Tensor:
    """Rows of ``a`` placed at unique row indices of a zero output."""
    a = _wrap(a)
    index = np.asarray(index)
    data = np.zeros((num_rows,) + a.data.shape[1:])
    data[index] = a.data
    return _node(data, (a,), (lambda g: g[index],))


def slice_rows(a, start: int, stop: int) -> Tensor:
    a = _wrap(a)

    def vjp(g):
        out = np.zeros_like(a.data)
        out[start:stop] = g
        return out

    return _node(a.data[start:stop].copy(), (a,), (vjp,))


def gelu(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def vjp(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return g * (cdf + x * pdf)

    return _node(x * cdf, (a,), (vjp,))


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    y = ex / ex.sum(axis=axis, keepdims=True)

    def vjp(g):
        return y * (g - (g * y).sum(axis=axis, keepdims=True))

    return _node(y, (a,), (vjp,))


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalization over the last axis with learned gain and bias."""
    a, gain, bias = _wrap(a), _wrap(gain), _wrap(bias)
    x = a.data
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std

    def vjp_x(g):
        gx = g * gain.data
        return inv_std * (
            gx
            - gx.mean(axis=-1, keepdims=True)
            - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        )

    return _node(
        xhat * gain.data + bias.data,
        (a, gain, bias),
        (
            vjp_x,
            lambda g: _unbroadcast(g * xhat, gain.data.shape),
            lambda g: _unbroadcast(g, bias.data.shape),
        ),
    )


def _topo_order(root: Tensor) -> list[Tensor]:
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar root with respect to every trainable leaf.

    Returns a dict keyed by the leaf Tensor objects; the tape itself is left
    untouched, so repeated calls are independent.
    """
    if root.data.size != 1:
        raise ValueError("backward requires a scalar root")
    if not root.requires_grad:
        return {}

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            leaves[node] = g
            continue
        for parent, vjp in zip(node._parents, node._vjps):
            if not parent.requires_grad:
                continue
            contrib = vjp(g)
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + contrib
            else:
                grads[pid] = contrib
    return leaves

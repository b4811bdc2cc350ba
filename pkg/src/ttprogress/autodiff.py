"""Reverse-mode automatic differentiation on dense float64 arrays.

The tape supports nested differentiation: every vector-Jacobian product is
expressed through the same traced primitives, so the backward pass of an
inner gradient can itself be differentiated by an outer backward pass.
That is what lets the meta-training objective differentiate through the
online adaptation update.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from scipy import special

__all__ = [
    "Tensor",
    "tensor",
    "no_grad",
    "grad",
    "finite_diff_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "outer",
    "transpose",
    "tsum",
    "tmean",
    "exp",
    "erf",
    "logistic",
    "gelu",
]

_GRAD_ENABLED = [True]


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


class Tensor:
    """A node in the differentiation graph wrapping a float64 ndarray.

    Values are immutable after construction. ``parents``/``vjps`` describe
    how to push an adjoint back to each parent; both are empty for leaves.
    """

    __slots__ = ("data", "requires_grad", "parents", "vjps")

    def __init__(self, data, requires_grad=False, parents=(), vjps=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.parents = parents
        self.vjps = vjps

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=self.requires_grad)

    def __repr__(self):
        return f"Tensor({self.data!r}, requires_grad={self.requires_grad})"

    # operator sugar; non-Tensor operands are treated as constants
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad=False) -> Tensor:
    """Build a leaf from external data, rejecting non-finite entries."""
    arr = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite entries in tensor input")
    return Tensor(arr, requires_grad=requires_grad)


def _node(data, parents: Sequence[Tensor], vjps: Sequence[Callable]) -> Tensor:
    if _GRAD_ENABLED[-1] and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents), vjps=tuple(vjps))
    return Tensor(data)


def _reduce_to(adj: Tensor, shape) -> Tensor:
    # elementwise ops allow scalar-vs-array broadcasting only
    if adj.shape == shape:
        return adj
    if shape == ():
        return tsum(adj)
    raise ValueError(f"cannot reduce adjoint of shape {adj.shape} to {shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    return _node(
        a.data + b.data,
        (a, b),
        (lambda g: _reduce_to(g, a.shape), lambda g: _reduce_to(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _node(
        a.data - b.data,
        (a, b),
        (lambda g: _reduce_to(g, a.shape), lambda g: _reduce_to(neg(g), b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _node(
        a.data * b.data,
        (a, b),
        (lambda g: _reduce_to(mul(g, b), a.shape), lambda g: _reduce_to(mul(g, a), b.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    return _node(
        a.data / b.data,
        (a, b),
        (
            lambda g: _reduce_to(div(g, b), a.shape),
            lambda g: _reduce_to(neg(div(mul(g, a), mul(b, b))), b.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), (lambda g: neg(g),))


def transpose(a: Tensor) -> Tensor:
    return _node(a.data.T, (a,), (lambda g: transpose(g),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix-matrix, matrix-vector, or vector-vector (dot) product."""
    out = a.data @ b.data
    if a.data.ndim == 2 and b.data.ndim == 1:
        vjps = (lambda g: outer(g, b), lambda g: matmul(transpose(a), g))
    elif a.data.ndim == 2 and b.data.ndim == 2:
        vjps = (lambda g: matmul(g, transpose(b)), lambda g: matmul(transpose(a), g))
    elif a.data.ndim == 1 and b.data.ndim == 1:
        vjps = (lambda g: mul(g, b), lambda g: mul(g, a))
    else:
        raise ValueError(f"unsupported matmul operand ranks {a.data.ndim}, {b.data.ndim}")
    return _node(out, (a, b), vjps)


def outer(a: Tensor, b: Tensor) -> Tensor:
    return _node(
        np.outer(a.data, b.data),
        (a, b),
        (lambda g: matmul(g, b), lambda g: matmul(transpose(g), a)),
    )


def tsum(a: Tensor) -> Tensor:
    return _node(a.data.sum(), (a,), (lambda g: _expand(g, a.shape),))


def _expand(a: Tensor, shape) -> Tensor:
    return _node(np.broadcast_to(a.data, shape).copy(), (a,), (lambda g: tsum(g),))


def tmean(a: Tensor) -> Tensor:
    return tsum(a) * (1.0 / a.data.size)


def exp(a: Tensor) -> Tensor:
    out = _node(np.exp(a.data), (a,), ())
    if out.requires_grad:
        out.vjps = (lambda g: mul(g, out),)
    return out


_ERF_COEF = 2.0 / math.sqrt(math.pi)


def erf(a: Tensor) -> Tensor:
    return _node(
        special.erf(a.data),
        (a,),
        (lambda g: mul(g, mul(Tensor(_ERF_COEF), exp(neg(mul(a, a))))),),
    )


def logistic(a: Tensor) -> Tensor:
    out = _node(special.expit(a.data), (a,), ())
    if out.requires_grad:
        out.vjps = (lambda g: mul(g, mul(out, sub(Tensor(1.0), out))),)
    return out


_INV_SQRT2 = 1.0 / math.sqrt(2.0)


def gelu(a) -> Tensor:
    """Exact GELU x * Phi(x), with Phi the standard normal CDF."""
    a = _wrap(a)
    phi = mul(Tensor(0.5), add(Tensor(1.0), erf(mul(a, Tensor(_INV_SQRT2)))))
    return mul(a, phi)


def _topo_order(root: Tensor) -> list:
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(loss: Tensor, params: Sequence[Tensor], create_graph: bool = False) -> list:
    """Reverse-mode gradients of a scalar loss w.r.t. each param.

    With ``create_graph`` the returned gradients stay connected to the
    graph and can be differentiated again. Parameters unreachable from the
    loss get zero gradients.
    """
    if loss.data.shape != ():
        raise ValueError("grad requires a scalar loss")
    adjoints = {id(loss): Tensor(1.0)}
    if loss.requires_grad:
        order = _topo_order(loss)
        if create_graph:
            _accumulate(order, adjoints)
        else:
            with no_grad():
                _accumulate(order, adjoints)
    out = []
    for p in params:
        g = adjoints.get(id(p))
        if g is None:
            g = Tensor(np.zeros(p.shape))
        out.append(g)
    return out


def _accumulate(order, adjoints):
    for node in reversed(order):
        adj = adjoints.get(id(node))
        if adj is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            if not parent.requires_grad:
                continue
            contrib = vjp(adj)
            prev = adjoints.get(id(parent))
            adjoints[id(parent)] = contrib if prev is None else add(prev, contrib)


def finite_diff_grad(loss_fn: Callable, params: Sequence[np.ndarray], step: float = 1e-5) -> list:
    """Central-difference gradient oracle, one coordinate at a time."""
    params = [np.asarray(p, dtype=np.float64) for p in params]
    grads = []
    for i, p in enumerate(params):
        g = np.zeros_like(p)
        flat = g.reshape(-1)
        pflat = p.reshape(-1)
        for j in range(pflat.size):
            orig = pflat[j]
            bumped = [q.copy() for q in params]
            bumped[i].reshape(-1)[j] = orig + step
            hi = float(loss_fn(bumped))
            bumped[i].reshape(-1)[j] = orig - step
            lo = float(loss_fn(bumped))
            flat[j] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads

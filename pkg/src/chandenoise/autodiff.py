"""Reverse-mode automatic differentiation on dense numpy arrays.

Sized for small convolutional nets: the op set covers exactly what the
residual denoiser and its training loops need (elementwise arithmetic with
broadcasting, 2D matmul, reshape/transpose, relu, reductions, zero-padding
and gather/scatter for im2col convolution).

Every op's VJP is itself built from these ops, so calling backward_pass with
create_graph=True produces gradients that are part of the graph; a second
backward through them yields exact higher-order derivatives (used by the
second-order meta-learning mode).
"""

from __future__ import annotations

from contextlib import contextmanager, nullcontext

import numpy as np

_GRAD_ENABLED = [True]


@contextmanager
def no_grad():
    """Disable graph recording inside the context."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def _recording() -> bool:
    return _GRAD_ENABLED[-1]


class Tensor:
    """A numpy array plus the backward closure that produced it."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _vjp=None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def backward(self, create_graph: bool = False):
        """Accumulate d(self)/d(leaf) into .grad of every reachable leaf."""
        if self.size != 1:
            raise ValueError("backward() requires a scalar output")
        grads = backward_pass(self, wrt=None, create_graph=create_graph)
        for node, g in grads:
            if node._vjp is None and node.requires_grad:
                node.grad = g if node.grad is None else add(node.grad, g)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)


def _coerce(value, like: Tensor) -> Tensor:
    """Wrap scalars/arrays as constant Tensors matching `like`'s dtype."""
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _make(data, parents, vjp) -> Tensor:
    if _recording() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _vjp=vjp)
    return Tensor(data)


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    """Sum `g` down to `shape`: the adjoint of numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)

    return _make(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    out = a.data * b.data

    def vjp(g):
        ga = _unbroadcast(mul(g, b), a.shape) if a.requires_grad else None
        gb = _unbroadcast(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    def vjp(g):
        return (neg(g),)

    return _make(-a.data, (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul supports 2-D operands only")
    out = a.data @ b.data

    def vjp(g):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape

    def vjp(g):
        return (reshape(g, old),)

    return _make(a.data.reshape(shape), (a,), vjp)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (transpose(g, inverse),)

    return _make(a.data.transpose(axes), (a,), vjp)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    in_shape = a.shape
    if axis is None:
        reduced = tuple(range(a.ndim))
    elif isinstance(axis, int):
        reduced = (axis % a.ndim,)
    else:
        reduced = tuple(ax % a.ndim for ax in axis)
    kept_shape = tuple(1 if i in reduced else s for i, s in enumerate(in_shape))

    def vjp(g):
        if not keepdims:
            g = reshape(g, kept_shape)
        return (broadcast_to(g, in_shape),)

    return _make(out, (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    total = tsum(a, axis=axis, keepdims=keepdims)
    return mul(total, float(total.size / a.size))


def broadcast_to(a: Tensor, shape) -> Tensor:
    in_shape = a.shape

    def vjp(g):
        return (_unbroadcast(g, in_shape),)

    return _make(np.broadcast_to(a.data, shape).copy(), (a,), vjp)


def relu(a: Tensor) -> Tensor:
    mask = Tensor((a.data > 0).astype(a.dtype))

    def vjp(g):
        return (mul(g, mask),)

    return _make(a.data * mask.data, (a,), vjp)


def pad2d(a: Tensor, pad: int) -> Tensor:
    """Zero-pad the last two axes by `pad` on each side."""
    width = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
    out = np.pad(a.data, width)

    def vjp(g):
        return (crop2d(g, pad),)

    return _make(out, (a,), vjp)


def crop2d(a: Tensor, pad: int) -> Tensor:
    out = a.data[..., pad:-pad, pad:-pad]

    def vjp(g):
        return (pad2d(g, pad),)

    return _make(out.copy(), (a,), vjp)


def take(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather from the flattened tensor; the im2col workhorse."""
    n = a.size
    out = a.data.reshape(-1)[idx]
    in_shape = a.shape

    def vjp(g):
        return (reshape(scatter_add(g, idx, n), in_shape),)

    return _make(out, (a,), vjp)


def scatter_add(g: Tensor, idx: np.ndarray, size: int) -> Tensor:
    out = np.bincount(idx.ravel(), weights=g.data.ravel(), minlength=size)
    out = out.astype(g.dtype, copy=False)

    def vjp(gg):
        return (take(gg, idx),)

    return _make(out, (g,), vjp)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order  # inputs before outputs


def backward_pass(root: Tensor, wrt: list[Tensor] | None = None,
                  create_graph: bool = False, grad_root: Tensor | None = None):
    """Reverse-mode sweep from `root`.

    With wrt given, returns the gradient Tensor for each entry (zeros if the
    entry is unreachable). Otherwise returns [(node, grad)] for every node
    that received a gradient. With create_graph=True the returned gradients
    are themselves differentiable.
    """
    if grad_root is None:
        grad_root = Tensor(np.ones_like(root.data))
    grads: dict[int, Tensor] = {id(root): grad_root}
    keep: dict[int, Tensor] = {id(root): root}
    ctx = nullcontext() if create_graph else no_grad()
    with ctx:
        for node in reversed(_topo_order(root)):
            g = grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = add(grads[id(parent)], pg)
                else:
                    grads[id(parent)] = pg
                    keep[id(parent)] = parent
    if wrt is None:
        return [(keep[i], g) for i, g in grads.items()]
    out = []
    for w in wrt:
        g = grads.get(id(w))
        out.append(g if g is not None else Tensor(np.zeros_like(w.data)))
    return out


def grad(output: Tensor, wrt: list[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradient of a scalar output w.r.t. the given tensors."""
    if output.size != 1:
        raise ValueError("grad() requires a scalar output")
    return backward_pass(output, wrt=wrt, create_graph=create_graph)

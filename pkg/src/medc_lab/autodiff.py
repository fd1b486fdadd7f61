"""Small reverse-mode autodiff over numpy arrays.

Only the operations needed by the actor-critic (dense/conv layers, ReLU,
log-softmax, the clipped PPO objective and cross-entropy) are provided.
Everything is float64.
"""
from __future__ import annotations

import numpy as np


class AutodiffError(RuntimeError):
    pass


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """An array plus, when recorded, the closure that pushes gradients to its parents."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self) -> None:
        if not self.requires_grad:
            raise AutodiffError("backward() called on a tensor that was not recorded")
        if self.data.size != 1:
            raise AutodiffError(f"backward() needs a scalar, got shape {self.data.shape}")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
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

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
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
        return mul(self, 1.0 / _as_array(other)) if not isinstance(other, Tensor) else div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(x, requires_grad: bool = False) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=requires_grad)


def _node(data, parents, backward) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def square(a) -> Tensor:
    a = tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def exp(a) -> Tensor:
    a = tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = tensor(a)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(a.data.sum(axis=axis), (a,), backward)


def mean(a, axis=None) -> Tensor:
    a = tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = tensor(a), tensor(b)
    pick_a = a.data <= b.data
    return _node(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def clip(a, lo: float, hi: float) -> Tensor:
    a = tensor(a)
    inside = (a.data > lo) & (a.data < hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def log_softmax(a) -> Tensor:
    """Log-softmax over the last axis."""
    a = tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    soft = np.exp(out)
    return _node(out, (a,), lambda g: (g - soft * g.sum(axis=-1, keepdims=True),))


def pick(a, index: np.ndarray) -> Tensor:
    """Row-wise gather: ``out[i] = a[i, index[i]]`` for a 2-D ``a``."""
    a = tensor(a)
    rows = np.arange(a.shape[0])
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(a.data)
        full[rows, index] = g
        return (full,)

    return _node(a.data[rows, index], (a,), backward)


def transpose(a, axes) -> Tensor:
    a = tensor(a)
    inverse = np.argsort(axes)
    return _node(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inverse),))


def conv2d_cnhw(x, w, b, stride: int = 1) -> Tensor:
    """Valid (unpadded) 2-D cross-correlation in channel-major layout.

    x: (C, N, H, W), w: (F, C, k, k), b: (F,). Returns (F, N, OH, OW).
    Keeping channels outermost lets the im2col matrix be filled with plain
    strided slice copies and the output come straight out of one matmul.
    """
    x, w, b = tensor(x), tensor(w), tensor(b)
    c, n, h, wd = x.shape
    f, wc, k, k2 = w.shape
    if wc != c or k != k2:
        raise AutodiffError(f"conv2d weight {w.shape} incompatible with input channels {c}")
    if k > h or k > wd:
        raise AutodiffError(f"kernel {k} larger than input {h}x{wd}")
    oh = (h - k) // stride + 1
    ow = (wd - k) // stride + 1
    cols = np.empty((c, k, k, n, oh, ow))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = x.data[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    cols = cols.reshape(c * k * k, n * oh * ow)
    wmat = w.data.reshape(f, c * k * k)
    out = (wmat @ cols).reshape(f, n, oh, ow)
    out += b.data[:, None, None, None]

    def backward(g):
        gx = gw = gb = None
        gmat = g.reshape(f, n * oh * ow)
        if w.requires_grad:
            gw = (gmat @ cols.T).reshape(w.shape)
        if b.requires_grad:
            gb = gmat.sum(axis=1)
        if x.requires_grad:
            gcols = (wmat.T @ gmat).reshape(c, k, k, n, oh, ow)
            gx = np.zeros_like(x.data)
            for i in range(k):
                for j in range(k):
                    gx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gcols[:, i, j]
        return gx, gw, gb

    return _node(out, (x, w, b), backward)


def conv2d(x, w, b, stride: int = 1) -> Tensor:
    """Valid 2-D cross-correlation. x: (N, C, H, W) -> (N, F, OH, OW)."""
    out = conv2d_cnhw(transpose(x, (1, 0, 2, 3)), w, b, stride)
    return transpose(out, (1, 0, 2, 3))

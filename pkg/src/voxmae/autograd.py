"""Minimal reverse-mode automatic differentiation over numpy arrays.

Each operation returns a :class:`Tensor` that remembers its parents and a
closure propagating the output gradient back to them.  Calling
:meth:`Tensor.backward` on a scalar runs the closures in reverse
topological order.  Every node keeps its gradient after the pass, so
intermediate activations (needed for Grad-CAM) can be read off directly.

Only the operations the vision transformer, its heads and losses need are
provided; several (layer norm, softmax, BCE) are fused for stability and
speed.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import InvalidArgument

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, data, parents=(), backward_fn=None, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, name={self.name!r})"

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise InvalidArgument(
                    f"backward() needs a scalar output, got shape {self.data.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        self._accumulate(grad)
        for node in reversed(order):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)


def _topological_order(root):
    order, seen = [], set()
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


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return Tensor(arr)


def parameter(array, name=None):
    """Leaf tensor that collects a gradient."""
    return Tensor(array, requires_grad=True, name=name)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    ndim_extra = g.ndim - len(shape)
    if ndim_extra > 0:
        g = g.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _coerce(a, b):
    ta = a if isinstance(a, Tensor) else None
    tb = b if isinstance(b, Tensor) else None
    ref = ta if ta is not None else tb
    if ta is None:
        ta = Tensor(np.asarray(a, dtype=ref.dtype))
    if tb is None:
        tb = Tensor(np.asarray(b, dtype=ref.dtype))
    return ta, tb


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = _coerce(a, b)
    out = Tensor(a.data + b.data, (a, b))

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    out.backward_fn = backward
    return out


def sub(a, b):
    a, b = _coerce(a, b)
    out = Tensor(a.data - b.data, (a, b))

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    out.backward_fn = backward
    return out


def mul(a, b):
    a, b = _coerce(a, b)
    out = Tensor(a.data * b.data, (a, b))

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    out.backward_fn = backward
    return out


def square(a):
    out = Tensor(a.data * a.data, (a,))
    out.backward_fn = lambda g: a._accumulate(2.0 * a.data * g)
    return out


def sigmoid(a):
    s = _sigmoid(a.data)
    out = Tensor(s, (a,))
    out.backward_fn = lambda g: a._accumulate(g * s * (1.0 - s))
    return out


def _sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gelu(a):
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    out = Tensor(x * cdf, (a,))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        a._accumulate(g * (cdf + x * pdf))

    out.backward_fn = backward
    return out


def relu(a):
    mask = a.data > 0
    out = Tensor(a.data * mask, (a,))
    out.backward_fn = lambda g: a._accumulate(g * mask)
    return out


def leaky_relu(a, slope=0.01):
    scale = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    out = Tensor(a.data * scale, (a,))
    out.backward_fn = lambda g: a._accumulate(g * scale)
    return out


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a, b):
    a, b = _coerce(a, b)
    out = Tensor(a.data @ b.data, (a, b))

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    out.backward_fn = backward
    return out


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with ``weight`` stored as (in, out).

    Fused so the weight gradient is a single 2-D product over all leading
    axes instead of a batched matmul followed by a reduction.
    """
    parents = (x, weight) if bias is None else (x, weight, bias)
    y = x.data @ weight.data
    if bias is not None:
        y = y + bias.data
    out = Tensor(y, parents)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data.T)
        if weight.requires_grad:
            weight._accumulate(x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    out.backward_fn = backward
    return out


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape), (a,))
    out.backward_fn = lambda g: a._accumulate(g.reshape(a.shape))
    return out


def transpose(a, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(a.data.transpose(axes), (a,))
    out.backward_fn = lambda g: a._accumulate(g.transpose(inverse))
    return out


def getitem(a, index):
    out = Tensor(a.data[index], (a,))

    basic = all(isinstance(i, (slice, int, type(Ellipsis))) for i in
                (index if isinstance(index, tuple) else (index,)))

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        a._accumulate(full)

    out.backward_fn = backward
    return out


def gather_rows(a, index):
    """``out[b, i] = a[b, index[b, i]]`` for a (B, N, D) tensor."""
    index = np.asarray(index)
    rows = np.arange(a.shape[0])[:, None]
    out = Tensor(a.data[rows, index], (a,))

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, index), g)
        a._accumulate(full)

    out.backward_fn = backward
    return out


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, sizes, axis=axis)):
            t._accumulate(piece)

    out.backward_fn = backward
    return out


def sum_(a, axis=None, keepdims=False):
    out = Tensor(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    out.backward_fn = backward
    return out


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    out = Tensor(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g / n, a.shape))

    out.backward_fn = backward
    return out


# ---------------------------------------------------------------------------
# fused normalisation / attention pieces


def layer_norm(x, gamma, beta, eps=1e-6):
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data, (x, gamma, beta))

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            x._accumulate(inv * (gx - gx.mean(axis=-1, keepdims=True)
                                 - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    out.backward_fn = backward
    return out


def batch_norm(x, gamma, beta, eps=1e-5):
    """Training-mode batch norm over axis 0 of a (B, F) tensor.

    Returns the output tensor plus the batch mean and (biased) variance so
    the caller can update running statistics.
    """
    mu = x.data.mean(axis=0)
    xc = x.data - mu
    var = (xc * xc).mean(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data, (x, gamma, beta))

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            x._accumulate(inv * (gx - gx.mean(axis=0) - xhat * (gx * xhat).mean(axis=0)))

    out.backward_fn = backward
    return out, mu, var


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s, (x,))

    def backward(g):
        x._accumulate(s * (g - (g * s).sum(axis=axis, keepdims=True)))

    out.backward_fn = backward
    return out


def _softplus(z):
    return np.logaddexp(0.0, z)


def bce_with_logits(logits, labels, pos_weight=1.0):
    """Elementwise ``-(w*y*log s(z) + (1-y)*log(1-s(z)))`` from logits."""
    z = logits.data
    y = np.asarray(labels, dtype=z.dtype)
    w = np.asarray(pos_weight, dtype=z.dtype)
    loss = w * y * _softplus(-z) + (1.0 - y) * _softplus(z)
    out = Tensor(loss, (logits,))

    def backward(g):
        s = _sigmoid(z)
        logits._accumulate(g * (w * y * (s - 1.0) + (1.0 - y) * s))

    out.backward_fn = backward
    return out

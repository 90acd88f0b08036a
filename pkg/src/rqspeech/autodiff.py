"""Minimal reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray and records the operation that produced it; calling
``backward`` on a scalar result walks the tape in reverse topological order and
accumulates gradients into every Tensor created with ``requires_grad=True``.
Gradients are exact for the recorded computation graph, which is what the
finite-difference test suite checks.

The op set is intentionally small: just what the encoder, losses, and CTC
recursion need. All ops preserve dtype, so the same graph runs in float32 for
training and float64 for gradient verification.
"""

from __future__ import annotations

import contextlib

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (inference and finite-difference evaluations)."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.data)
        # iterative DFS: CTC graphs grow linearly with frame count and would
        # overflow the recursion limit on long utterances
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(_needs_grad(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# elementwise -------------------------------------------------------------

def add(a, b):
    # python scalars stay weak so float32 graphs are not promoted to float64
    if isinstance(b, (int, float)):
        a = as_tensor(a)
        b = float(b)
        return _make(a.data + b, (a,), lambda g: (g,))
    if isinstance(a, (int, float)):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    na, nb = _needs_grad(a), _needs_grad(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape) if na else None,
                            _unbroadcast(g, b.data.shape) if nb else None))


def mul(a, b):
    if isinstance(b, (int, float)):
        a = as_tensor(a)
        b = float(b)
        return _make(a.data * b, (a,), lambda g: (g * b,))
    if isinstance(a, (int, float)):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    na, nb = _needs_grad(a), _needs_grad(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.data.shape) if na else None,
                            _unbroadcast(g * a.data, b.data.shape) if nb else None))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0).astype(a.data.dtype), (a,),
                 lambda g: (g * mask,))


def sigmoid(a):
    a = as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-a.data))
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a):
    a = as_tensor(a)
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def rsqrt(a):
    a = as_tensor(a)
    y = 1.0 / np.sqrt(a.data)
    return _make(y, (a,), lambda g: (g * (-0.5) * y / a.data,))


def swish(a):
    return mul(a, sigmoid(a))


# shape and indexing ------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes):
    a = as_tensor(a)
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def getitem(a, idx):
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _make(a.data[idx], (a,), backward)


def pad_time(a, before, after, value=0.0):
    """Pad axis 1 of a (B, T, C) tensor with a constant."""
    a = as_tensor(a)
    widths = ((0, 0), (before, after), (0, 0))
    data = np.pad(a.data, widths, constant_values=value)
    t = a.data.shape[1]
    return _make(data, (a,), lambda g: (g[:, before: before + t],))


def pad1d(a, before, after, value=0.0):
    """Pad a 1-D tensor with a constant (used by the CTC recursion shifts)."""
    a = as_tensor(a)
    data = np.pad(a.data, (before, after), constant_values=value)
    n = a.data.shape[0]
    return _make(data, (a,), lambda g: (g[before: before + n],))


def take_rows(a, idx):
    """Select rows of a 2-D tensor by integer index; backward scatter-adds."""
    a = as_tensor(a)
    idx = np.asarray(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), backward)


def take_last_axis(a, idx):
    """Gather along the last axis with an integer index array (broadcastable)."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    idx_full = np.broadcast_to(idx, a.data.shape[:-1] + (idx.shape[-1],))

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, _grid_indices(a.data.shape[:-1]) + (idx_full,), g)
        return (full,)

    return _make(np.take_along_axis(a.data, idx_full, axis=-1), (a,), backward)


def _grid_indices(shape):
    """Open index grids for the leading axes of a gather target."""
    n = len(shape)
    out = []
    for i, s in enumerate(shape):
        dims = [1] * (n + 1)
        dims[i] = s
        out.append(np.arange(s).reshape(dims))
    return tuple(out)


def where_const(cond, const_value, a):
    """Elementwise select between a constant and a tensor: cond ? const : a."""
    a = as_tensor(a)
    cond = np.asarray(cond, dtype=bool)
    data = np.where(cond, np.asarray(const_value, dtype=a.data.dtype), a.data)
    return _make(data, (a,), lambda g: (np.where(cond, 0.0, g),))


# reductions ---------------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        count = a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


# linear algebra -----------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    na, nb = _needs_grad(a), _needs_grad(b)

    def backward(g):
        ga = gb = None
        if na:
            ga = _unbroadcast_matmul(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        if nb:
            gb = _unbroadcast_matmul(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return (ga, gb)

    return _make(a.data @ b.data, (a, b), backward)


def _unbroadcast_matmul(g, shape):
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i in range(len(shape) - 2) if shape[i] == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def linear(x, w, b):
    """Fused x @ w + b for a 2-D weight and 1-D bias."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    nx, nw, nb = _needs_grad(x), _needs_grad(w), _needs_grad(b)

    def backward(g):
        gx = g @ w.data.T if nx else None
        gw = None
        if nw:
            g2 = g.reshape(-1, g.shape[-1])
            x2 = x.data.reshape(-1, x.data.shape[-1])
            gw = x2.T @ g2
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if nb else None
        return (gx, gw, gb)

    return _make(x.data @ w.data + b.data, (x, w, b), backward)


def unfold_time(a, kernel: int, stride: int):
    """Sliding windows over axis 1: (B, T, C) -> (B, T_out, K, C)."""
    a = as_tensor(a)
    b, t, c = a.data.shape
    t_out = (t - kernel) // stride + 1
    s0, s1, s2 = a.data.strides
    windows = np.lib.stride_tricks.as_strided(
        a.data, shape=(b, t_out, kernel, c), strides=(s0, s1 * stride, s1, s2)).copy()

    def backward(g):
        full = np.zeros_like(a.data)
        for k in range(kernel):
            full[:, k: k + stride * t_out: stride] += g[:, :, k]
        return (full,)

    return _make(windows, (a,), backward)


# softmax family -----------------------------------------------------------

def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _make(y, (a,), backward)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = a.data - m
    e = np.exp(shifted)
    denom = e.sum(axis=axis, keepdims=True)
    y = shifted - np.log(denom)
    probs = e / denom  # cached for the backward pass

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(y, (a,), backward)


def cross_entropy_mean(logits, labels):
    """Mean of -log softmax(logits)[label] over all leading positions.

    ``logits`` is (..., V), ``labels`` integer with the leading shape; one
    fused op so the softmax probabilities are shared with the backward pass.
    """
    a = as_tensor(logits)
    labels = np.asarray(labels)
    if labels.shape != a.data.shape[:-1]:
        raise ValueError(f"labels shape {labels.shape} does not match logits "
                         f"{a.data.shape[:-1]}")
    m = np.max(a.data, axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    denom = e.sum(axis=-1, keepdims=True)
    lse = np.log(denom) + m
    chosen = np.take_along_axis(a.data, labels[..., None], axis=-1)
    count = labels.size
    out = np.asarray((lse - chosen).sum() / count, dtype=a.data.dtype)
    vocab = a.data.shape[-1]

    def backward(g):
        grad = (e / denom).reshape(-1, vocab)
        grad[np.arange(count), labels.reshape(-1)] -= 1.0
        grad *= float(g) / count
        return (grad.reshape(a.data.shape),)

    return _make(out, (a,), backward)


def logaddexp(a, b):
    """Stable log(exp(a) + exp(b)); gradients vanish on -inf branches."""
    a, b = as_tensor(a), as_tensor(b)
    y = np.logaddexp(a.data, b.data)

    def backward(g):
        with np.errstate(invalid="ignore"):
            wa = np.where(np.isneginf(y), 0.0, np.exp(a.data - y))
            wb = np.where(np.isneginf(y), 0.0, np.exp(b.data - y))
        return (_unbroadcast(g * wa, a.data.shape), _unbroadcast(g * wb, b.data.shape))

    return _make(y, (a, b), backward)


# composite helpers --------------------------------------------------------

def layer_norm(x, gamma, beta, eps=1e-5):
    """Fused layer normalization over the last axis."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    norm = centered * inv
    out = norm * gamma.data + beta.data
    nx, ng, nb = _needs_grad(x), _needs_grad(gamma), _needs_grad(beta)

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gx = ggamma = gbeta = None
        if ng:
            ggamma = (g * norm).sum(axis=lead)
        if nb:
            gbeta = g.sum(axis=lead)
        if nx:
            gy = g * gamma.data
            gx = inv * (gy - gy.mean(axis=-1, keepdims=True)
                        - norm * (gy * norm).mean(axis=-1, keepdims=True))
        return (gx, ggamma, gbeta)

    return _make(out, (x, gamma, beta), backward)


def dropout(x, prob: float, rng: np.random.Generator):
    """Inverted dropout; identity when prob == 0."""
    if prob <= 0.0:
        return x
    keep = (rng.random(x.data.shape) >= prob).astype(x.data.dtype)
    return mul(x, keep / (1.0 - prob))

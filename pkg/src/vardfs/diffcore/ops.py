"""Differentiable primitives.

Each op computes its forward value with numpy and, when any input requires
gradients, records a closure mapping the output gradient to input gradients.
Broadcasting follows numpy rules; gradients are summed back to input shapes.
"""

import numpy as np

from vardfs.diffcore.tensor import Tensor, as_tensor
from vardfs.errors import DegenerateError, DomainError, ShapeError

# exp overflows float64 just above this
_EXP_LIMIT = 709.0


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a, b, opname):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return Tensor._make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return Tensor._make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("div: zero divisor")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), bw)


def scale(a, c):
    """Multiply by a Python scalar constant."""
    a = as_tensor(a)
    c = float(c)
    return Tensor._make(a.data * c, (a,), lambda g: (g * c,))


def maximum(a, b):
    """Elementwise max. On ties the gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "maximum")
    pick_a = a.data >= b.data

    def bw(g):
        ga = _unbroadcast(np.where(pick_a, g, 0.0), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.where(pick_a, 0.0, g), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(np.where(pick_a, a.data, b.data), (a, b), bw)


def relu(a):
    a = as_tensor(a)
    pos = a.data > 0
    return Tensor._make(np.where(pos, a.data, 0.0), (a,), lambda g: (np.where(pos, g, 0.0),))


def exp(a):
    a = as_tensor(a)
    if np.any(a.data > _EXP_LIMIT):
        raise DomainError(f"exp: argument {a.data.max():.6g} overflows float64")
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: nonpositive argument")
    return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sin(a):
    a = as_tensor(a)
    return Tensor._make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def matmul(a, b):
    """Batched matrix product ``a @ b`` with numpy broadcasting over batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} differ") from None
    out = a.data @ b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                # fold every batch dim into rows: one large GEMM instead of many small ones
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor._make(out, (a, b), bw)


def linear(x, weight, bias=None):
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def sum(a, axis=None, keepdims=False):  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._make(out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return Tensor._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def getitem(a, index):
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._make(a.data[index], (a,), bw)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(out, tuple(tensors), bw)


def _row_check(valid, what):
    if not np.all(valid.any(axis=-1)):
        raise DegenerateError(f"{what}: a row has no valid entries")


def masked_softmax(logits, valid=None, axis=-1):
    """Softmax over the last axis restricted to ``valid`` entries.

    Invalid entries come out as exact zeros and receive zero gradient, whatever
    value (even -inf) the logits hold there.
    """
    logits = as_tensor(logits)
    if axis not in (-1, logits.ndim - 1):
        raise ValueError("masked_softmax works on the last axis")
    x = logits.data
    if valid is None:
        valid = np.ones(x.shape, dtype=bool)
    else:
        valid = np.broadcast_to(np.asarray(valid, dtype=bool), x.shape)
        _row_check(valid, "masked_softmax")
    z = np.where(valid, x, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(valid, np.exp(z), 0.0)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor._make(out, (logits,), bw)


def softmax(logits):
    return masked_softmax(logits)


def log_softmax(logits):
    logits = as_tensor(logits)
    x = logits.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def bw(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return Tensor._make(out, (logits,), bw)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [batch, K] logits, got {logits.shape}")
    b, k = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"cross_entropy: labels shape {labels.shape} vs logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"cross_entropy: label out of range [0, {k})")
    rows = np.arange(b)
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = np.mean(lse - shifted[rows, labels])

    def bw(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / b),)

    return Tensor._make(np.asarray(loss), (logits,), bw)


def mean_pool(tokens, weights):
    """Weighted mean over the set axis: sum_i w_i t_i / sum_i w_i.

    ``tokens`` is [b, n, h], ``weights`` is [b, n]; both may carry gradients.
    """
    tokens, weights = as_tensor(tokens), as_tensor(weights)
    if tokens.ndim != 3 or weights.shape != tokens.shape[:2]:
        raise ShapeError(f"mean_pool: tokens {tokens.shape} vs weights {weights.shape}")
    w = weights.data
    if np.any(w < 0):
        raise DomainError("mean_pool: negative weight")
    total = w.sum(axis=1)
    if np.any(total <= 0):
        raise DegenerateError("mean_pool: a row has zero total weight")
    t = tokens.data
    out = np.einsum("bn,bnh->bh", w, t) / total[:, None]

    def bw(g):
        gt = gw = None
        if tokens.requires_grad:
            gt = (w / total[:, None])[:, :, None] * g[:, None, :]
        if weights.requires_grad:
            gw = np.einsum("bnh,bh->bn", t - out[:, None, :], g) / total[:, None]
        return gt, gw

    return Tensor._make(out, (tokens, weights), bw)


def layer_norm(x, gamma, beta, eps=1e-5):
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    h = x.shape[-1]

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv / h * (h * gh - gh.sum(-1, keepdims=True)
                            - xhat * (gh * xhat).sum(-1, keepdims=True))
        gg = _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None
        gb = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        return gx, gg, gb

    return Tensor._make(xhat * gamma.data + beta.data, (x, gamma, beta), bw)

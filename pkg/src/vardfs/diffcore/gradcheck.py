"""Central finite-difference gradient checking."""

import numpy as np

from vardfs.diffcore.tensor import backward


def numerical_grad(fn, tensor, h=1e-4):
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``tensor``."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn().data)
        flat[i] = orig - h
        down = float(fn().data)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic, numeric, floor=1e-8):
    """Max abs deviation scaled by the larger gradient magnitude of the pair."""
    scale_ = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale_)


def check_gradients(fn, tensors, h=1e-4):
    """Compare tape gradients of scalar ``fn()`` with finite differences.

    Returns the worst relative error over ``tensors``.
    """
    for t in tensors:
        t.grad = None
    backward(fn(), inputs=tensors)
    worst = 0.0
    for t in tensors:
        analytic = t.grad.copy()
        worst = max(worst, relative_error(analytic, numerical_grad(fn, t, h)))
    return worst

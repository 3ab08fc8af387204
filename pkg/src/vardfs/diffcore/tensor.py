"""Dense float64 tensors with a dynamic reverse-mode tape."""

import contextlib
import itertools
import threading

import numpy as np

from vardfs.errors import RankError

_node_ids = itertools.count()
_mode = threading.local()


def grad_enabled():
    return getattr(_mode, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Skip recording within this block (per thread)."""
    prev = grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


class Tensor:
    """A float64 array that optionally records how it was computed.

    Every tensor gets a creation id from a global counter. Because a node can
    only be built from tensors that already exist, sorting the reachable graph
    by id gives a valid topological order; that sorted list is the tape.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self._id = next(_node_ids)
        self.name = name

    @classmethod
    def _make(cls, data, parents, backward):
        """Create an op output, recording it only if some parent needs gradients."""
        out = cls(data)
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

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
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    # operator sugar, the ops live in vardfs.diffcore.ops
    def __add__(self, other):
        from vardfs.diffcore import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from vardfs.diffcore import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from vardfs.diffcore import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from vardfs.diffcore import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from vardfs.diffcore import ops
        return ops.div(self, other)

    def __neg__(self):
        from vardfs.diffcore import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from vardfs.diffcore import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from vardfs.diffcore import ops
        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        from vardfs.diffcore import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from vardfs.diffcore import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from vardfs.diffcore import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from vardfs.diffcore import ops
        return ops.transpose(self, axes or None)

    def backward(self, inputs=None):
        backward(self, inputs=inputs)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def tape(root):
    """Return the nodes reachable from ``root`` in topological order."""
    seen = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node._id in seen:
            continue
        seen[node._id] = node
        stack.extend(p for p in node._parents if p.requires_grad and p._id not in seen)
    return [seen[i] for i in sorted(seen)]


def backward(loss, inputs=None):
    """Populate ``.grad`` on every leaf that ``loss`` depends on.

    Gradients accumulate into existing ``.grad`` arrays, as in most tape
    frameworks, so call ``zero_grad`` between steps. Leaves listed in
    ``inputs`` that the loss does not depend on get a zero gradient.
    """
    if loss.data.size != 1:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        nodes = tape(loss)
        grads = {loss._id: np.ones_like(loss.data)}
        for node in reversed(nodes):
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._id in grads:
                    grads[parent._id] = grads[parent._id] + pg
                else:
                    grads[parent._id] = pg
    for leaf in inputs or ():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)

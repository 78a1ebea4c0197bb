"""Reverse-mode autodiff over numpy arrays.

A ``Tensor`` wraps an ndarray plus an optional gradient. Operations (see
``functional``) build a DAG by attaching parent links and a backward closure to
each result; ``Tensor.backward()`` topologically sorts the graph and pulls
gradients from a scalar loss back to every tensor with ``requires_grad``.

Tensors are float32 by default. All ops are dtype-generic (float64 graphs are
used by the finite-difference checks), and nothing here ever mutates an input
array in place.
"""

import numpy as np

from ..errors import ContractViolation

_FLOATS = (np.float32, np.float64)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap ndarrays or scalars, not Tensors")
        was_array = isinstance(data, (np.ndarray, np.generic))
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOATS or not was_array:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- basic introspection ------------------------------------------------

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

    def item(self):
        return float(self.data)

    def numpy(self):
        """The underlying array (no copy). Treat as read-only."""
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, grad={self.requires_grad})"

    # -- graph machinery ----------------------------------------------------

    def _attach(self, parents, backward):
        """Record parents + backward closure (only called when grads needed)."""
        self._parents = tuple(parents)
        self._backward = backward
        self.requires_grad = True
        return self

    def _accum(self, g):
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad = self.grad + g

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Backprop from a scalar. Raises ContractViolation on non-scalar calls."""
        if self.data.size != 1:
            raise ContractViolation(
                f"backward() requires a scalar loss, got shape {self.shape}"
            )
        # Iterative postorder: recursion depth is unbounded on long scans.
        topo = []
        seen = set()
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
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar (delegates to functional) ----------------------------

    def __add__(self, other):
        from . import functional as F
        return F.addc(self, other) if isinstance(other, (int, float)) else F.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import functional as F
        return F.scale(self, other) if isinstance(other, (int, float)) else F.mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        from . import functional as F
        if isinstance(other, (int, float)):
            return F.addc(self, -other)
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.addc(F.neg(self), other)

    def __neg__(self):
        from . import functional as F
        return F.neg(self)

    def __truediv__(self, other):
        from . import functional as F
        if isinstance(other, (int, float)):
            return F.scale(self, 1.0 / other)
        return F.div(self, other)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def __pow__(self, p):
        from . import functional as F
        return F.pow_const(self, float(p))

    def sum(self, axis=None, keepdims=False):
        from . import functional as F
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        from . import functional as F
        return F.reshape(self, shape)

    def transpose(self, axes):
        from . import functional as F
        return F.transpose(self, axes)


def as_tensor(x, dtype=None):
    """Pass Tensors through, wrap arrays/scalars as constants."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x, requires_grad=False, dtype=dtype)

"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation records its parents and a closure mapping the
output gradient to one gradient per parent. ``Tensor.backward`` walks the graph
in reverse topological order and accumulates gradients into leaf tensors that
were created with ``requires_grad=True``; intermediate gradients are discarded
once propagated.
"""

from __future__ import annotations

import numpy as np

from ..errors import DimensionError

DTYPE = np.float64

_grad_enabled = True


class no_grad:
    """Context manager that stops graph recording (inference only)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _as_array(value):
    arr = np.asarray(value, dtype=DTYPE)
    return arr


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    # -- graph construction -----------------------------------------------
    @staticmethod
    def _make(data, parents, backward):
        parents = tuple(parents)
        if _grad_enabled and any(p.requires_grad for p in parents):
            return Tensor(data, True, _parents=parents, _backward=backward)
        return Tensor(data)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
        if not self.requires_grad:
            return
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without grad needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): _as_array(grad)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor._make(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self + (-other)

    def __rsub__(self, other):
        return Tensor(other) - self

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor._make(a * b, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

        return Tensor._make(a / b, (self, other), backward)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        src_shape = self.shape
        basic = _is_basic_index(index)

        def backward(g):
            out = np.zeros(src_shape, dtype=DTYPE)
            if basic:
                out[index] += g
            else:
                np.add.at(out, index, g)
            return (out,)

        return Tensor._make(self.data[index], (self,), backward)

    # -- reductions and shape ops -------------------------------------------
    def sum(self, axis=None, keepdims=False):
        src_shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src_shape).copy(),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src_shape = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(src_shape),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),))

    def swapaxes(self, a, b):
        return Tensor._make(self.data.swapaxes(a, b), (self,), lambda g: (g.swapaxes(a, b),))

    @property
    def T(self):
        return self.transpose()

    # -- elementwise functions ------------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self):
        x = self.data
        return Tensor._make(np.log(x), (self,), lambda g: (g / x,))

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),))

    def square(self):
        x = self.data
        return Tensor._make(x * x, (self,), lambda g: (2.0 * g * x,))


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad=False, name=None):
    return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=requires_grad, name=name)


def ones(shape, requires_grad=False, name=None):
    return Tensor(np.ones(shape, dtype=DTYPE), requires_grad=requires_grad, name=name)


def matmul(a, b):
    """Matrix product with numpy batching/broadcasting rules on leading axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    x, y = a.data, b.data
    try:
        out = np.matmul(x, y)
    except ValueError as exc:
        raise DimensionError(f"matmul batch dimensions disagree: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(y, -1, -2)), x.shape)
        if b.requires_grad:
            if x.ndim > 2 and y.ndim == 2:
                # fold batch axes into one GEMM for the shared weight
                gb = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(x, -1, -2), g), y.shape)
        return ga, gb

    return Tensor._make(out, (a, b), backward)


def concat(tensors, axis=0):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors, axis=0):
    tensors = list(tensors)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._make(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def where(cond, a, b):
    """Select ``a`` where ``cond`` else ``b``; ``cond`` is a plain boolean array."""
    cond = np.asarray(cond, dtype=bool)
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)

    def backward(g):
        return _unbroadcast(np.where(cond, g, 0.0), a.shape), _unbroadcast(np.where(cond, 0.0, g), b.shape)

    return Tensor._make(np.where(cond, a.data, b.data), (a, b), backward)


def gather_rows(table, ids):
    """Row lookup ``table[ids]`` for an integer array ``ids`` of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    n_rows = table.shape[0]

    def backward(g):
        out = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (out,)

    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        raise DimensionError(f"row index out of range for table with {n_rows} rows")
    return Tensor._make(table.data[ids], (table,), backward)

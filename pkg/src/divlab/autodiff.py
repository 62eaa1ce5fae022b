"""Reverse-mode automatic differentiation over float64 numpy arrays.

Backward rules are themselves written with differentiable ops, so a gradient
computed with ``create_graph=True`` can be differentiated again. That is what
second-order MAML needs.

    >>> theta = Tensor(3.0, requires_grad=True)
    >>> loss = 0.5 * theta * theta
    >>> backward(loss, [theta])[0].data
    array(3.)
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import ContractError, DimensionError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def _enable_grad(flag):
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = flag
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array plus the record of the op that produced it."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op", "_freed", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, *, _parents=(), _backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self._freed = False

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

    def detach(self):
        return Tensor(self.data)

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag}, op={self.op!r})"

    # arithmetic sugar
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
        if isinstance(other, Tensor):
            raise ContractError("division is only defined by a constant scalar")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, n):
        return power(self, n)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    """Create an op output, recording the graph only when needed."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=parents, _backward=backward_fn, op=op)
    return Tensor(data, op=op)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and g.shape[i + lead] != 1
    )
    out = sum_(g, axis=axes, keepdims=True) if axes else g
    return reshape(out, shape)


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (neg(g),), "neg")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def bw(g):
        return _unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(a, c):
    """Multiply by a constant Python scalar."""
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (scale(g, c),), "scale")


def square(a):
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (mul(g, scale(a, 2.0)),), "square")


def power(a, n):
    if not isinstance(n, (int, np.integer)) or n < 0:
        raise ContractError("power only supports non-negative integer exponents")
    a = as_tensor(a)
    n = int(n)
    if n == 0:
        return Tensor(np.ones_like(a.data))
    if n == 1:
        return a

    def bw(g):
        return (mul(g, scale(power(a, n - 1), n)),)

    return _make(a.data**n, (a,), bw, f"pow{n}")


def exp(a):
    a = as_tensor(a)
    out_box = []

    def bw(g):
        return (mul(g, out_box[0]),)

    out = _make(np.exp(a.data), (a,), bw, "exp")
    out_box.append(out)
    return out


def relu(a):
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)

    def bw(g):
        return (mul(g, Tensor(mask)),)

    return _make(a.data * mask, (a,), bw, "relu")


# ---------------------------------------------------------------- reductions / shape


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def bw(g):
        return (broadcast_to(reshape(g, kept_shape), a.shape),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if count == 0:
        raise ContractError("mean of an empty tensor")
    return scale(sum_(a, axis=axes, keepdims=keepdims), 1.0 / count)


def broadcast_to(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise DimensionError("broadcast_to", a.shape, shape) from None
    return _make(np.array(data), (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast")


def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError("reshape", a.shape, shape)
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (reshape(g, src),), "reshape")


def transpose(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError("transpose", a.shape)
    return _make(a.data.T.copy(), (a,), lambda g: (transpose(g),), "transpose")


def take(a, index):
    """Basic (slice) indexing; the backward scatters into zeros."""
    a = as_tensor(a)
    src = a.shape

    def bw(g):
        return (scatter(g, index, src),)

    return _make(np.array(a.data[index]), (a,), bw, "take")


def scatter(g, index, shape):
    """Zeros of ``shape`` with ``g`` written at ``index``; adjoint of ``take``."""
    g = as_tensor(g)
    out = np.zeros(shape)
    out[index] = g.data
    return _make(out, (g,), lambda h: (take(h, index),), "scatter")


def concat(parts):
    """Concatenate 1-D tensors."""
    parts = [as_tensor(p) for p in parts]
    for p in parts:
        if p.ndim != 1:
            raise DimensionError("concat", *(q.shape for q in parts))
    bounds = np.cumsum([0] + [p.size for p in parts])

    def bw(g):
        return tuple(take(g, slice(int(lo), int(hi))) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(np.concatenate([p.data for p in parts]), tuple(parts), bw, "concat")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape)

    def bw(g):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return _make(a.data @ b.data, (a, b), bw, "matmul")


# ---------------------------------------------------------------- classification


def log_softmax(a, axis=-1):
    """Max-shifted log-softmax; finite for any finite input."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out_data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_box = []

    def bw(g):
        probs = exp(out_box[0])
        return (sub(g, mul(probs, sum_(g, axis=axis, keepdims=True))),)

    out = _make(out_data, (a,), bw, "log_softmax")
    out_box.append(out)
    return out


def one_hot(labels, width):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise DimensionError("one_hot", labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= width):
        raise ContractError(f"labels must lie in [0, {width})")
    out = np.zeros((labels.size, width))
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy(logits, labels):
    """Mean negative log-likelihood in nats."""
    logits = as_tensor(logits)
    if logits.ndim != 2 or logits.shape[0] != len(labels):
        raise DimensionError("cross_entropy", logits.shape, np.shape(labels))
    picked = mul(log_softmax(logits), Tensor(one_hot(labels, logits.shape[1])))
    return scale(sum_(picked), -1.0 / logits.shape[0])


# ---------------------------------------------------------------- backward


def _topo_order(root, stop=frozenset()):
    """Post-order (parents first) over grad-requiring ancestors of ``root``.

    Nodes in ``stop`` are included but not expanded.
    """
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if id(node) in stop:
            continue
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, targets, *, retain_graph=False, create_graph=False):
    """Gradients of scalar ``loss`` with respect to each tensor in ``targets``.

    Targets that do not influence ``loss`` get exact zeros. With
    ``create_graph`` the returned gradients are themselves differentiable;
    without ``retain_graph`` the traversed graph is released afterwards.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    retain_graph = retain_graph or create_graph
    wanted = {id(t): t for t in targets}
    grads = {}
    if loss.requires_grad:
        if loss._freed:
            raise ContractError(
                "graph already released by an earlier backward; pass retain_graph=True "
                "to the first call"
            )
        # a lone target cannot sit behind another target, so its ancestry is skipped
        order = _topo_order(loss, frozenset(wanted) if len(wanted) == 1 else frozenset())
        relevant = set()
        for node in order:
            if id(node) in wanted or any(id(p) in relevant for p in node._parents):
                relevant.add(id(node))
        grads[id(loss)] = Tensor(np.ones_like(loss.data))
        with _enable_grad(create_graph):
            for node in reversed(order):
                g = grads.pop(id(node), None) if id(node) not in wanted else grads.get(id(node))
                if g is None or node._backward is None or id(node) in wanted and len(wanted) == 1:
                    continue
                if node._freed:
                    raise ContractError(
                        "graph already released by an earlier backward; pass "
                        "retain_graph=True to the first call"
                    )
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or id(parent) not in relevant:
                        continue
                    prev = grads.get(id(parent))
                    grads[id(parent)] = pg if prev is None else add(prev, pg)
        if not retain_graph:
            for node in order:
                if node._backward is not None:
                    node._freed = True
                    node._parents = ()
    out = []
    for t in targets:
        g = grads.get(id(t))
        out.append(Tensor(np.zeros_like(t.data)) if g is None else g)
    return out

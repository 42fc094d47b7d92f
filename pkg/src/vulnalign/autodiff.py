"""Tensor-level reverse-mode automatic differentiation on top of numpy.

Each :class:`Tensor` wraps a float64 array and remembers how it was built.
Calling :meth:`Tensor.backward` on a scalar walks the graph in reverse
topological order and accumulates ``.grad`` on every tensor that requires it.

Only the handful of operations the alignment model needs are provided, but
each one is vectorised so a full-graph forward pass stays cheap.  Sparse
segment reductions go through ``scipy.sparse`` so the reduction order is
fixed and results are bitwise reproducible.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor",
    "as_tensor",
    "abs_",
    "concat",
    "cosine_rows",
    "exp",
    "leaky_relu",
    "log",
    "relu",
    "rowsum",
    "segment_softmax",
    "segment_sum",
    "sigmoid",
    "softplus",
    "spmm",
    "take",
    "candidate_gate",
]

_DTYPE = np.float64


class Tensor:
    """A node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{label})"

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out = self.data + other.data

        def backward(g):
            return _unbroadcast(g, self.shape), _unbroadcast(g, other.shape)

        return Tensor(out, _parents=(self, other), _backward=backward)

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.data, _parents=(self,), _backward=lambda g: (-g,))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor(a * b, _parents=(self, other), _backward=backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

        return Tensor(a / b, _parents=(self, other), _backward=backward)

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            return g @ b.T, a.T @ g

        return Tensor(a @ b, _parents=(self, other), _backward=backward)

    @property
    def T(self):
        return Tensor(self.data.T, _parents=(self,), _backward=lambda g: (g.T,))

    def reshape(self, *shape):
        old = self.shape
        return Tensor(
            self.data.reshape(*shape), _parents=(self,), _backward=lambda g: (g.reshape(old),)
        )

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor(self.data.sum(axis=axis, keepdims=keepdims), _parents=(self,), _backward=backward)

    def mean(self):
        return self.sum() * (1.0 / self.data.size)

    def __getitem__(self, key):
        shape = self.shape

        basic = isinstance(key, (slice, int)) or (
            isinstance(key, tuple) and all(isinstance(k, (slice, int)) for k in key)
        )

        def backward(g):
            full = np.zeros(shape)
            if basic:
                full[key] += g
            else:
                np.add.at(full, key, g)
            return (full,)

        return Tensor(self.data[key], _parents=(self,), _backward=backward)

    # backprop -------------------------------------------------------------

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar")
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
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        grads = {id(self): np.asarray(grad, dtype=_DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise ----------------------------------------------------------------


def exp(x):
    out = np.exp(x.data)
    return Tensor(out, _parents=(x,), _backward=lambda g: (g * out,))


def log(x):
    return Tensor(np.log(x.data), _parents=(x,), _backward=lambda g: (g / x.data,))


def relu(x):
    on = x.data > 0
    return Tensor(np.where(on, x.data, 0.0), _parents=(x,), _backward=lambda g: (g * on,))


def leaky_relu(x, slope=0.2):
    scale = np.where(x.data > 0, 1.0, slope)
    return Tensor(x.data * scale, _parents=(x,), _backward=lambda g: (g * scale,))


def sigmoid(x):
    out = _sigmoid(x.data)
    return Tensor(out, _parents=(x,), _backward=lambda g: (g * out * (1.0 - out),))


def softplus(x):
    """``log(1 + exp(x))`` evaluated without overflow."""
    out = np.logaddexp(0.0, x.data)
    return Tensor(out, _parents=(x,), _backward=lambda g: (g * _sigmoid(x.data),))


def abs_(x):
    sign = np.sign(x.data)
    return Tensor(np.abs(x.data), _parents=(x,), _backward=lambda g: (g * sign,))


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# structural -----------------------------------------------------------------


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor(
        np.concatenate([t.data for t in tensors], axis=axis),
        _parents=tuple(tensors),
        _backward=backward,
    )


def rowsum(x):
    return x.sum(axis=1)


def _segment_matrix(segments, n_segments, n_items):
    return sp.csr_matrix(
        (np.ones(n_items), (segments, np.arange(n_items))), shape=(n_segments, n_items)
    )


def take(x, index):
    """Gather rows ``x[index]``; the backward pass scatter-adds."""
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]

    def backward(g):
        return (_segment_reduce(g, index, n),)

    return Tensor(x.data[index], _parents=(x,), _backward=backward)


def _segment_reduce(values, segments, n_segments):
    if values.shape[0] == 0:
        return np.zeros((n_segments,) + values.shape[1:])
    mat = _segment_matrix(segments, n_segments, values.shape[0])
    if values.ndim == 1:
        return mat @ values
    flat = values.reshape(values.shape[0], -1)
    return np.asarray(mat @ flat).reshape((n_segments,) + values.shape[1:])


def segment_sum(x, segments, n_segments):
    """Sum rows of ``x`` that share a segment id."""
    segments = np.asarray(segments, dtype=np.int64)

    def backward(g):
        return (g[segments],)

    return Tensor(_segment_reduce(x.data, segments, n_segments), _parents=(x,), _backward=backward)


def segment_softmax(x, segments, n_segments):
    """Softmax of a 1-D tensor computed independently inside each segment."""
    segments = np.asarray(segments, dtype=np.int64)
    shift = np.full(n_segments, -np.inf)
    np.maximum.at(shift, segments, x.data)
    e = exp(x - shift[segments])
    denom = segment_sum(e, segments, n_segments)
    return e / take(denom, segments)


def spmm(values, rows, cols, n_rows, x):
    """``A @ x`` where ``A`` is sparse with differentiable entries ``values``.

    ``A[rows[p], cols[p]] = values[p]``.  Gradients flow to both ``values``
    and ``x``.
    """
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    mat = sp.csr_matrix((values.data, (rows, cols)), shape=(n_rows, x.shape[0]))

    def backward(g):
        g_values = np.einsum("pd,pd->p", g[rows], x.data[cols]) if rows.size else np.zeros(0)
        return g_values, np.asarray(mat.T @ g)

    out = np.asarray(mat @ x.data)
    return Tensor(out, _parents=(values, x), _backward=backward)


def cosine_rows(a, b):
    """Row-wise cosine similarity; a row with zero norm on either side gives 0."""
    dot = np.einsum("nd,nd->n", a.data, b.data)
    na = np.sqrt(np.einsum("nd,nd->n", a.data, a.data))
    nb = np.sqrt(np.einsum("nd,nd->n", b.data, b.data))
    ok = (na > 0) & (nb > 0)
    denom = np.where(ok, na * nb, 1.0)
    out = np.where(ok, dot / denom, 0.0)

    def backward(g):
        g = np.where(ok, g, 0.0)
        safe_na = np.where(ok, na, 1.0)
        safe_nb = np.where(ok, nb, 1.0)
        ga = (g / denom)[:, None] * b.data - (g * out / safe_na**2)[:, None] * a.data
        gb = (g / denom)[:, None] * a.data - (g * out / safe_nb**2)[:, None] * b.data
        return ga, gb

    return Tensor(out, _parents=(a, b), _backward=backward)


def _chunks(n, size):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def candidate_gate(x, left, right, n_rows, chunk=512):
    """Diagonal consistency gate of every row of ``x`` against its candidates.

    For candidate pairs ``p = (left[p], right[p])`` with difference
    ``D_p = x[left[p]] - x[right[p]]``::

        c_p    = softmax over p sharing left[p] of -||D_p||
        out[i] = exp(-sum_{p: left[p]=i} c_p * D_p**2)

    Rows without candidates get a gate of ones.  Distances come from explicit
    differences so identical rows give exactly zero (the subgradient there is
    taken as zero).  The weighted square sum is expanded through sparse
    products, which only costs absolute rounding error, and is clipped at 0.
    """
    left = np.asarray(left, dtype=np.int64)
    right = np.asarray(right, dtype=np.int64)
    if left.size == 0:
        return Tensor(np.ones((n_rows, x.shape[1])))
    X = x.data
    P = left.size
    dist = np.empty(P)
    for sl in _chunks(P, chunk):
        d = X[left[sl]] - X[right[sl]]
        dist[sl] = np.sqrt(np.einsum("pk,pk->p", d, d))
    shift = np.full(n_rows, -np.inf)
    np.maximum.at(shift, left, -dist)
    e = np.exp(-dist - shift[left])
    c = e / np.bincount(left, weights=e, minlength=n_rows)[left]
    C = sp.csr_matrix((c, (left, right)), shape=(n_rows, X.shape[0]))
    csum = np.bincount(left, weights=c, minlength=n_rows)
    X2 = X * X
    S = X2 * csum[:, None] - 2.0 * X * (C @ X) + C @ X2
    np.maximum(S, 0.0, out=S)
    out = np.exp(-S)

    def backward(g):
        gS = -(g * out)
        g_c = np.empty(P)
        for sl in _chunks(P, chunk):
            d = X[left[sl]] - X[right[sl]]
            g_c[sl] = np.einsum("pk,pk->p", gS[left[sl]], d * d)
        CT = C.T.tocsr()
        grad = 2.0 * (gS * (X * csum[:, None] - C @ X) - (CT @ (gS * X) - X * (CT @ gS)))
        g_dist = -c * (g_c - np.bincount(left, weights=c * g_c, minlength=n_rows)[left])
        w = np.where(dist > 0, g_dist / np.where(dist > 0, dist, 1.0), 0.0)
        W = sp.csr_matrix((w, (left, right)), shape=(n_rows, X.shape[0]))
        WT = W.T.tocsr()
        wrow = np.bincount(left, weights=w, minlength=n_rows)
        wcol = np.bincount(right, weights=w, minlength=X.shape[0])
        grad += X * wrow[:, None] - W @ X
        grad += X * wcol[:, None] - WT @ X
        return (grad,)

    return Tensor(out, _parents=(x,), _backward=backward)

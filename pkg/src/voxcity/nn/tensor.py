"""Minimal reverse-mode autodiff over float64 numpy arrays.

Covers exactly the ops the encoder/decoder stacks and losses need: broadcast
arithmetic, matmul, pointwise nonlinearities, reductions, concatenation, row
gather/scatter and segment pooling, plus the trilinear gather whose backward
is the transpose scatter. Everything is float64; gradients accumulate in
fixed graph order so runs are deterministic.
"""

from __future__ import annotations

import numpy as np

from .. import kernels


def _arr(x):
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjps")

    def __init__(self, data, requires_grad=False):
        self.data = _arr(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjps = ()

    # -- graph plumbing ---------------------------------------------------

    @staticmethod
    def _op(data, parents, vjps):
        """Result node; keeps only the vjps of parents that need gradients."""
        out = Tensor(data)
        live = [(p, v) for p, v in zip(parents, vjps) if p.requires_grad]
        if live:
            out.requires_grad = True
            out._parents = tuple(p for p, _ in live)
            out._vjps = tuple(v for _, v in live)
        return out

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without gradient on non-scalar")
            grad = np.ones_like(self.data)
        topo, seen, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): _arr(grad)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._parents:
                for p, vjp in zip(node._parents, node._vjps):
                    contrib = vjp(g)
                    if id(p) in grads:
                        grads[id(p)] = grads[id(p)] + contrib
                    else:
                        grads[id(p)] = contrib
            elif node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
        return self

    def zero_grad(self):
        self.grad = None

    # -- basics ------------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        o = as_tensor(other)
        return Tensor._op(self.data + o.data, (self, o),
                          (lambda g: _unbroadcast(g, self.data.shape),
                           lambda g: _unbroadcast(g, o.data.shape)))

    __radd__ = __add__

    def __neg__(self):
        return Tensor._op(-self.data, (self,), (lambda g: -g,))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        o = as_tensor(other)
        return Tensor._op(self.data * o.data, (self, o),
                          (lambda g: _unbroadcast(g * o.data, self.data.shape),
                           lambda g: _unbroadcast(g * self.data, o.data.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = as_tensor(other)
        return Tensor._op(self.data / o.data, (self, o),
                          (lambda g: _unbroadcast(g / o.data, self.data.shape),
                           lambda g: _unbroadcast(-g * self.data / (o.data ** 2),
                                                  o.data.shape)))

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent):
        if not np.isscalar(exponent):
            raise TypeError("only scalar exponents are supported")
        out = self.data ** exponent
        return Tensor._op(out, (self,),
                          (lambda g: g * exponent * self.data ** (exponent - 1),))

    def __matmul__(self, other):
        o = as_tensor(other)
        if self.data.ndim != 2 or o.data.ndim != 2:
            raise ValueError("matmul expects 2-D operands")
        return Tensor._op(self.data @ o.data, (self, o),
                          (lambda g: g @ o.data.T,
                           lambda g: self.data.T @ g))

    # -- pointwise ----------------------------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return Tensor._op(out, (self,), (lambda g: g * out,))

    def log(self):
        return Tensor._op(np.log(self.data), (self,), (lambda g: g / self.data,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor._op(out, (self,), (lambda g: g * 0.5 / out,))

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._op(out, (self,), (lambda g: g * (1.0 - out * out),))

    def relu(self):
        mask = self.data > 0
        return Tensor._op(np.where(mask, self.data, 0.0), (self,),
                          (lambda g: g * mask,))

    def sigmoid(self):
        out = _sigmoid(self.data)
        return Tensor._op(out, (self,), (lambda g: g * out * (1.0 - out),))

    def softplus(self):
        # stable log(1 + exp(x)); derivative sigmoid(x)
        out = np.maximum(self.data, 0.0) + np.log1p(np.exp(-np.abs(self.data)))
        return Tensor._op(out, (self,), (lambda g: g * _sigmoid(self.data),))

    def abs(self):
        sign = np.sign(self.data)
        return Tensor._op(np.abs(self.data), (self,), (lambda g: g * sign,))

    def clip(self, lo, hi):
        """Clamp with pass-through gradient strictly inside the bounds."""
        inside = (self.data > lo) & (self.data < hi)
        return Tensor._op(np.clip(self.data, lo, hi), (self,),
                          (lambda g: g * inside,))

    # -- shape / reductions ---------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        return Tensor._op(self.data.reshape(shape), (self,),
                          (lambda g: g.reshape(old),))

    def sum(self, axis=None, keepdims=False):
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is None:
                return np.broadcast_to(g, self.data.shape).copy()
            gg = g if keepdims else np.expand_dims(g, axis)
            return np.broadcast_to(gg, self.data.shape).copy()

        return Tensor._op(out, (self,), (vjp,))

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def take_rows(self, index):
        """Row gather along axis 0; backward scatter-adds."""
        index = np.asarray(index, dtype=np.int64)
        out = self.data[index]

        def vjp(g):
            buf = np.zeros_like(self.data)
            np.add.at(buf, index, g)
            return buf

        return Tensor._op(out, (self,), (vjp,))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * data.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        return lambda g: g[tuple(sl)]

    return Tensor._op(data, tuple(tensors),
                      tuple(make_vjp(i) for i in range(len(tensors))))


def weighted_gather(attrs: Tensor, rows, weights) -> Tensor:
    """out[q] = sum_c weights[q, c] * attrs[rows[q, c]] with rows < 0 skipped.

    Linear in ``attrs``; the backward pass is the transpose scatter, i.e.
    exactly the unnormalized splat of the incoming gradient.
    """
    attrs = as_tensor(attrs)
    rows = np.ascontiguousarray(rows, dtype=np.int64)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    out = kernels.sample_gather(rows, weights, attrs.data)

    def vjp(g):
        return kernels.splat_scatter(rows, weights, np.ascontiguousarray(g),
                                     attrs.data.shape[0])[0]

    return Tensor._op(out, (attrs,), (vjp,))


def weighted_scatter(values: Tensor, rows, weights, n_out) -> Tensor:
    """Transpose of weighted_gather: scatter values onto n_out slots."""
    values = as_tensor(values)
    rows = np.ascontiguousarray(rows, dtype=np.int64)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    out = kernels.splat_scatter(rows, weights, values.data, n_out)[0]

    def vjp(g):
        return kernels.sample_gather(rows, weights, np.ascontiguousarray(g))

    return Tensor._op(out, (values,), (vjp,))


def segment_sum(values: Tensor, segment_ids, n_segments) -> Tensor:
    """out[s] = sum of value rows with segment id s."""
    values = as_tensor(values)
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    out = np.zeros((n_segments,) + values.data.shape[1:])
    np.add.at(out, segment_ids, values.data)
    return Tensor._op(out, (values,), (lambda g: g[segment_ids],))


def segment_mean(values: Tensor, segment_ids, n_segments) -> Tensor:
    counts = np.bincount(np.asarray(segment_ids, dtype=np.int64),
                         minlength=n_segments).astype(np.float64)
    counts = np.maximum(counts, 1.0).reshape((-1,) + (1,) * (values.data.ndim - 1))
    return segment_sum(values, segment_ids, n_segments) * (1.0 / counts)


def segment_max(values: Tensor, segment_ids, n_segments) -> Tensor:
    """Elementwise max over rows sharing a segment id (empty segments -> 0).

    Gradient flows to every row attaining the max (ties share the gradient),
    which matches the subgradient choice of the pooling layers here.
    """
    values = as_tensor(values)
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    out = np.full((n_segments,) + values.data.shape[1:], -np.inf)
    np.maximum.at(out, segment_ids, values.data)
    empty = np.isneginf(out)
    out = np.where(empty, 0.0, out)

    def vjp(g):
        winners = values.data == out[segment_ids]
        return np.where(winners, g[segment_ids], 0.0)

    return Tensor._op(out, (values,), (vjp,))

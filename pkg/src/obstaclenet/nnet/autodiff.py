"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the operations needed by the network and the energy losses are provided.
Forward-mode input tangents are expressed with these same operations, so a
single reverse sweep yields exact parameter gradients of losses that involve
both u and its input gradient.
"""
from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = True


class GraphError(RuntimeError):
    """Raised when a backward pass is requested without an evaluation graph."""


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


class Tensor:
    """An array node in the evaluation graph.

    Leaves created with ``requires_grad=True`` accumulate ``grad`` after
    :meth:`backward`. Interior nodes keep ``(parent, vjp)`` pairs.
    """

    __array_priority__ = 100.0
    __slots__ = ("value", "grad", "requires_grad", "_parents")

    def __init__(self, value, requires_grad=False, _parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _make(value, parents):
        """Create a result node; ``parents`` is a list of (tensor, vjp)."""
        if not _GRAD_ENABLED:
            return Tensor(value)
        live = tuple((p, f) for p, f in parents if p.requires_grad)
        if not live:
            return Tensor(value)
        return Tensor(value, requires_grad=True, _parents=live)

    def backward(self, seed=None):
        """Accumulate d(self)/d(leaf) into every leaf's ``grad``."""
        if not self.requires_grad:
            raise GraphError("tensor was not produced by a recorded evaluation")
        if seed is None:
            if self.value.size != 1:
                raise GraphError("backward() without a seed needs a scalar")
            seed = np.ones_like(self.value)

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        grads = {id(self): np.asarray(seed, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, vjp in node._parents:
                contrib = _unbroadcast(vjp(g), parent.shape)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + contrib
                else:
                    grads[key] = contrib

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        return Tensor._make(self.value + other.value,
                            [(self, lambda g: g), (other, lambda g: g)])

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.value, [(self, lambda g: -g)])

    def __sub__(self, other):
        other = _as_tensor(other)
        return Tensor._make(self.value - other.value,
                            [(self, lambda g: g), (other, lambda g: -g)])

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        other = _as_tensor(other)
        a, b = self.value, other.value
        return Tensor._make(a * b, [(self, lambda g: g * b), (other, lambda g: g * a)])

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        a, b = self.value, other.value
        return Tensor._make(a / b, [(self, lambda g: g / b),
                                    (other, lambda g: -g * a / (b * b))])

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __matmul__(self, other):
        other = _as_tensor(other)
        a, b = self.value, other.value
        return Tensor._make(a @ b, [(self, lambda g: g @ b.T), (other, lambda g: a.T @ g)])

    def __rmatmul__(self, other):
        return _as_tensor(other) @ self

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        shape = self.shape
        basic = all(isinstance(i, (int, slice)) for i in
                    (index if isinstance(index, tuple) else (index,)))

        def vjp(g):
            out = np.zeros(shape)
            if basic:
                out[index] = g
            else:
                np.add.at(out, index, g)
            return out

        return Tensor._make(self.value[index], [(self, vjp)])

    @property
    def T(self):
        return Tensor._make(self.value.T, [(self, lambda g: g.T)])

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape)

        return Tensor._make(self.value.sum(axis=axis, keepdims=keepdims), [(self, vjp)])

    def mean(self, axis=None, keepdims=False):
        n = self.value.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def power(x, exponent):
    """Elementwise ``x**exponent`` for a constant real exponent."""
    x = _as_tensor(x)
    k = float(exponent)
    v = x.value
    out = v ** k
    if k == 2.0:
        return Tensor._make(out, [(x, lambda g: g * 2.0 * v)])
    if k == 1.0:
        return Tensor._make(out, [(x, lambda g: g)])
    return Tensor._make(out, [(x, lambda g: g * k * v ** (k - 1.0))])


def relu(x):
    x = _as_tensor(x)
    v = x.value
    return Tensor._make(np.maximum(v, 0.0), [(x, lambda g: g * (v > 0.0))])


def sqrt(x):
    return power(x, 0.5)


def stack_columns(columns):
    """Stack 1-D or (n, 1) tensors into an (n, k) tensor."""
    cols = [_as_tensor(c) for c in columns]
    values = [c.value.reshape(-1) for c in cols]
    out = np.stack(values, axis=1)
    parents = []
    for j, c in enumerate(cols):
        parents.append((c, (lambda j, shape: lambda g: g[:, j].reshape(shape))(j, c.shape)))
    return Tensor._make(out, parents)


def affine(state, weight, bias):
    """Stacked affine map for a ``(k, B, n)`` value/tangent state.

    Slice 0 holds values and receives the bias; slices 1.. hold input
    tangents, which are mapped linearly.
    """
    s, w, b = state.value, weight.value, bias.value
    k, batch, n = s.shape
    flat = s.reshape(k * batch, n)
    out = (flat @ w.T).reshape(k, batch, -1)
    out[0] += b

    def vjp_state(g):
        return (g.reshape(k * batch, -1) @ w).reshape(k, batch, n)

    def vjp_weight(g):
        return g.reshape(k * batch, -1).T @ flat

    def vjp_bias(g):
        return g[0].sum(axis=0)

    return Tensor._make(out, [(state, vjp_state), (weight, vjp_weight), (bias, vjp_bias)])


def norm_relu2(state, gain=None, shift=None, eps=1e-5):
    """Hidden-block nonlinearity on a stacked value/tangent state.

    Value path: ``relu(gain * layernorm(z) + shift)**2`` (layer norm skipped
    when ``gain`` is None). Tangent slices receive the exact directional
    derivative of that map. Forward and backward run in compiled kernels.
    """
    from . import _kernels

    s = np.ascontiguousarray(state.value)
    if gain is None:
        out, r = _kernels.relu2_forward(s)

        def vjp_state(g):
            return _kernels.relu2_backward(np.ascontiguousarray(g), s, r)

        return Tensor._make(out, [(state, vjp_state)])

    g_ = np.ascontiguousarray(gain.value)
    out, zhat, r, inv, tc, m, dzhat = _kernels.norm_relu2_forward(
        s, g_, np.ascontiguousarray(shift.value), float(eps))
    cache = {}

    def grads(g):
        if cache.get("key") is not g:
            cache["key"] = g
            cache["res"] = _kernels.norm_relu2_backward(
                np.ascontiguousarray(g), g_, zhat, r, inv, tc, m, dzhat)
        return cache["res"]

    return Tensor._make(out, [(state, lambda g: grads(g)[0]),
                              (gain, lambda g: grads(g)[1]),
                              (shift, lambda g: grads(g)[2])])


def constant(value):
    return Tensor(value)


def parameter(value):
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True)

"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tensor wraps a numpy array and remembers how it was produced; calling
``backward`` on a scalar loss walks the recorded graph once in reverse
topological order and accumulates gradients into every tensor that
requires them. Trainable weights and differentiable inputs (treatment
trajectories) are both plain leaf tensors, so the optimizer can treat
them identically.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


class AutodiffError(Exception):
    """Raised for graph misuse or non-finite values produced by an op."""


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


def _check_finite(data: np.ndarray, op: str) -> None:
    # One reduction pass: the sum is non-finite iff the array holds any
    # nan/inf (or has overflowed, which is divergence all the same).
    if not np.isfinite(data.sum()):
        raise AutodiffError(f"non-finite values produced by op '{op}'")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node in the autodiff graph: float64 values plus gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _op: str = "leaf"):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = None
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        # Copy on first touch: incoming arrays may alias other grads.
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self) -> None:
        backward(self)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    """Leaf marker: a trainable weight or a differentiable input."""
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


# -- forward ops ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data + b.data, _parents=(a, b), _op="add")
    _check_finite(out.data, "add")

    def bwd():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad, b.data.shape))

    out._backward = bwd
    return out


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data - b.data, _parents=(a, b), _op="sub")
    _check_finite(out.data, "sub")

    def bwd():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-out.grad, b.data.shape))

    out._backward = bwd
    return out


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with numpy broadcasting."""
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data * b.data, _parents=(a, b), _op="mul")
    _check_finite(out.data, "mul")

    def bwd():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad * a.data, b.data.shape))

    out._backward = bwd
    return out


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c, _parents=(a,), _op="scale")
    _check_finite(out.data, "scale")

    def bwd():
        if a.requires_grad:
            a._accumulate(out.grad * c)

    out._backward = bwd
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise AutodiffError(
            f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data, _parents=(a, b), _op="matmul")
    _check_finite(out.data, "matmul")

    def bwd():
        if a.requires_grad:
            a._accumulate(out.grad @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ out.grad)

    out._backward = bwd
    return out


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise AutodiffError(f"transpose expects a matrix, got shape {a.data.shape}")
    out = Tensor(a.data.T, _parents=(a,), _op="transpose")

    def bwd():
        if a.requires_grad:
            a._accumulate(out.grad.T)

    out._backward = bwd
    return out


def _elementwise(a: Tensor, fn, dfn, name: str) -> Tensor:
    out = Tensor(fn(a.data), _parents=(a,), _op=name)
    _check_finite(out.data, name)

    def bwd():
        if a.requires_grad:
            a._accumulate(out.grad * dfn(a.data, out.data))

    out._backward = bwd
    return out


def tanh(a: Tensor) -> Tensor:
    return _elementwise(a, np.tanh, lambda x, y: 1.0 - y * y, "tanh")


def sigmoid(a: Tensor) -> Tensor:
    return _elementwise(a, expit, lambda x, y: y * (1.0 - y), "sigmoid")


def relu(a: Tensor) -> Tensor:
    return _elementwise(a, lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0.0).astype(np.float64), "relu")


def square(a: Tensor) -> Tensor:
    return _elementwise(a, np.square, lambda x, y: 2.0 * x, "square")


def exp(a: Tensor) -> Tensor:
    return _elementwise(a, np.exp, lambda x, y: y, "exp")


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 _parents=tuple(tensors), _op="concat")
    _check_finite(out.data, "concat")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd():
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * out.grad.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(out.grad[tuple(idx)])

    out._backward = bwd
    return out


def slice_axis(a: Tensor, start: int, stop: int, axis: int = 1) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    # Tensor data is treated as immutable, so a view is safe here.
    out = Tensor(a.data[idx], _parents=(a,), _op="slice")

    def bwd():
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[idx] = out.grad
            a._accumulate(g)

    out._backward = bwd
    return out


def mean(a: Tensor) -> Tensor:
    """Mean over all elements, producing a scalar tensor."""
    n = a.data.size
    out = Tensor(a.data.mean(), _parents=(a,), _op="mean")

    def bwd():
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, out.grad / n))

    out._backward = bwd
    return out


def total(a: Tensor) -> Tensor:
    """Sum over all elements, producing a scalar tensor."""
    out = Tensor(a.data.sum(), _parents=(a,), _op="sum")

    def bwd():
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, float(out.grad)))

    out._backward = bwd
    return out


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: multiply by a Bernoulli(1-p)/(1-p) mask from rng."""
    if not 0.0 <= p < 1.0:
        raise AutodiffError(f"dropout rate must be in [0, 1), got {p}")
    if p == 0.0:
        return a
    mask = (rng.random(a.data.shape) >= p) / (1.0 - p)
    return mul(a, constant(mask))


def clip_straight_through(a: Tensor, lo: float, hi: float) -> Tensor:
    """Hard clip whose backward pass is the identity (straight-through)."""
    out = Tensor(np.clip(a.data, lo, hi), _parents=(a,), _op="clip_st")

    def bwd():
        if a.requires_grad:
            a._accumulate(out.grad)

    out._backward = bwd
    return out


def elementwise(a: Tensor, fn, dfn, name: str = "custom") -> Tensor:
    """Custom differentiable elementwise op: dfn(x, y) is dy/dx."""
    return _elementwise(a, fn, dfn, name)


# -- backward pass --------------------------------------------------------

def _toposort(root: Tensor) -> list:
    order, visited, stack = [], set(), [(root, iter(root._parents))]
    visited.add(id(root))
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if id(p) not in visited:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def backward(loss: Tensor) -> None:
    """Populate .grad on every tensor reachable from the scalar loss.

    Grads of all reachable nodes are reset first, so each call yields the
    gradients of exactly this loss.
    """
    if loss.data.size != 1:
        raise AutodiffError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    order = _toposort(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.requires_grad:
            node._backward()


def gradients(loss: Tensor, leaves) -> list:
    """Gradients for the given leaves; disconnected leaves get zeros."""
    for leaf in leaves:
        leaf.grad = None
    backward(loss)
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            for leaf in leaves]


# -- AdamW ----------------------------------------------------------------

def adamw_step(w: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray,
               t: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, weight_decay: float = 0.0):
    """One decoupled-weight-decay Adam update; t is the 1-based step index."""
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    w = w - lr * weight_decay * w - lr * m_hat / (np.sqrt(v_hat) + eps)
    return w, m, v


class AdamW:
    """Optimizer over a list of leaf tensors; state lives per parameter."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            p.data, self._m[i], self._v[i] = adamw_step(
                p.data, g, self._m[i], self._v[i], self.t, self.lr,
                self.beta1, self.beta2, self.eps, self.weight_decay)

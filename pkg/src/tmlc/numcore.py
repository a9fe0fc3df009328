"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op takes and returns :class:`Tensor`. A tensor that requires a gradient
records its parents and a closure that pushes its gradient to them; calling
:func:`backward` on a scalar walks that graph once in reverse topological
order. Gradients accumulate additively into ``Tensor.grad`` until
:func:`zero_grad` is called, so running ``backward`` twice on the same graph
yields twice the gradient.

Broadcasting is limited to adding a row vector to every row of a matrix
(bias add) and to scalar constants.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_CLAMP = 1e-12
SIMPLEX_TOL = 1e-6


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractViolation(ValueError):
    """An input breaks a documented precondition."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a graph."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward_fn: Callable | None = None):
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        # interior nodes get their buffer when backward runs
        self.grad = np.zeros_like(self.value) if requires_grad and backward_fn is None else None
        self.op = op
        self._parents = parents
        self._backward = backward_fn

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value) -> Tensor:
    """A leaf tensor that collects gradients; owns a copy of ``value``."""
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True)


def _node(value, op, parents, backward_fn) -> Tensor:
    # no graph is recorded unless some parent wants a gradient
    if not _GRAD_ENABLED or not any(p.requires_grad for p in parents):
        return Tensor(value, op=op)
    return Tensor(value, requires_grad=True, op=op, parents=parents, backward_fn=backward_fn)


def _accum(t: Tensor, g: np.ndarray) -> None:
    # never in place: ``g`` may be shared with a sibling parent
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out_value = a.value @ b.value

    def backward(g):
        _accum(a, g @ b.value.T)
        _accum(b, a.value.T @ g)

    return _node(out_value, "matmul", (a, b), backward)


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may be a row vector added to every row of ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        def backward(g):
            _accum(a, g)
            _accum(b, g)
    elif b.value.ndim == 0:
        def backward(g):
            _accum(a, g)
            _accum(b, np.asarray(g.sum()))
    elif a.value.ndim == 2 and b.value.ndim == 1 and a.shape[1] == b.shape[0]:
        def backward(g):
            _accum(a, g)
            _accum(b, g.sum(axis=0))
    else:
        raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}")
    return _node(a.value + b.value, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub shape mismatch: {a.shape} - {b.shape}")

    def backward(g):
        _accum(a, g)
        _accum(b, -g)

    return _node(a.value - b.value, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    """Elementwise product of equal shapes, or tensor times a python scalar."""
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(as_tensor(a), float(b))
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} * {b.shape}")

    def backward(g):
        _accum(a, g * b.value)
        _accum(b, g * a.value)

    return _node(a.value * b.value, "mul", (a, b), backward)


def scale(a: Tensor, k: float) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accum(a, g * k)

    return _node(a.value * k, "scale", (a,), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"div shape mismatch: {a.shape} / {b.shape}")
    out_value = a.value / b.value

    def backward(g):
        _accum(a, g / b.value)
        _accum(b, -g * out_value / b.value)

    return _node(out_value, "div", (a, b), backward)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    a = as_tensor(a)
    keep = a.value >= floor

    def backward(g):
        _accum(a, g * keep)

    return _node(np.where(keep, a.value, floor), "clamp_min", (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0

    def backward(g):
        _accum(a, g * mask)

    return _node(a.value * mask, "relu", (a,), backward)


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = sigmoid_np(a.value)

    def backward(g):
        _accum(a, g * s * (1.0 - s))

    return _node(s, "sigmoid", (a,), backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.value)

    def backward(g):
        _accum(a, g * (1.0 - t * t))

    return _node(t, "tanh", (a,), backward)


def log(a, clamp: float = LOG_CLAMP) -> Tensor:
    """Natural log of ``max(a, clamp)``; the gradient is zero where clamped."""
    a = as_tensor(a)
    safe = np.maximum(a.value, clamp)
    live = a.value >= clamp

    def backward(g):
        _accum(a, g * live / safe)

    return _node(np.log(safe), "log", (a,), backward)


def softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(logits) -> Tensor:
    """Softmax over the last axis (a vector, or each row of a matrix)."""
    z = as_tensor(logits)
    if z.value.ndim not in (1, 2):
        raise DimensionError(f"softmax expects a vector or matrix, got {z.shape}")
    p = softmax_np(z.value)

    def backward(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        _accum(z, p * (g - inner))

    return _node(p, "softmax", (z,), backward)


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    if axis is None:
        def backward(g):
            _accum(a, np.broadcast_to(g, a.shape))
        return _node(np.asarray(a.value.sum()), "sum", (a,), backward)
    if a.value.ndim != 2 or axis != 1:
        raise DimensionError("row sums are only defined for matrices (axis=1)")

    def backward(g):
        _accum(a, np.broadcast_to(g[:, None], a.shape))

    return _node(a.value.sum(axis=1), "rowsum", (a,), backward)


def mean(a) -> Tensor:
    a = as_tensor(a)
    return scale(sum(a), 1.0 / a.size)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _node(a.value.reshape(shape), "reshape", (a,), backward)


def columns(a, start: int, stop: int) -> Tensor:
    """Column slice ``a[:, start:stop]`` of a matrix."""
    a = as_tensor(a)

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.value)
            full[:, start:stop] = g
            _accum(a, full)

    return _node(a.value[:, start:stop], "columns", (a,), backward)


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate matrices along columns."""
    parts = [as_tensor(p) for p in parts]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.value.ndim != 2 for p in parts):
        raise DimensionError(f"concat shape mismatch: {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            _accum(p, g[:, lo:hi])

    return _node(np.concatenate([p.value for p in parts], axis=1), "concat", tuple(parts), backward)


def _check_simplex(t: np.ndarray, name: str) -> None:
    if np.any(t < -SIMPLEX_TOL) or np.any(np.abs(t.sum(axis=-1) - 1.0) > SIMPLEX_TOL):
        raise ContractViolation(f"{name} is not on the probability simplex")


def soft_cross_entropy(pred_probs, target) -> Tensor:
    """``-sum_c target_c * log(pred_c)`` per row.

    A vector input gives a scalar; a B x C matrix gives a length-B vector of
    per-sample losses. The target is treated as a constant.
    """
    p = as_tensor(pred_probs)
    t = as_tensor(target).value
    if p.shape != t.shape:
        raise DimensionError(f"soft_cross_entropy shape mismatch: {p.shape} vs {t.shape}")
    _check_simplex(t, "target")
    logp = log(p)
    if p.value.ndim == 1:
        return scale(sum(mul(logp, t)), -1.0)
    return scale(sum(mul(logp, t), axis=1), -1.0)


def kl_divergence(target, pred) -> Tensor:
    """``sum_c target_c * log(target_c / pred_c)`` with ``0 log 0 = 0``.

    Rowwise for matrices. Differentiable through ``pred`` only.
    """
    p = as_tensor(pred)
    t = as_tensor(target).value
    if p.shape != t.shape:
        raise DimensionError(f"kl_divergence shape mismatch: {t.shape} vs {p.shape}")
    _check_simplex(t, "target")
    _check_simplex(p.value, "pred")
    neg_entropy = np.where(t > 0, t * np.log(np.maximum(t, LOG_CLAMP)), 0.0)
    neg_entropy = neg_entropy.sum(axis=-1)
    cross = soft_cross_entropy(p, t)
    return add(cross, Tensor(neg_entropy))


def _topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every reachable node.

    Intermediate gradients are reset before propagation, so only leaf
    (parameter) gradients accumulate across calls.
    """
    if loss.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    for node in order:
        if node._backward is not None:
            node.grad = None
    _accum(loss, np.ones_like(loss.value))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.value)


def gradients(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Fresh gradient of ``loss`` for each parameter (zero if unreachable)."""
    zero_grad(params)
    backward(loss)
    return [p.grad.copy() for p in params]


def finite_difference_check(f: Callable[[np.ndarray], float], x: np.ndarray,
                            analytic: np.ndarray | None = None, h: float = 1e-5,
                            grad_fn: Callable[[np.ndarray], np.ndarray] | None = None) -> float:
    """Max over coordinates of ``|analytic - central| / max(1, |analytic|)``.

    ``analytic`` is the claimed gradient at ``x``. When omitted it comes from
    ``grad_fn(x)`` or, failing that, by running ``f`` on a parameter tensor and
    backpropagating (``f`` must then accept a Tensor and return a Tensor).
    """
    x = np.array(x, dtype=np.float64)
    if analytic is None:
        if grad_fn is not None:
            analytic = grad_fn(x)
        else:
            xt = parameter(x)
            backward(f(xt))
            analytic = xt.grad

    def value(v):
        out = f(Tensor(v))
        return out.item() if isinstance(out, Tensor) else float(out)

    analytic = np.asarray(analytic, dtype=np.float64).reshape(x.shape)
    worst = 0.0
    flat = x.reshape(-1)
    for j in range(flat.size):
        bump = np.zeros_like(flat)
        bump[j] = h
        up = value((flat + bump).reshape(x.shape))
        down = value((flat - bump).reshape(x.shape))
        numeric = (up - down) / (2 * h)
        a = analytic.reshape(-1)[j]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst

"""Reverse-mode automatic differentiation over dense float64 arrays.

Every backward rule is written in terms of the same differentiable
operations used in the forward pass.  Running a backward pass with
``create_graph=True`` therefore yields gradients that are themselves graph
nodes, which is what double backpropagation needs: a loss defined on an
input-gradient can be differentiated with respect to the parameters.

Gradient mode is global and single-threaded; a graph must not be shared
between concurrent backward passes.
"""

from __future__ import annotations

import contextlib
from collections.abc import Callable, Sequence

import numpy as np

__all__ = [
    "DiffValue",
    "GraphError",
    "GradientTape",
    "no_grad",
    "is_grad_enabled",
    "grad",
    "input_gradient",
    "parameter_gradient",
    "finite_difference_check",
    "affine",
    "relu",
    "sigmoid",
    "tanh",
    "softplus",
    "exp",
    "log",
    "sqrt",
    "maximum",
    "logsumexp",
    "broadcast_to",
    "sum_to",
    "binary_cross_entropy_from_logit",
    "softmax_cross_entropy_from_logits",
]


class GraphError(RuntimeError):
    """Raised when a derivative is requested through a missing graph link."""


_GRAD_ENABLED = True
_ACTIVE_TAPES: list["GradientTape"] = []


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = enabled
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def no_grad():
    """Context manager that disables graph construction."""
    return _grad_mode(False)


def _as_array(x) -> np.ndarray:
    if isinstance(x, DiffValue):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _lift(x) -> "DiffValue":
    return x if isinstance(x, DiffValue) else DiffValue(x)


class DiffValue:
    """A float64 array that may be linked to the operation that produced it."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[DiffValue, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- construction --------------------------------------------------
    @staticmethod
    def _make(data, parents: Sequence["DiffValue"], backward: Callable, op: str) -> "DiffValue":
        out = DiffValue.__new__(DiffValue)
        out.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        if out.data.dtype != np.float64:
            out.data = out.data.astype(np.float64)
        out.op = op
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            for tape in _ACTIVE_TAPES:
                tape.nodes.append(out)
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- array protocol ------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "DiffValue":
        return DiffValue(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DiffValue({np.array2string(self.data, precision=6)}{flag})"

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return take(self, key)

    @property
    def T(self) -> "DiffValue":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "DiffValue":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "DiffValue":
        count = self.data.size if axis is None else np.prod([self.data.shape[a] for a in np.atleast_1d(axis)])
        return reduce_sum(self, axis=axis, keepdims=keepdims) * (1.0 / float(count))

    def reshape(self, *shape) -> "DiffValue":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


# ---------------------------------------------------------------------------
# Shape plumbing
# ---------------------------------------------------------------------------


def broadcast_to(x, shape) -> DiffValue:
    x = _lift(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    source_shape = x.shape
    return DiffValue._make(
        np.broadcast_to(x.data, shape).copy(),
        (x,),
        lambda g: (sum_to(g, source_shape),),
        "broadcast_to",
    )


def sum_to(x, shape) -> DiffValue:
    """Sum ``x`` down to ``shape``, undoing numpy broadcasting."""
    x = _lift(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    data = x.data
    lead = data.ndim - len(shape)
    if lead:
        data = data.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and data.shape[i] != 1)
    if axes:
        data = data.sum(axis=axes, keepdims=True)
    source_shape = x.shape
    return DiffValue._make(
        data.reshape(shape),
        (x,),
        lambda g: (broadcast_to(g, source_shape),),
        "sum_to",
    )


def reshape(x, shape) -> DiffValue:
    x = _lift(x)
    source_shape = x.shape
    return DiffValue._make(
        x.data.reshape(shape),
        (x,),
        lambda g: (reshape(g, source_shape),),
        "reshape",
    )


def transpose(x) -> DiffValue:
    x = _lift(x)
    if x.ndim < 2:
        return x
    return DiffValue._make(x.data.T.copy(), (x,), lambda g: (transpose(g),), "transpose")


def reduce_sum(x, axis=None, keepdims: bool = False) -> DiffValue:
    x = _lift(x)
    source_shape = x.shape
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            axes = tuple(a % len(source_shape) for a in np.atleast_1d(axis))
            kept = tuple(1 if i in axes else n for i, n in enumerate(source_shape))
            g = reshape(g, kept)
        elif axis is None:
            g = reshape(g, (1,) * len(source_shape))
        return (broadcast_to(g, source_shape),)

    return DiffValue._make(np.asarray(data, dtype=np.float64), (x,), backward, "sum")


def take(x, key) -> DiffValue:
    """Numpy-style indexing; the backward rule scatters into zeros."""
    x = _lift(x)
    source_shape = x.shape
    return DiffValue._make(
        np.array(x.data[key], dtype=np.float64),
        (x,),
        lambda g: (scatter_add(g, key, source_shape),),
        "take",
    )


def scatter_add(values, key, shape) -> DiffValue:
    values = _lift(values)
    out = np.zeros(shape, dtype=np.float64)
    np.add.at(out, key, values.data)
    return DiffValue._make(out, (values,), lambda g: (take(g, key),), "scatter_add")


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> DiffValue:
    a, b = _lift(a), _lift(b)
    return DiffValue._make(
        a.data + b.data,
        (a, b),
        lambda g: (sum_to(g, a.shape), sum_to(g, b.shape)),
        "add",
    )


def sub(a, b) -> DiffValue:
    a, b = _lift(a), _lift(b)
    return DiffValue._make(
        a.data - b.data,
        (a, b),
        lambda g: (sum_to(g, a.shape), sum_to(neg(g), b.shape)),
        "sub",
    )


def neg(a) -> DiffValue:
    a = _lift(a)
    return DiffValue._make(-a.data, (a,), lambda g: (neg(g),), "neg")


def mul(a, b) -> DiffValue:
    a, b = _lift(a), _lift(b)

    def backward(g):
        ga = sum_to(mul(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return DiffValue._make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> DiffValue:
    a, b = _lift(a), _lift(b)

    def backward(g):
        ga = sum_to(div(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape) if b.requires_grad else None
        return ga, gb

    return DiffValue._make(a.data / b.data, (a, b), backward, "div")


def power(a, exponent: float) -> DiffValue:
    a = _lift(a)
    exponent = float(exponent)
    return DiffValue._make(
        a.data**exponent,
        (a,),
        lambda g: (mul(g, mul(exponent, power(a, exponent - 1.0))),),
        "pow",
    )


def exp(a) -> DiffValue:
    a = _lift(a)
    out = DiffValue._make(np.exp(a.data), (a,), lambda g: (mul(g, out),), "exp")
    return out


def log(a) -> DiffValue:
    a = _lift(a)
    return DiffValue._make(np.log(a.data), (a,), lambda g: (div(g, a),), "log")


def sqrt(a) -> DiffValue:
    a = _lift(a)
    out = DiffValue._make(np.sqrt(a.data), (a,), lambda g: (div(g, mul(2.0, out)),), "sqrt")
    return out


def maximum(a, floor: float) -> DiffValue:
    """Elementwise ``max(a, floor)`` for a constant floor.

    The derivative is 1 where ``a > floor`` and 0 elsewhere (ties included).
    """
    a = _lift(a)
    mask = (a.data > floor).astype(np.float64)
    return DiffValue._make(
        np.maximum(a.data, floor),
        (a,),
        lambda g: (mul(g, mask),),
        "maximum",
    )


def matmul(a, b) -> DiffValue:
    a, b = _lift(a), _lift(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ValueError("matmul needs at least 1-D operands")

    def backward(g):
        ga = gb = None
        if a.ndim == 1 and b.ndim == 1:
            ga = mul(g, b) if a.requires_grad else None
            gb = mul(g, a) if b.requires_grad else None
        elif a.ndim == 1:
            if a.requires_grad:
                ga = matmul(b, g)
            if b.requires_grad:
                gb = mul(reshape(a, (-1, 1)), reshape(g, (1, -1)))
        elif b.ndim == 1:
            if a.requires_grad:
                ga = mul(reshape(g, (-1, 1)), reshape(b, (1, -1)))
            if b.requires_grad:
                gb = matmul(transpose(a), g)
        else:
            if a.requires_grad:
                ga = matmul(g, transpose(b))
            if b.requires_grad:
                gb = matmul(transpose(a), g)
        return ga, gb

    return DiffValue._make(a.data @ b.data, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# Activations and losses
# ---------------------------------------------------------------------------


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x) -> DiffValue:
    # Derivative at exactly 0 is taken as 0.
    x = _lift(x)
    mask = (x.data > 0).astype(np.float64)
    return DiffValue._make(np.where(x.data > 0, x.data, 0.0), (x,), lambda g: (mul(g, mask),), "relu")


def sigmoid(x) -> DiffValue:
    x = _lift(x)
    out = DiffValue._make(
        _stable_sigmoid(x.data),
        (x,),
        lambda g: (mul(g, mul(out, sub(1.0, out))),),
        "sigmoid",
    )
    return out


def tanh(x) -> DiffValue:
    x = _lift(x)
    out = DiffValue._make(
        np.tanh(x.data),
        (x,),
        lambda g: (mul(g, sub(1.0, mul(out, out))),),
        "tanh",
    )
    return out


def identity(x) -> DiffValue:
    return _lift(x)


def softplus(x) -> DiffValue:
    """``log(1 + e^x)`` evaluated without overflow."""
    x = _lift(x)
    data = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))
    return DiffValue._make(data, (x,), lambda g: (mul(g, sigmoid(x)),), "softplus")


def logsumexp(x, axis: int = -1) -> DiffValue:
    x = _lift(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    data = (m + np.log(np.sum(np.exp(x.data - m), axis=axis, keepdims=True))).squeeze(axis)
    out = DiffValue._make(data, (x,), None, "logsumexp")
    if out.requires_grad:

        def backward(g):
            expanded = reshape(out, np.expand_dims(out.data, axis).shape)
            g_expanded = reshape(g, np.expand_dims(out.data, axis).shape)
            return (mul(g_expanded, exp(sub(x, expanded))),)

        out._backward = backward
    return out


ACTIVATIONS: dict[str, Callable[[DiffValue], DiffValue]] = {
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "identity": identity,
}


def affine(x, W, b) -> DiffValue:
    """``W x + b`` for a vector ``x``; rows of a matrix ``x`` are mapped independently."""
    x, W, b = _lift(x), _lift(W), _lift(b)
    if W.ndim != 2 or b.ndim != 1:
        raise ValueError(f"affine expects a matrix and a vector, got {W.shape} and {b.shape}")
    if W.shape[0] != b.shape[0] or x.shape[-1] != W.shape[1]:
        raise ValueError(f"shape mismatch: x {x.shape}, W {W.shape}, b {b.shape}")
    if x.ndim == 1:
        return add(matmul(W, x), b)
    return add(matmul(x, transpose(W)), b)


def binary_cross_entropy_from_logit(logit, target) -> DiffValue:
    """Elementwise ``-[t log s(z) + (1-t) log(1-s(z))]`` via ``softplus(z) - t z``."""
    logit = _lift(logit)
    t = np.asarray(target, dtype=np.float64)
    if np.any((t != 0) & (t != 1)):
        raise ValueError("binary targets must be 0 or 1")
    return sub(softplus(logit), mul(logit, t))


def softmax_cross_entropy_from_logits(logits, target) -> DiffValue:
    """``-log softmax(logits)[target]``; batched when ``logits`` is 2-D."""
    logits = _lift(logits)
    target = np.asarray(target)
    n_classes = logits.shape[-1]
    if np.any(target < 0) or np.any(target >= n_classes):
        raise IndexError(f"target class out of range for {n_classes} logits")
    if logits.ndim == 1:
        picked = take(logits, int(target))
    else:
        picked = take(logits, (np.arange(logits.shape[0]), target.astype(int)))
    return sub(logsumexp(logits, axis=-1), picked)


# ---------------------------------------------------------------------------
# Backward passes
# ---------------------------------------------------------------------------


def _topological_order(root: DiffValue) -> list[DiffValue]:
    order: list[DiffValue] = []
    seen: set[int] = set()
    stack: list[tuple[DiffValue, bool]] = [(root, False)]
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


def grad(
    output: DiffValue,
    inputs: Sequence[DiffValue],
    grad_output=None,
    create_graph: bool = False,
    allow_unused: bool = False,
) -> list[DiffValue]:
    """Vector-Jacobian product of ``output`` with respect to each of ``inputs``.

    ``inputs`` may be leaves or intermediate nodes.  With ``create_graph`` the
    returned values carry their own graph and can be differentiated again.
    """
    if not isinstance(output, DiffValue) or not output.requires_grad:
        raise GraphError("output is not attached to a differentiable graph")
    if grad_output is None:
        if output.size != 1:
            raise GraphError(f"output must be scalar, got shape {output.shape}")
        seed = DiffValue(np.ones_like(output.data))
    else:
        seed = _lift(grad_output)
        if seed.shape != output.shape:
            raise ValueError(f"grad_output shape {seed.shape} != output shape {output.shape}")

    order = _topological_order(output)
    grads: dict[int, DiffValue] = {id(output): seed}
    with _grad_mode(create_graph):
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else add(grads[key], pg)

    results = []
    for x in inputs:
        g = grads.get(id(x))
        if g is None:
            if not allow_unused:
                raise GraphError(f"input of shape {x.shape} is not in the output's graph")
            g = DiffValue(np.zeros_like(x.data))
        elif g.shape != x.shape:
            g = sum_to(g, x.shape) if create_graph else DiffValue(g.data.reshape(x.shape))
        results.append(g)
    return results


def input_gradient(output: DiffValue, x: DiffValue, retain: bool = False) -> DiffValue:
    """Gradient of a scalar output with respect to an input node.

    With ``retain`` the result remains differentiable with respect to
    whatever parameters produced ``output``.
    """
    return grad(output, [x], create_graph=retain)[0]


def parameter_gradient(
    loss: DiffValue, params: Sequence[DiffValue], allow_unused: bool = False
) -> list[np.ndarray]:
    """Plain arrays holding ``d loss / d param`` for every parameter."""
    return [g.data for g in grad(loss, params, allow_unused=allow_unused)]


class GradientTape:
    """Records the nodes created during a forward pass.

    ``retain`` decides whether :meth:`gradient` returns differentiable
    results; it is opt-in so plain training steps do not pay for it.
    """

    def __init__(self, retain: bool = False):
        self.retain = retain
        self.nodes: list[DiffValue] = []

    def __enter__(self) -> "GradientTape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def gradient(self, output: DiffValue, inputs: Sequence[DiffValue], allow_unused: bool = False):
        return grad(output, inputs, create_graph=self.retain, allow_unused=allow_unused)


def finite_difference_check(
    loss_fn: Callable[[list[DiffValue]], DiffValue],
    params: Sequence[np.ndarray],
    eps: float = 1e-5,
) -> float:
    """Max elementwise relative error between autodiff and central differences.

    The relative error of an element is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if eps <= 0:
        raise ValueError("finite-difference step must be positive")
    arrays = [np.array(p, dtype=np.float64) for p in params]
    leaves = [DiffValue(a, requires_grad=True) for a in arrays]
    loss = loss_fn(leaves)
    if loss.requires_grad:
        analytic = parameter_gradient(loss, leaves, allow_unused=True)
    else:
        analytic = [np.zeros_like(a) for a in arrays]

    def evaluate(values: list[np.ndarray]) -> float:
        # Graph mode stays on: the loss may take input-gradients internally.
        return float(loss_fn([DiffValue(v) for v in values]).data)

    worst = 0.0
    for k, base in enumerate(arrays):
        flat = base.reshape(-1)
        for i in range(flat.size):
            shifted = [a.copy() for a in arrays]
            shifted[k].reshape(-1)[i] = flat[i] + eps
            up = evaluate(shifted)
            shifted[k].reshape(-1)[i] = flat[i] - eps
            down = evaluate(shifted)
            numeric = (up - down) / (2.0 * eps)
            a = analytic[k].reshape(-1)[i]
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst

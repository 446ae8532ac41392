"""Reverse-mode automatic differentiation over dense float64 arrays.

The op set is exactly what the bag-classification model needs: affine maps,
element-wise relu/tanh/sigmoid/exp/log, clipping, softmax over a vector,
index gathering, sums/means and binary cross-entropy. Values are numpy
arrays; the graph is built eagerly and traversed once per backward call.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, EmptyBagError, GradCheckError, StateError

PROB_CLAMP = 1e-7  # probabilities are clipped to [PROB_CLAMP, 1 - PROB_CLAMP] before logs


class Tensor:
    """A float64 array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward_fn: Callable[[np.ndarray], None] | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward_fn = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self) -> None:
        backward(self)

    # operator sugar

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(ensure_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(ensure_tensor(other), mul(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def ensure_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data, parents: Sequence[Tensor], backward_fn) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    return Tensor(
        data,
        requires_grad=requires,
        parents=tuple(parents) if requires else (),
        backward_fn=backward_fn if requires else None,
    )


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- primitive ops ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = ensure_tensor(a), ensure_tensor(b)
    out_data = a.data + b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = ensure_tensor(a), ensure_tensor(b)
    out_data = a.data * b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward_fn)


def matmul(a, b) -> Tensor:
    a, b = ensure_tensor(a), ensure_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul shapes do not conform: {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(out_data, (a, b), backward_fn)


def affine(x, weight, bias) -> Tensor:
    """``x @ weight + bias`` with the bias row broadcast over input rows."""
    x, weight, bias = ensure_tensor(x), ensure_tensor(weight), ensure_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise DimensionError(
            f"affine expects 2-D input/weight, got {x.data.shape} and {weight.data.shape}"
        )
    if x.data.shape[1] != weight.data.shape[0]:
        raise DimensionError(
            f"affine input/weight shapes do not conform: {x.data.shape} vs {weight.data.shape}"
        )
    if bias.data.shape[-1] != weight.data.shape[1]:
        raise DimensionError(
            f"affine bias/weight shapes do not conform: {bias.data.shape} vs {weight.data.shape}"
        )
    return add(matmul(x, weight), bias)


def relu(x) -> Tensor:
    x = ensure_tensor(x)
    out_data = np.maximum(x.data, 0.0)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g * (x.data > 0.0))

    return _make(out_data, (x,), backward_fn)


def tanh(x) -> Tensor:
    x = ensure_tensor(x)
    out_data = np.tanh(x.data)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g * (1.0 - out_data**2))

    return _make(out_data, (x,), backward_fn)


def sigmoid_values(z) -> np.ndarray:
    """Numerically stable logistic function on raw arrays."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = ensure_tensor(x)
    out_data = sigmoid_values(x.data)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (x,), backward_fn)


def exp(x) -> Tensor:
    x = ensure_tensor(x)
    out_data = np.exp(x.data)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g * out_data)

    return _make(out_data, (x,), backward_fn)


def log(x) -> Tensor:
    x = ensure_tensor(x)
    out_data = np.log(x.data)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g / x.data)

    return _make(out_data, (x,), backward_fn)


def clip(x, lo: float, hi: float) -> Tensor:
    x = ensure_tensor(x)
    out_data = np.clip(x.data, lo, hi)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g * ((x.data > lo) & (x.data < hi)))

    return _make(out_data, (x,), backward_fn)


def gather(x, indices: Sequence[int]) -> Tensor:
    """Select rows (2-D) or entries (1-D) at ``indices``; duplicates allowed."""
    x = ensure_tensor(x)
    idx = np.asarray(list(indices), dtype=np.intp)
    out_data = x.data[idx]

    def backward_fn(g):
        if x.requires_grad:
            grad = np.zeros_like(x.data)
            np.add.at(grad, idx, g)
            x._accumulate(grad)

    return _make(out_data, (x,), backward_fn)


def reshape(x, shape) -> Tensor:
    x = ensure_tensor(x)
    out_data = x.data.reshape(shape)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(np.asarray(g).reshape(x.data.shape))

    return _make(out_data, (x,), backward_fn)


def tsum(x) -> Tensor:
    x = ensure_tensor(x)
    out_data = np.asarray(x.data.sum())

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(np.full_like(x.data, float(g)))

    return _make(out_data, (x,), backward_fn)


def tmean(x) -> Tensor:
    x = ensure_tensor(x)
    n = x.data.size
    if n == 0:
        raise EmptyBagError("mean over an empty tensor")
    out_data = np.asarray(x.data.mean())

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(np.full_like(x.data, float(g) / n))

    return _make(out_data, (x,), backward_fn)


def softmax_values(scores) -> np.ndarray:
    """Softmax of a flat score vector, max-subtracted for overflow safety."""
    arr = np.asarray(scores, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise EmptyBagError("softmax of an empty score sequence")
    shifted = arr - arr.max()
    e = np.exp(shifted)
    return e / e.sum()


def softmax(x):
    """Softmax over a 1-D tensor; plain arrays/lists pass through the kernel."""
    if not isinstance(x, Tensor):
        return softmax_values(x)
    if x.data.ndim != 1:
        raise DimensionError(f"softmax expects a 1-D tensor, got shape {x.data.shape}")
    out_data = softmax_values(x.data)

    def backward_fn(g):
        if x.requires_grad:
            dot = float(np.dot(g, out_data))
            x._accumulate(out_data * (g - dot))

    return _make(out_data, (x,), backward_fn)


def bce_value(p: float, y: int) -> float:
    """Negative log-likelihood of binary label ``y`` under probability ``p``."""
    pc = min(max(float(p), PROB_CLAMP), 1.0 - PROB_CLAMP)
    return -(y * math.log(pc) + (1 - y) * math.log(1.0 - pc))


def bce(p, y: int):
    """Binary cross-entropy; differentiable when ``p`` is a Tensor.

    ``p`` is clamped before the logs, so the result is finite and >= 0 for
    any probability; the gradient vanishes in the clamped region.
    """
    if not isinstance(p, Tensor):
        return bce_value(p, y)
    pc = clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    if y == 1:
        return -log(pc)
    return -log(1.0 - pc)


def bce_mean(probs: Tensor, y: int) -> Tensor:
    """Mean BCE of every entry of ``probs`` against the single label ``y``."""
    return tmean(bce(probs, y))


# -- backward pass -----------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss, accumulating into ``.grad`` fields.

    Gradients add onto whatever is already stored, so callers zero the
    parameter store between steps.
    """
    if loss.data.size != 1:
        raise StateError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss._parents:
        raise StateError("backward called before any forward computation was recorded")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


# -- parameter store and gradient checking -----------------------------------


class ParamStore:
    """Named trainable tensors plus their gradient accumulators."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def n_params(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self._params.items():
            src = state[name]
            if src.shape != t.data.shape:
                raise DimensionError(
                    f"parameter {name!r}: stored shape {src.shape} != model shape {t.data.shape}"
                )
            t.data[...] = src


class GradCheckReport:
    """Worst-case analytic-vs-finite-difference comparison over a ParamStore."""

    def __init__(self, max_rel_error: float, worst_param: str, per_param: dict[str, float]):
        self.max_rel_error = max_rel_error
        self.worst_param = worst_param
        self.per_param = per_param

    def __repr__(self):
        return f"GradCheckReport(max_rel_error={self.max_rel_error:.3e}, worst={self.worst_param!r})"


def grad_check(forward_fn, params: ParamStore, eps: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``forward_fn(params)`` must rebuild the scalar loss from the current
    parameter values and be deterministic; every scalar entry of every
    parameter is perturbed by +/-eps in turn.
    """
    base = forward_fn(params).item()
    if forward_fn(params).item() != base:
        raise GradCheckError("forward fn is not deterministic; gradient check is invalid")

    params.zero_grad()
    loss = forward_fn(params)
    backward(loss)
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in params.items()
    }

    worst = 0.0
    worst_param = ""
    per_param: dict[str, float] = {}
    for name, t in params.items():
        flat = t.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        param_worst = 0.0
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            f_plus = forward_fn(params).item()
            flat[i] = original - eps
            f_minus = forward_fn(params).item()
            flat[i] = original
            fd = (f_plus - f_minus) / (2.0 * eps)
            a = a_flat[i]
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            if rel > param_worst:
                param_worst = rel
        per_param[name] = param_worst
        if param_worst > worst:
            worst = param_worst
            worst_param = name
    return GradCheckReport(worst, worst_param, per_param)

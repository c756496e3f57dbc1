"""Reverse-mode automatic differentiation over numpy float64 arrays.

A ``Tensor`` wraps an n-dimensional double-precision array plus an optional
gradient buffer. Differentiable operations record a computation graph only
when at least one input requires gradients; ``backward()`` on a scalar root
fills ``grad`` on every reachable node that requires it, accumulating
additively when a node is used more than once.

Everything downstream (attention blocks, detection heads, losses) is built
from the primitives here, so each primitive carries its own exact backward
rule and is covered by the central-difference checker at the bottom.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "Tensor",
    "Parameter",
    "SGD",
    "ShapeError",
    "AxisError",
    "GradientError",
    "add", "sub", "mul", "div", "matmul", "reshape", "transpose", "concat",
    "softmax", "log_softmax", "relu", "gelu", "sigmoid", "tanh",
    "exp", "log", "sqrt", "absolute", "power",
    "tensor_sum", "tensor_mean", "layer_norm", "l2_normalize",
    "finite_difference_check", "zero_grads",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class AxisError(IndexError):
    """An axis argument is outside the operand's dimensionality."""


class GradientError(RuntimeError):
    """Gradient bookkeeping violation (non-scalar root, missing grad, ...)."""


def _as_data(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


class Tensor:
    """A float64 array with optional grad buffer and graph linkage."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_data(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same values, no graph linkage, no gradient requirement."""
        return Tensor(self.data)

    def copy(self) -> "Tensor":
        out = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        return out

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        """Populate gradients of all reachable requires_grad nodes.

        Only a scalar produced by a recorded graph may be a root; gradients
        accumulate additively, so callers zero them between backward passes.
        """
        if self.data.size != 1:
            raise GradientError(
                f"backward: root must be a scalar, got shape {self.shape}")
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += np.ones_like(self.data)
        for node in reversed(_toposort(self)):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __matmul__(self, other): return matmul(self, other)
    def __neg__(self): return mul(self, -1.0)
    def __pow__(self, p): return power(self, p)
    def __getitem__(self, key): return take_slice(self, key)

    def reshape(self, *shape): return reshape(self, shape if len(shape) > 1 else shape[0])
    def transpose(self, axes=None): return transpose(self, axes)
    def sum(self, axis=None, keepdims=False): return tensor_sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return tensor_mean(self, axis, keepdims)


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative post-order: train graphs are far deeper than the recursion limit.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(data: np.ndarray, parents: Sequence[Tensor], op: str,
            backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise AxisError(f"{op}: axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


# -- arithmetic ----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))
    return _record(data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))
    return _record(data, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))
    return _record(data, (a, b), "mul", backward)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data / b.data
    except ValueError:
        raise ShapeError(f"div: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return _record(data, (a, b), "div", backward)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    data = a.data @ b.data

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)
    return _record(data, (a, b), "matmul", backward)


def power(x, p: float) -> Tensor:
    x = _wrap(x)
    p = float(p)
    data = x.data ** p

    def backward(g):
        _accumulate(x, g * p * x.data ** (p - 1.0))
    return _record(data, (x,), "power", backward)


# -- structure -----------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = _wrap(x)
    if isinstance(shape, int):
        shape = (shape,)
    shape = tuple(shape)
    declared = int(np.prod([d for d in shape if d != -1])) if shape else 1
    if -1 not in shape and declared != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    data = x.data.reshape(shape)

    def backward(g):
        _accumulate(x, g.reshape(x.shape))
    return _record(data, (x,), "reshape", backward)


def transpose(x, axes=None) -> Tensor:
    x = _wrap(x)
    if axes is not None:
        axes = tuple(_check_axis(a, x.ndim, "transpose") for a in axes)
        if len(axes) != x.ndim:
            raise ShapeError(f"transpose: axes {axes} do not match {x.ndim}-d tensor")
        inverse = tuple(np.argsort(axes))
    else:
        inverse = None
    data = x.data.transpose(axes)

    def backward(g):
        _accumulate(x, g.transpose(inverse) if inverse is not None else g.transpose())
    return _record(data, (x,), "transpose", backward)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: need at least one tensor")
    axis = _check_axis(axis, ts[0].ndim, "concat")
    base = list(ts[0].shape)
    for t in ts[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
                i != axis and other[i] != base[i] for i in range(len(base))):
            raise ShapeError(
                f"concat: shape {t.shape} incompatible with {ts[0].shape} on axis {axis}")
    data = np.concatenate([t.data for t in ts], axis=axis)
    offsets = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        for t, piece in zip(ts, np.split(g, offsets, axis=axis)):
            _accumulate(t, piece)
    return _record(data, tuple(ts), "concat", backward)


def take_slice(x, key) -> Tensor:
    """Basic (slice/int) indexing with scatter-add backward."""
    x = _wrap(x)
    data = x.data[key]

    def backward(g):
        if not x.requires_grad:
            return
        full = np.zeros_like(x.data)
        full[key] += g
        _accumulate(x, full)
    return _record(data, (x,), "slice", backward)


# -- reductions ------------------------------------------------------------------

def _normalize_axes(axis, ndim: int, op: str):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(_check_axis(a, ndim, op) for a in axis)


def tensor_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    axes = _normalize_axes(axis, x.ndim, "sum")
    data = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(x, np.broadcast_to(g, x.shape).copy())
    return _record(data, (x,), "sum", backward)


def tensor_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    axes = _normalize_axes(axis, x.ndim, "mean")
    count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    data = x.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(x, np.broadcast_to(g, x.shape) / count)
    return _record(data, (x,), "mean", backward)


# -- nonlinearities ----------------------------------------------------------------

def relu(x) -> Tensor:
    x = _wrap(x)
    data = np.maximum(x.data, 0.0)

    def backward(g):
        _accumulate(x, g * (x.data > 0.0))
    return _record(data, (x,), "relu", backward)


def gelu(x) -> Tensor:
    """Exact erf-based GELU; the derivative must match for gradient checks."""
    x = _wrap(x)
    cdf = 0.5 * (1.0 + _erf(x.data * _INV_SQRT2))
    data = x.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        _accumulate(x, g * (cdf + x.data * pdf))
    return _record(data, (x,), "gelu", backward)


def sigmoid(x) -> Tensor:
    x = _wrap(x)
    data = np.empty_like(x.data)
    pos = x.data >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    data[~pos] = ex / (1.0 + ex)

    def backward(g):
        _accumulate(x, g * data * (1.0 - data))
    return _record(data, (x,), "sigmoid", backward)


def tanh(x) -> Tensor:
    x = _wrap(x)
    data = np.tanh(x.data)

    def backward(g):
        _accumulate(x, g * (1.0 - data * data))
    return _record(data, (x,), "tanh", backward)


def exp(x) -> Tensor:
    x = _wrap(x)
    data = np.exp(x.data)

    def backward(g):
        _accumulate(x, g * data)
    return _record(data, (x,), "exp", backward)


def log(x) -> Tensor:
    x = _wrap(x)
    data = np.log(x.data)

    def backward(g):
        _accumulate(x, g / x.data)
    return _record(data, (x,), "log", backward)


def sqrt(x) -> Tensor:
    x = _wrap(x)
    data = np.sqrt(x.data)

    def backward(g):
        _accumulate(x, g * 0.5 / data)
    return _record(data, (x,), "sqrt", backward)


def absolute(x) -> Tensor:
    x = _wrap(x)
    data = np.abs(x.data)

    def backward(g):
        _accumulate(x, g * np.sign(x.data))
    return _record(data, (x,), "abs", backward)


def softmax(x) -> Tensor:
    """Softmax over the last axis; rows sum to one."""
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        _accumulate(x, data * (g - dot))
    return _record(data, (x,), "softmax", backward)


def log_softmax(x) -> Tensor:
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse

    def backward(g):
        _accumulate(x, g - np.exp(data) * g.sum(axis=-1, keepdims=True))
    return _record(data, (x,), "log_softmax", backward)


# -- composite normalizers ------------------------------------------------------------

def layer_norm(x, scale, shift, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply learnable scale and shift.

    Built from primitives so its gradient is exact by construction.
    """
    x, scale, shift = _wrap(x), _wrap(scale), _wrap(shift)
    if scale.shape[-1] != x.shape[-1] or shift.shape[-1] != x.shape[-1]:
        raise ShapeError(
            f"layer_norm: scale/shift widths {scale.shape}/{shift.shape} "
            f"do not match input {x.shape}")
    mu = tensor_mean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = tensor_mean(mul(centered, centered), axis=-1, keepdims=True)
    normed = div(centered, sqrt(add(var, eps)))
    return add(mul(normed, scale), shift)


def l2_normalize(x, eps: float = 1e-12) -> Tensor:
    """Scale rows to unit L2 norm; eps is added to the norm to guard zeros."""
    x = _wrap(x)
    norm = sqrt(tensor_sum(mul(x, x), axis=-1, keepdims=True))
    return div(x, add(norm, eps))


# -- parameters and optimization ------------------------------------------------------

class Parameter:
    """A named model weight.

    Non-trainable parameters never receive gradients (backward skips their
    subgraphs) and are never touched by the optimizer, so they stay bitwise
    constant across any number of steps.
    """

    __slots__ = ("name", "value", "trainable")

    def __init__(self, data, trainable: bool = True, name: str = ""):
        self.value = Tensor(data, requires_grad=trainable)
        self.trainable = trainable
        self.name = name

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.value.grad

    def __repr__(self) -> str:
        kind = "trainable" if self.trainable else "frozen"
        return f"Parameter({self.name!r}, shape={self.value.shape}, {kind})"


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.value.grad = None


class SGD:
    """Momentum SGD: v <- m*v + (g + wd*p); p <- p - lr*v."""

    def __init__(self, params: Sequence[Parameter], lr: float = 0.02,
                 momentum: float = 0.9, weight_decay: float = 1e-4):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        if weight_decay < 0:
            raise ValueError(f"weight_decay must be nonnegative, got {weight_decay}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity: dict[int, np.ndarray] = {}

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if not p.trainable:
                continue
            if p.value.grad is None:
                raise GradientError(
                    f"sgd step: trainable parameter '{p.name or i}' has no gradient")
            g = p.value.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.value.data
            if self.momentum:
                v = self._velocity.get(i)
                v = g.copy() if v is None else self.momentum * v + g
                self._velocity[i] = v
            else:
                v = g
            p.value.data -= self.lr * v

    def zero_grad(self) -> None:
        zero_grads(self.params)

    def last_update_norms(self, top: int = 5) -> list[tuple[str, float]]:
        """Largest recent velocity norms, for divergence reports."""
        norms = [(self.params[i].name, float(np.linalg.norm(v) * self.lr))
                 for i, v in self._velocity.items()]
        norms.sort(key=lambda item: -item[1])
        return norms[:top]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"optim.velocity.{self.params[i].name}": v
                for i, v in self._velocity.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        by_name = {p.name: i for i, p in enumerate(self.params)}
        prefix = "optim.velocity."
        for key, v in arrays.items():
            name = key[len(prefix):]
            if name in by_name:
                self._velocity[by_name[name]] = v.copy()


# -- gradient oracle ---------------------------------------------------------------

def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor,
                            eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be deterministic and return a scalar Tensor. The error for
    each coordinate is |analytic - numeric| / max(1, |numeric|) and the
    maximum over all coordinates of ``x`` is returned.
    """
    if not x.requires_grad:
        raise GradientError("finite_difference_check: x must require gradients")
    x.grad = None
    out = f(x)
    if out.data.size != 1:
        raise GradientError(
            f"finite_difference_check: f must return a scalar, got {out.shape}")
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None

    worst = 0.0
    flat = x.data.reshape(-1)
    analytic_flat = analytic.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        hi = f(x).data.reshape(())
        flat[i] = original - eps
        lo = f(x).data.reshape(())
        flat[i] = original
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise GradientError(
                f"finite_difference_check: non-finite value at coordinate {i}")
        numeric = (hi - lo) / (2.0 * eps)
        err = abs(analytic_flat[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, float(err))
    return worst

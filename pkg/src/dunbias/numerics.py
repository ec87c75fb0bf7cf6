"""Small reverse-mode autodiff engine over float64 numpy arrays.

Each op builds a new :class:`Tensor` holding references to its parents and a
closure that pushes the output gradient back to them.  ``backward`` sorts the
graph topologically and runs the closures in reverse order.  Gradients
accumulate with ``+=``; callers reset them with :func:`zero_grad` before every
backward pass (calling ``backward`` twice without a reset doubles the grads).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class NumericError(FloatingPointError):
    """A non-finite value appeared at an op boundary."""


class ShapeError(ValueError):
    pass


def _check_finite(data: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by {where}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), op: str = "leaf"):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, op)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = np.zeros_like(arr) if requires_grad else None
        self._parents = _parents
        self._backward = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    _check_finite(out.data, op)
    out.requires_grad = needs
    out.grad = None
    out._parents = parents if needs else ()
    out._backward = None
    out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _make(a.data + b.data, (a, b), "add")

    def _backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    out._backward = _backward
    return out


def neg(a: Tensor) -> Tensor:
    out = _make(-a.data, (a,), "neg")
    out._backward = lambda g: a._accum(-g)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _make(a.data * b.data, (a, b), "mul")

    def _backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    out._backward = _backward
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = _make(a.data @ b.data, (a, b), "matmul")

    def _backward(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    out._backward = _backward
    return out


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` as a single node; ``b`` has shape (out,)."""
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear dimension mismatch: {x.shape} @ {w.shape}")
    out = _make(x.data @ w.data + b.data, (x, w, b), "linear")

    def _backward(g):
        if x.requires_grad:
            x._accum(g @ w.data.T)
        if w.requires_grad:
            w._accum(x.data.T @ g)
        if b.requires_grad:
            b._accum(g.sum(axis=0))

    out._backward = _backward
    return out


def relu(x: Tensor) -> Tensor:
    gate = x.data > 0
    out = _make(np.maximum(x.data, 0.0), (x,), "relu")
    out._backward = lambda g: x._accum(g * gate)
    return out


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    out = _make(e, (x,), "exp")
    out._backward = lambda g: x._accum(g * e)
    return out


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("log of non-positive value")
    out = _make(np.log(x.data), (x,), "log")
    out._backward = lambda g: x._accum(g / x.data)
    return out


def tsum(x: Tensor, axis=None) -> Tensor:
    out = _make(np.sum(x.data, axis=axis), (x,), "sum")

    def _backward(g):
        if axis is None:
            x._accum(np.broadcast_to(g, x.shape).copy())
        else:
            x._accum(np.broadcast_to(np.expand_dims(g, axis), x.shape).copy())

    out._backward = _backward
    return out


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis), 1.0 / n)


def hstack(cols: list[Tensor]) -> Tensor:
    """Concatenate n×1 (or n×k) tensors along the column axis."""
    widths = [c.shape[1] for c in cols]
    out = _make(np.concatenate([c.data for c in cols], axis=1), tuple(cols), "hstack")

    def _backward(g):
        start = 0
        for c, w in zip(cols, widths):
            if c.requires_grad:
                c._accum(g[:, start:start + w])
            start += w

    out._backward = _backward
    return out


def log_sum_exp(v, axis=None):
    """Stable ``log(sum(exp(v)))``.

    Plain arrays/sequences give a float (or array when ``axis`` is set);
    tensors give a differentiable tensor.
    """
    if isinstance(v, Tensor):
        if v.data.size == 0:
            raise ValueError("log_sum_exp of empty vector")
        m = np.max(v.data, axis=axis, keepdims=True)
        s = np.sum(np.exp(v.data - m), axis=axis, keepdims=True)
        res = m + np.log(s)
        soft = np.exp(v.data - res)
        out_data = res.reshape(()) if axis is None else np.squeeze(res, axis=axis)
        out = _make(out_data, (v,), "log_sum_exp")

        def _backward(g):
            gg = g if axis is None else np.expand_dims(g, axis)
            v._accum(gg * soft)

        out._backward = _backward
        return out
    arr = np.asarray(v, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("log_sum_exp of empty vector")
    m = np.max(arr, axis=axis, keepdims=True)
    res = m + np.log(np.sum(np.exp(arr - m), axis=axis, keepdims=True))
    if axis is None:
        return float(res.reshape(()))
    return np.squeeze(res, axis=axis)


def softmax(v):
    """Softmax of a 1-D vector (array in, array out; tensor in, tensor out)."""
    if isinstance(v, Tensor):
        return exp(log_softmax(v))
    arr = np.asarray(v, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("softmax of empty vector")
    z = np.exp(arr - np.max(arr))
    return z / z.sum()


def log_softmax(v):
    if isinstance(v, Tensor):
        if v.data.ndim != 1:
            raise ShapeError("log_softmax expects a vector")
        shifted = v.data - np.max(v.data)
        out_data = shifted - math.log(np.sum(np.exp(shifted)))
        p = np.exp(out_data)
        out = _make(out_data, (v,), "log_softmax")
        out._backward = lambda g: v._accum(g - p * g.sum())
        return out
    arr = np.asarray(v, dtype=np.float64)
    # shift first so large magnitudes do not cancel against the normaliser
    shifted = arr - np.max(arr)
    return shifted - math.log(np.sum(np.exp(shifted)))


def gaussian_nll(y, mean, log_var):
    """Per-element ``0.5 log 2π + 0.5 log_var + (y - mean)² / (2 exp(log_var))``.

    With float arguments this returns a float.  With tensor ``mean`` and/or
    ``log_var`` it returns a tensor broadcast over ``y``; ``y`` is treated as
    data and gets no gradient.
    """
    if not isinstance(mean, Tensor) and not isinstance(log_var, Tensor):
        yv, mv, lv = np.asarray(y, float), np.asarray(mean, float), np.asarray(log_var, float)
        if not (np.all(np.isfinite(yv)) and np.all(np.isfinite(mv)) and np.all(np.isfinite(lv))):
            raise NumericError("gaussian_nll got non-finite input")
        val = 0.5 * LOG_2PI + 0.5 * lv + (yv - mv) ** 2 / (2.0 * np.exp(lv))
        return float(val) if np.ndim(val) == 0 else val
    y_arr = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    mean, log_var = as_tensor(mean), as_tensor(log_var)
    resid = y_arr - mean.data
    inv_var = np.exp(-log_var.data)
    out = _make(0.5 * LOG_2PI + 0.5 * log_var.data + 0.5 * resid**2 * inv_var, (mean, log_var), "gaussian_nll")

    def _backward(g):
        if mean.requires_grad:
            mean._accum(_unbroadcast(-g * resid * inv_var, mean.shape))
        if log_var.requires_grad:
            log_var._accum(_unbroadcast(g * (0.5 - 0.5 * resid**2 * inv_var), log_var.shape))

    out._backward = _backward
    return out


@dataclass
class BatchNormState:
    """Learned affine parameters plus running statistics for one BN layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def create(cls, width: int) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(width), requires_grad=True),
            beta=Tensor(np.zeros(width), requires_grad=True),
            running_mean=np.zeros(width),
            running_var=np.ones(width),
        )


class DegenerateBatchError(ValueError):
    pass


def batch_norm(x: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    gamma, beta = state.gamma, state.beta
    if mode == "eval":
        inv_std = 1.0 / np.sqrt(state.running_var + BN_EPS)
        xhat = (x.data - state.running_mean) * inv_std
        out = _make(gamma.data * xhat + beta.data, (x, gamma, beta), "batch_norm")

        def _backward_eval(g):
            if x.requires_grad:
                x._accum(g * gamma.data * inv_std)
            if gamma.requires_grad:
                gamma._accum((g * xhat).sum(axis=0))
            if beta.requires_grad:
                beta._accum(g.sum(axis=0))

        out._backward = _backward_eval
        return out
    if mode != "train":
        raise ValueError(f"unknown batch-norm mode {mode!r}")
    n = x.shape[0]
    if n < 2:
        raise DegenerateBatchError(f"batch norm in train mode needs n >= 2, got {n}")
    mu = x.data.mean(axis=0)
    centred = x.data - mu
    var = np.einsum("ij,ij->j", centred, centred) / n
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = centred * inv_std
    # running variance uses the unbiased estimate
    state.running_mean = (1 - BN_MOMENTUM) * state.running_mean + BN_MOMENTUM * mu
    state.running_var = (1 - BN_MOMENTUM) * state.running_var + BN_MOMENTUM * var * n / (n - 1)
    out = _make(gamma.data * xhat + beta.data, (x, gamma, beta), "batch_norm")

    def _backward(g):
        if x.requires_grad:
            gx = g * gamma.data
            proj = np.einsum("ij,ij->j", gx, xhat) / n
            x._accum(inv_std * (gx - gx.mean(axis=0) - xhat * proj))
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=0))
        if beta.requires_grad:
            beta._accum(g.sum(axis=0))

    out._backward = _backward
    return out


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, mode: str = "train") -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, Tensor(keep))


def topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable ``requires_grad`` leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topo_order(loss)
    interior = [t for t in order if t._backward is not None and t.requires_grad]
    for t in interior:
        t.grad = None
    loss._accum(np.ones_like(loss.data))
    for t in reversed(interior):
        if t.grad is not None:
            t._backward(t.grad)
            t.grad = None


def zero_grad(params) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


@dataclass
class OptimizerState:
    """Momentum SGD with L2 weight decay folded into the gradient."""

    learning_rate: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-5
    velocity: list[np.ndarray] = field(default_factory=list)


def sgd_step(params: list[Tensor], state: OptimizerState, grads: list[np.ndarray] | None = None) -> None:
    """``v <- mu v + (g + wd theta)``; ``theta <- theta - lr v`` in place."""
    if grads is None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    if len(grads) != len(params):
        raise ShapeError("params and grads differ in length")
    if not state.velocity:
        state.velocity = [np.zeros_like(p.data) for p in params]
    for p, g, v in zip(params, grads, state.velocity):
        if g.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        v *= state.momentum
        v += g + state.weight_decay * p.data
        p.data = p.data - state.learning_rate * v

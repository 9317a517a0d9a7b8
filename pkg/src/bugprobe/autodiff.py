"""Minimal reverse-mode automatic differentiation over dense matrices.

Only the operations a single attention block and its classifier head need
are implemented; there is no broadcasting zoo and no GPU path. Everything
runs on numpy arrays in float32 or float64. Reductions use numpy's fixed
summation order, so identical inputs always produce bit-identical outputs.

A computation graph is built implicitly: each op's output remembers its
parents and a backward rule. ``backward(loss)`` walks the graph once in
reverse topological order and accumulates ``d(loss)/d(leaf)`` into the
``grad`` array of every tensor created with ``requires_grad=True``. Grads
accumulate across calls (used for batching), so callers zero them between
optimizer steps.

Training runs in float32; gradient checking re-runs the same graph code in
float64 because float32 finite differences are too noisy to act as an
oracle.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import BugprobeError

LN_EPS = 1e-5

_ALLOWED_DTYPES = (np.float32, np.float64)


class AutodiffError(BugprobeError):
    """Shape mismatch, bad dtype, or graph misuse."""


class Tensor:
    """A dense array plus an optional gradient and backward rule.

    Scalars are shape ``()``, vectors ``(n,)``, matrices ``(r, c)``.
    ``grad`` is allocated (zeros) at construction for any tensor that
    requires grad, so a leaf that never participates in a loss reports an
    exactly-zero gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_rule",
                 "_backprop_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: tuple = (), _backward_rule: Optional[Callable] = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float32)
        if arr.ndim > 3:
            raise AutodiffError(f"at most 3 dims supported, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self._parents = _parents
        self._backward_rule = _backward_rule
        self._backprop_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise AutodiffError(f"item() needs a single-element tensor, shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # Small amount of operator sugar for readable model code.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _result(data: np.ndarray, parents: tuple, rule: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, _parents=parents, _backward_rule=rule)
    return Tensor(data)


def _check_same_dtype(*tensors: Tensor):
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise AutodiffError(f"mixed dtypes in one op: {sorted(d.name for d in dtypes)}")


def _check_2d(t: Tensor, what: str):
    if t.data.ndim != 2:
        raise AutodiffError(f"{what} must be 2-D, got shape {t.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    _check_2d(a, "matmul lhs")
    _check_2d(b, "matmul rhs")
    if a.shape[1] != b.shape[0]:
        raise AutodiffError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def rule(g):
        if a.requires_grad:
            a.grad += g @ b.data.T
        if b.requires_grad:
            b.grad += a.data.T @ g

    return _result(out, (a, b), rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise AutodiffError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def rule(g):
        if a.requires_grad:
            a.grad += g
        if b.requires_grad:
            b.grad += g

    return _result(out, (a, b), rule)


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """Add a length-c vector to every row of an (r, c) matrix."""
    _check_same_dtype(x, v)
    _check_2d(x, "add_rowvec matrix")
    if v.data.ndim != 1 or v.shape[0] != x.shape[1]:
        raise AutodiffError(f"add_rowvec vector shape {v.shape} vs matrix {x.shape}")
    out = x.data + v.data[None, :]

    def rule(g):
        if x.requires_grad:
            x.grad += g
        if v.requires_grad:
            v.grad += g.sum(axis=0)

    return _result(out, (x, v), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise AutodiffError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    out = a.data * b.data

    def rule(g):
        if a.requires_grad:
            a.grad += g * b.data
        if b.requires_grad:
            b.grad += g * a.data

    return _result(out, (a, b), rule)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    out = a.data * c

    def rule(g):
        if a.requires_grad:
            a.grad += g * c

    return _result(out, (a,), rule)


def transpose(a: Tensor) -> Tensor:
    _check_2d(a, "transpose input")
    out = np.ascontiguousarray(a.data.T)

    def rule(g):
        if a.requires_grad:
            a.grad += g.T

    return _result(out, (a,), rule)


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise AutodiffError("concat_rows of nothing")
    _check_same_dtype(*tensors)
    for t in tensors:
        _check_2d(t, "concat_rows input")
    widths = {t.shape[1] for t in tensors}
    if len(widths) > 1:
        raise AutodiffError(f"concat_rows column mismatch: {sorted(widths)}")
    out = np.concatenate([t.data for t in tensors], axis=0)
    offsets = np.cumsum([0] + [t.shape[0] for t in tensors])

    def rule(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t.grad += g[lo:hi]

    return _result(out, tuple(tensors), rule)


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise AutodiffError("concat_cols of nothing")
    _check_same_dtype(*tensors)
    for t in tensors:
        _check_2d(t, "concat_cols input")
    heights = {t.shape[0] for t in tensors}
    if len(heights) > 1:
        raise AutodiffError(f"concat_cols row mismatch: {sorted(heights)}")
    out = np.concatenate([t.data for t in tensors], axis=1)
    offsets = np.cumsum([0] + [t.shape[1] for t in tensors])

    def rule(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t.grad += g[:, lo:hi]

    return _result(out, tuple(tensors), rule)


def cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Column slice x[:, start:stop] with scatter-add backward."""
    _check_2d(x, "cols input")
    if not (0 <= start < stop <= x.shape[1]):
        raise AutodiffError(f"cols [{start}:{stop}] out of range for shape {x.shape}")
    out = x.data[:, start:stop].copy()

    def rule(g):
        if x.requires_grad:
            x.grad[:, start:stop] += g

    return _result(out, (x,), rule)


def row(x: Tensor, i: int) -> Tensor:
    """Row i as a (1, c) matrix."""
    _check_2d(x, "row input")
    if not (0 <= i < x.shape[0]):
        raise AutodiffError(f"row {i} out of range for shape {x.shape}")
    out = x.data[i:i + 1, :].copy()

    def rule(g):
        if x.requires_grad:
            x.grad[i:i + 1, :] += g

    return _result(out, (x,), rule)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def rule(g):
        if x.requires_grad:
            x.grad += g

    return _result(out, (x,), rule)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """Smooth gelu (tanh form), elementwise."""
    xd = x.data
    inner = _GELU_C * (xd + _GELU_A * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def rule(g):
        if x.requires_grad:
            d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * xd ** 2)
            x.grad += g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t ** 2) * d_inner)

    return _result(out.astype(xd.dtype), (x,), rule)


def softmax_rows(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Row-wise softmax; masked-out entries (mask False) are exactly 0.

    Numerically stabilized by per-row max subtraction over the visible
    entries. Raises if any row is fully masked.
    """
    _check_2d(x, "softmax input")
    xd = x.data
    if mask is None:
        visible = xd
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != xd.shape:
            raise AutodiffError(f"mask shape {mask.shape} vs input {xd.shape}")
        if not mask.any(axis=1).all():
            raise AutodiffError("softmax row with every entry masked")
        visible = np.where(mask, xd, -np.inf)
    m = visible.max(axis=1, keepdims=True)
    e = np.exp(visible - m)
    s = e.sum(axis=1, keepdims=True)
    out = (e / s).astype(xd.dtype)

    def rule(g):
        if x.requires_grad:
            dot = (g * out).sum(axis=1, keepdims=True)
            x.grad += out * (g - dot)

    return _result(out, (x,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Per-row normalization to zero mean / unit variance, then affine."""
    _check_same_dtype(x, gain, bias)
    _check_2d(x, "layer_norm input")
    c = x.shape[1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise AutodiffError(f"layer_norm gain/bias must be ({c},), got {gain.shape}/{bias.shape}")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    out = (xhat * gain.data[None, :] + bias.data[None, :]).astype(xd.dtype)

    def rule(g):
        if gain.requires_grad:
            gain.grad += (g * xhat).sum(axis=0)
        if bias.requires_grad:
            bias.grad += g.sum(axis=0)
        if x.requires_grad:
            gxh = g * gain.data[None, :]
            x.grad += inv * (gxh
                             - gxh.mean(axis=1, keepdims=True)
                             - xhat * (gxh * xhat).mean(axis=1, keepdims=True))

    return _result(out, (x, gain, bias), rule)


def sigmoid_value(z: float) -> float:
    """Stable scalar sigmoid (plain float, not part of the graph)."""
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def bce_with_logits(logit: Tensor, y: int) -> Tensor:
    """Binary cross-entropy between sigmoid(logit) and label y, computed stably.

    loss = log(1 + exp(-logit)) for y=1, log(1 + exp(logit)) for y=0.
    """
    if y not in (0, 1):
        raise AutodiffError(f"label must be 0 or 1, got {y!r}")
    if logit.data.size != 1:
        raise AutodiffError(f"bce needs a single-element logit, shape {logit.shape}")
    z = float(logit.data.reshape(()))
    t = -z if y == 1 else z
    # softplus(t) = max(t, 0) + log1p(exp(-|t|))
    loss = max(t, 0.0) + math.log1p(math.exp(-abs(t)))
    out = np.asarray(loss, dtype=logit.data.dtype)

    def rule(g):
        if logit.requires_grad:
            d = logit.data.dtype.type(sigmoid_value(z) - y)
            logit.grad += (g * d).reshape(logit.shape)

    return _result(out, (logit,), rule)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every participating tensor with d(loss)/d(tensor)."""
    if loss.data.shape != ():
        raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise AutodiffError("loss does not depend on any tensor that requires grad")
    if loss._backprop_done:
        raise AutodiffError("backward already ran on this graph; rebuild the forward pass")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward_rule is not None:
            node._backward_rule(node.grad)
    loss._backprop_done = True

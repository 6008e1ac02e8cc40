"""Reverse-mode automatic differentiation over dense float32 matrices.

The operation set is exactly what the visual-semantic encoder and its
training losses need: affine maps, gather/slice/concat plumbing, layer
normalization, relu, row-wise softmax and negative log-likelihood. Graphs
are recorded implicitly on output tensors; ``backward`` walks the recorded
operations once, in reverse topological order, accumulating gradients into
every reachable leaf.

A central-finite-difference estimator (``finite_difference_grad``) is kept
here as the independent oracle for gradient checks; it never touches the
recorded graph.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

from .errors import OvisError

PROB_CLAMP = 1e-12  # lower bound on probabilities before log
MASK_FILL = -1e9  # additive logit penalty for masked attention slots
LAYER_NORM_EPS = 1e-5


class AutodiffError(OvisError):
    pass


class ShapeMismatchError(AutodiffError):
    pass


class NonFiniteValueError(AutodiffError):
    pass


_grad_enabled = True
_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle finiteness validation of every op output (slow; for tests)."""
    global _debug_checks
    _debug_checks = enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_matrix(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeMismatchError(f"tensors are 2-D; got shape {arr.shape}")
    return np.ascontiguousarray(arr)


class Tensor:
    """A 2-D float32 value, optionally carrying its producing operation.

    Tensors are immutable values: operations return fresh tensors and never
    write into their inputs. ``grad`` is populated by ``backward``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_matrix(data)
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteValueError("tensor contains non-finite values")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError(f"item() on tensor of shape {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def leaf(data, requires_grad: bool = True) -> Tensor:
    """Create a leaf tensor (a trainable parameter by default)."""
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    """Create a non-differentiable tensor (inputs, fixed embeddings)."""
    return Tensor(data, requires_grad=False)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Internal op-output constructor; skips recording when grads are off."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _debug_checks and not np.all(np.isfinite(data)):
        raise NonFiniteValueError("operation produced non-finite values")
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor reachable from ``loss``.

    ``loss`` must be scalar (1x1). Gradients are freshly zeroed for this
    pass; leaves that do not participate in the graph are left untouched
    (treat a missing grad as zero).
    """
    if loss.shape != (1, 1):
        raise ShapeMismatchError(f"backward requires a scalar loss, got {loss.shape}")

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
        for parent in reversed(node._parents):
            stack.append((parent, False))

    for node in topo:
        node.grad = np.zeros_like(node.data)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is not None:
            node._backward_fn(node.grad)


# ---------------------------------------------------------------------------
# forward operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeMismatchError(f"matmul {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g @ b.data.T
        if b.requires_grad:
            b.grad += a.data.T @ g

    return _make(data, (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise addition; the only broadcast allowed is a 1-row bias."""
    if a.shape == b.shape:
        pass
    elif b.rows == 1 and b.cols == a.cols:
        pass
    elif a.rows == 1 and a.cols == b.cols:
        a, b = b, a
    else:
        raise ShapeMismatchError(f"add {a.shape} + {b.shape}")
    data = a.data + b.data

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g
        if b.requires_grad:
            if b.shape == a.shape:
                b.grad += g
            else:
                b.grad += g.sum(axis=0, keepdims=True)

    return _make(data, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    s32 = np.float32(s)
    data = a.data * s32

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g * s32

    return _make(data, (a,), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mul {a.shape} * {b.shape}")
    data = a.data * b.data

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g * b.data
        if b.requires_grad:
            b.grad += g * a.data

    return _make(data, (a, b), bw)


def row_select(a: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows by index (embedding lookup). Duplicates accumulate grads."""
    idx = np.asarray(ids, dtype=np.intp).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= a.rows):
        raise ShapeMismatchError(f"row_select indices out of range for {a.shape}")
    data = a.data[idx, :] if idx.size else np.zeros((0, a.cols), dtype=np.float32)

    def bw(g: np.ndarray) -> None:
        if a.requires_grad and idx.size:
            np.add.at(a.grad, idx, g)

    return _make(data, (a,), bw)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start <= stop <= a.rows):
        raise ShapeMismatchError(f"slice_rows [{start}:{stop}] of {a.shape}")
    data = a.data[start:stop, :].copy()

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad[start:stop, :] += g

    return _make(data, (a,), bw)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start <= stop <= a.cols):
        raise ShapeMismatchError(f"slice_cols [{start}:{stop}] of {a.shape}")
    data = np.ascontiguousarray(a.data[:, start:stop])

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad[:, start:stop] += g

    return _make(data, (a,), bw)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeMismatchError("concat_rows of zero tensors")
    cols = parts[0].cols
    if any(p.cols != cols for p in parts):
        raise ShapeMismatchError("concat_rows with mismatched column counts")
    data = np.concatenate([p.data for p in parts], axis=0)
    offsets = np.cumsum([0] + [p.rows for p in parts])

    def bw(g: np.ndarray) -> None:
        for part, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            if part.requires_grad:
                part.grad += g[start:stop, :]

    return _make(data, tuple(parts), bw)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeMismatchError("concat_cols of zero tensors")
    rows = parts[0].rows
    if any(p.rows != rows for p in parts):
        raise ShapeMismatchError("concat_cols with mismatched row counts")
    data = np.concatenate([p.data for p in parts], axis=1)
    offsets = np.cumsum([0] + [p.cols for p in parts])

    def bw(g: np.ndarray) -> None:
        for part, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            if part.requires_grad:
                part.grad += g[:, start:stop]

    return _make(data, tuple(parts), bw)


def transpose(a: Tensor) -> Tensor:
    data = np.ascontiguousarray(a.data.T)

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g.T

    return _make(data, (a,), bw)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, np.float32(0))

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g * (a.data > 0)

    return _make(data, (a,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Row-wise standardization followed by an affine map (gamma, beta 1xd)."""
    if gamma.shape != (1, x.cols) or beta.shape != (1, x.cols):
        raise ShapeMismatchError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} for input {x.shape}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=1, keepdims=True)
    inv = np.float32(1.0) / np.sqrt(var + np.float32(eps))
    xhat = centered * inv
    data = xhat * gamma.data + beta.data

    def bw(g: np.ndarray) -> None:
        if gamma.requires_grad:
            gamma.grad += (g * xhat).sum(axis=0, keepdims=True)
        if beta.requires_grad:
            beta.grad += g.sum(axis=0, keepdims=True)
        if x.requires_grad:
            dxhat = g * gamma.data
            mean_dxhat = dxhat.mean(axis=1, keepdims=True)
            mean_dxhat_xhat = (dxhat * xhat).mean(axis=1, keepdims=True)
            x.grad += inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)

    return _make(data, (x, gamma, beta), bw)


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax with max-subtraction.

    ``mask`` is an optional boolean array of the same shape; False entries
    receive a -1e9 logit penalty, which underflows to an exact zero
    probability whenever the row has at least one visible entry.
    """
    z = x.data
    if mask is not None:
        if mask.shape != x.shape:
            raise ShapeMismatchError(f"softmax mask {mask.shape} for input {x.shape}")
        z = z + np.where(mask, np.float32(0), np.float32(MASK_FILL))
    if x.rows == 0:
        return _make(z.copy(), (x,), lambda g: None)
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            dot = (g * y).sum(axis=1, keepdims=True)
            x.grad += y * (g - dot)

    return _make(y, (x,), bw)


def nll(
    probs: Tensor,
    targets: Sequence[int],
    weights: Sequence[float] | None = None,
) -> Tensor:
    """Weighted negative log-likelihood over rows of a probability matrix.

    With ``weights`` omitted every row gets weight 1/rows (a plain mean).
    Probabilities are clamped to >= 1e-12 before the log, so an adversarial
    zero yields a large finite loss instead of -inf.
    """
    idx = np.asarray(targets, dtype=np.intp).reshape(-1)
    if idx.size != probs.rows:
        raise ShapeMismatchError(f"{idx.size} targets for {probs.rows} rows")
    if idx.size == 0:
        raise ShapeMismatchError("nll requires at least one row")
    if idx.min() < 0 or idx.max() >= probs.cols:
        raise ShapeMismatchError("nll target id out of range")
    if weights is None:
        w = np.full(idx.size, 1.0 / idx.size, dtype=np.float32)
    else:
        w = np.asarray(weights, dtype=np.float32).reshape(-1)
        if w.size != idx.size:
            raise ShapeMismatchError(f"{w.size} weights for {idx.size} rows")
    p = np.maximum(probs.data[np.arange(idx.size), idx], np.float32(PROB_CLAMP))
    data = np.array([[np.dot(w, -np.log(p))]], dtype=np.float32)

    def bw(g: np.ndarray) -> None:
        if probs.requires_grad:
            gs = g[0, 0]
            probs.grad[np.arange(idx.size), idx] += -w / p * gs

    return _make(data, (probs,), bw)


def sum_all(x: Tensor) -> Tensor:
    data = np.array([[x.data.sum(dtype=np.float32)]], dtype=np.float32)

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += g[0, 0]

    return _make(data, (x,), bw)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def finite_difference_grad(
    f: Callable[[np.ndarray], float],
    theta: np.ndarray,
    h: float | np.ndarray = 1e-3,
) -> np.ndarray:
    """Central finite differences of a scalar function, one coordinate at
    a time: (f(theta + h e_i) - f(theta - h e_i)) / 2h.

    ``h`` may be a scalar or a per-coordinate array. The function is probed
    on copies; ``theta`` is never modified. Independent of the recorded
    graph by construction.
    """
    theta = np.asarray(theta, dtype=np.float32)
    steps = np.broadcast_to(np.asarray(h, dtype=np.float64), theta.shape)
    if np.any(steps <= 0):
        raise ValueError("finite difference step must be positive")
    grad = np.zeros(theta.shape, dtype=np.float64)
    flat = theta.reshape(-1)
    step_flat = steps.reshape(-1)
    for i in range(flat.size):
        probe = flat.copy()
        probe[i] = flat[i] + step_flat[i]
        f_plus = float(f(probe.reshape(theta.shape)))
        probe[i] = flat[i] - step_flat[i]
        f_minus = float(f(probe.reshape(theta.shape)))
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NonFiniteValueError("function value is not finite at probe point")
        grad.reshape(-1)[i] = (f_plus - f_minus) / (2.0 * step_flat[i])
    return grad.reshape(theta.shape)


def fd_step_sizes(theta: np.ndarray, base: float = 1e-3) -> np.ndarray:
    """Per-coordinate step h_i = base * (1 + |theta_i|)."""
    return base * (1.0 + np.abs(np.asarray(theta, dtype=np.float64)))

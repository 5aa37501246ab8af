"""Minimal dense-tensor autodiff: float64 arrays, reverse-mode gradients.

Every primitive the models need is here: matmul, broadcasting add/mul,
relu, row softmax, layer norm, dropout, concat/slice, cross-entropy,
scaled dot-product attention, and a finite-difference gradient checker.
Graphs are implicit (each Tensor remembers its parents and a backward
closure); `backward` topologically sorts and visits each node exactly once.

No GPU, no sparse tensors, no graph rewriting. Training math is float64
throughout so gradient checks can use tight tolerances.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

# Test hook: when True, matmul backward scales the left-operand gradient
# by 2 so the finite-difference checker has a known fault to detect.
_INJECT_MATMUL_FAULT = False


class NonFiniteLossError(ValueError):
    """NaN/Inf reached the loss; upstream op produced non-finite values."""


class Tensor:
    """Dense float64 array with an optional gradient slot.

    `grad` is lazily allocated on the first backward accumulation.
    Tensors created by ops carry the closure that routes their output
    gradient to their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; canonical API is the module-level functions.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(out_data: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(out_data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Reverse-mode pass from a scalar loss; gradients accumulate by +=."""
    if loss.data.shape != ():
        raise ValueError(f"backward expects a scalar, got shape {loss.data.shape}")
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
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    loss._accumulate(np.ones((), dtype=np.float64))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """C = A @ B. Backward: dA = dC @ B^T, dB = A^T @ dC."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            ga = g @ b.data.T
            if _INJECT_MATMUL_FAULT:
                ga = ga * 2.0
            a._accumulate(ga)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _wrap(a.data @ b.data, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    def bwd(g: np.ndarray) -> None:
        a._accumulate(g.T)

    return _wrap(a.data.T, (a,), bwd)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b)

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _wrap(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b) -> Tensor:
    b = _coerce(b)

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(-_unbroadcast(g, b.shape))

    return _wrap(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    b = _coerce(b)

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _wrap(a.data * b.data, (a, b), bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bwd(g: np.ndarray) -> None:
        x._accumulate(g * mask)

    return _wrap(np.where(mask, x.data, 0.0), (x,), bwd)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g: np.ndarray) -> None:
        inner = (g * y).sum(axis=-1, keepdims=True)
        x._accumulate(y * (g - inner))

    return _wrap(y, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (population variance), then affine."""
    d = x.shape[-1]
    if d < 2:
        raise ValueError("layer_norm needs at least 2 features per token")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mean) * inv_std

    def bwd(g: np.ndarray) -> None:
        if gamma.requires_grad:
            gamma._accumulate((g * x_hat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            mean_gx = gx.mean(axis=-1, keepdims=True)
            mean_gx_xhat = (gx * x_hat).mean(axis=-1, keepdims=True)
            x._accumulate(inv_std * (gx - mean_gx - x_hat * mean_gx_xhat))

    return _wrap(x_hat * gamma.data + beta.data, (x, gamma, beta), bwd)


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero with prob p, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = rng.random(x.shape) >= p
    scale = 1.0 / (1.0 - p)
    factor = keep * scale

    def bwd(g: np.ndarray) -> None:
        x._accumulate(g * factor)

    return _wrap(x.data * factor, (x,), bwd)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-D tensors along the last axis."""
    widths = [t.shape[1] for t in parts]
    offsets = np.cumsum([0] + widths)

    def bwd(g: np.ndarray) -> None:
        for t, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t._accumulate(g[:, lo:hi])

    return _wrap(np.concatenate([t.data for t in parts], axis=1), tuple(parts), bwd)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-D tensors along the first axis."""
    heights = [t.shape[0] for t in parts]
    offsets = np.cumsum([0] + heights)

    def bwd(g: np.ndarray) -> None:
        for t, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t._accumulate(g[lo:hi])

    return _wrap(np.concatenate([t.data for t in parts], axis=0), tuple(parts), bwd)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    def bwd(g: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        x._accumulate(full)

    return _wrap(x.data[:, start:stop].copy(), (x,), bwd)


def mean_rows(x: Tensor) -> Tensor:
    """Mean over axis 0 of a 2-D tensor, keeping a [1 x d] shape."""
    n = x.shape[0]

    def bwd(g: np.ndarray) -> None:
        x._accumulate(np.broadcast_to(g / n, x.shape).copy())

    return _wrap(x.data.mean(axis=0, keepdims=True), (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    def bwd(g: np.ndarray) -> None:
        x._accumulate(np.broadcast_to(g, x.shape).copy())

    return _wrap(x.data.sum(), (x,), bwd)


# ---------------------------------------------------------------------------
# Composite blocks
# ---------------------------------------------------------------------------

def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V, differentiable through all inputs."""
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"attention d_k mismatch: Q {q.shape} vs K {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"attention K/V row mismatch: {k.shape} vs {v.shape}")
    d_k = q.shape[1]
    scores = mul(matmul(q, transpose(k)), 1.0 / math.sqrt(d_k))
    return matmul(softmax_rows(scores), v)


def ffn(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Two dense layers with a ReLU between them."""
    return add(matmul(relu(add(matmul(x, w1), b1)), w2), b2)


def cross_entropy(logits: Tensor, labels: Sequence[int],
                  class_weights: np.ndarray | None = None) -> Tensor:
    """Mean negative log softmax probability of the true class.

    Log-sum-exp stabilized. Raises NonFiniteLossError when non-finite
    values reach the loss (NaN surfacing point for the whole graph).
    Optional per-class weights turn the mean into a weighted mean.
    """
    n, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ValueError(f"need {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range [0, {c})")
    if not np.all(np.isfinite(logits.data)):
        raise NonFiniteLossError("non-finite logits reached the loss")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - lse
    if class_weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(class_weights, dtype=np.float64)[labels]
    w_sum = w.sum()
    loss = -(w * log_probs[np.arange(n), labels]).sum() / w_sum

    def bwd(g: np.ndarray) -> None:
        grad = np.exp(log_probs)
        grad[np.arange(n), labels] -= 1.0
        logits._accumulate(g * grad * (w / w_sum)[:, None])

    return _wrap(np.float64(loss), (logits,), bwd)


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Plain-array row softmax for metrics/prediction paths (no graph)."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def _rel_err(g_ad: float, g_fd: float) -> float:
    return abs(g_ad - g_fd) / max(1e-8, abs(g_ad) + abs(g_fd))


def grad_check_report(forward: Callable[[], Tensor],
                      params: dict[str, Tensor],
                      h: float = 1e-5,
                      coords_per_tensor: int = 100,
                      seed: int = 0) -> list[tuple[str, float]]:
    """Central-difference check of reverse-mode gradients, per parameter.

    `forward` must rebuild the graph on every call and return a scalar.
    For each parameter, up to `coords_per_tensor` coordinates are sampled
    (all of them when the tensor is smaller). Returns (name, max relative
    error) pairs sorted by error descending; relative error is
    |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"step h must be in [1e-6, 1e-4], got {h}")
    for p in params.values():
        p.zero_grad()
    loss = forward()
    if loss.data.shape != ():
        raise ValueError("forward must return a scalar")
    backward(loss)
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in params.items()}

    rng = np.random.default_rng(seed)
    results: list[tuple[str, float]] = []
    for name, p in params.items():
        flat = p.data.reshape(-1)
        if flat.size <= coords_per_tensor:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=coords_per_tensor, replace=False)
        g_ad_flat = analytic[name].reshape(-1)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            f_plus = float(forward().data)
            flat[c] = orig - h
            f_minus = float(forward().data)
            flat[c] = orig
            g_fd = (f_plus - f_minus) / (2.0 * h)
            worst = max(worst, _rel_err(float(g_ad_flat[c]), g_fd))
        results.append((name, worst))
    results.sort(key=lambda kv: kv[1], reverse=True)
    return results


def grad_check(forward: Callable[[], Tensor],
               params: Iterable[Tensor],
               h: float = 1e-5,
               coords_per_tensor: int = 100,
               seed: int = 0) -> float:
    """Max relative error between reverse-mode and central differences."""
    named = {f"p{i}": p for i, p in enumerate(params)}
    report = grad_check_report(forward, named, h=h,
                               coords_per_tensor=coords_per_tensor, seed=seed)
    return max((err for _, err in report), default=0.0)

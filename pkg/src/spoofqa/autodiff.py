"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Just enough operator coverage for a small transformer: elementwise arithmetic,
matmul, reductions, shape ops, embedding gather, GELU, plus softmax/layer-norm/
cross-entropy composites. Gradients are exact (no approximations), which the
training module verifies against central finite differences.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph construction (inference paths)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents: tuple[Tensor, ...] = ()

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            # copy: closures may hand the same array to several parents
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, emitted = stack.pop()
            if emitted:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def ensure_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape that was broadcast up."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def add(a, b) -> Tensor:
    a, b = ensure_tensor(a), ensure_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.data.shape))

    return _node(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = ensure_tensor(a), ensure_tensor(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.data.shape))

    return _node(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = ensure_tensor(a), ensure_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = ensure_tensor(a), ensure_tensor(b)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = ensure_tensor(a), ensure_tensor(b)
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a.accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b.accumulate(_unbroadcast(gb, b.data.shape))

    return _node(data, (a, b), backward)


def pow_const(a, exponent: float) -> Tensor:
    a = ensure_tensor(a)
    data = a.data**exponent

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * exponent * a.data ** (exponent - 1.0))

    return _node(data, (a,), backward)


def exp(a) -> Tensor:
    a = ensure_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * data)

    return _node(data, (a,), backward)


def log(a) -> Tensor:
    a = ensure_tensor(a)
    data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g / a.data)

    return _node(data, (a,), backward)


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = ensure_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a.accumulate(np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate(np.broadcast_to(g, a.data.shape).copy())

    return _node(data, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = ensure_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = ensure_tensor(a)
    data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g.reshape(a.data.shape))

    return _node(data, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = ensure_tensor(a)
    data = a.data.transpose(axes)
    inverse = np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g.transpose(inverse))

    return _node(data, (a,), backward)


def concat(parts, axis: int) -> Tensor:
    parts = [ensure_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(start, stop)
                p.accumulate(g[tuple(index)])

    return _node(data, tuple(parts), backward)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    a = ensure_tensor(a)
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    data = a.data[index]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[index] = g
            a.accumulate(full)

    return _node(data, (a,), backward)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: out[...] = weight[ids[...]]."""
    ids = np.asarray(ids, dtype=np.int64)
    data = weight.data[ids]

    def backward(g):
        if weight.requires_grad:
            gw = np.zeros_like(weight.data)
            np.add.at(gw, ids, g)
            weight.accumulate(gw)

    return _node(data, (weight,), backward)


def take_rows(a, row_idx: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor by integer index (with repetition allowed)."""
    a = ensure_tensor(a)
    row_idx = np.asarray(row_idx, dtype=np.int64)
    data = a.data[row_idx]

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, row_idx, g)
            a.accumulate(ga)

    return _node(data, (a,), backward)


def take_per_row(a, col_idx: np.ndarray) -> Tensor:
    """out[i] = a[i, col_idx[i]] for a 2-D tensor."""
    a = ensure_tensor(a)
    col_idx = np.asarray(col_idx, dtype=np.int64)
    rows = np.arange(a.data.shape[0])
    data = a.data[rows, col_idx]

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, (rows, col_idx), g)
            a.accumulate(ga)

    return _node(data, (a,), backward)


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = ensure_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    data = x * cdf

    def backward(g):
        if a.requires_grad:
            pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
            a.accumulate(g * (cdf + x * pdf))

    return _node(data, (a,), backward)


def dropout(a, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; the mask is drawn from the supplied generator."""
    if p <= 0.0:
        return ensure_tensor(a)
    a = ensure_tensor(a)
    keep = (rng.random(a.data.shape) >= p).astype(np.float64) / (1.0 - p)
    return mul(a, Tensor(keep))


def softmax(a, axis: int = -1, scale: float = 1.0, shift: np.ndarray | None = None) -> Tensor:
    """Row-stable softmax(a * scale + shift) as a single primitive.

    ``shift`` is a constant (e.g. a -inf causal mask); folding it in here keeps
    attention from materializing extra full-size intermediates.
    """
    a = ensure_tensor(a)
    x = a.data * scale + shift if shift is not None else (a.data * scale if scale != 1.0 else a.data)
    x = x - np.max(x, axis=axis, keepdims=True)
    np.exp(x, out=x)
    data = x / x.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            weighted = g * data
            weighted -= data * weighted.sum(axis=axis, keepdims=True)
            if scale != 1.0:
                weighted *= scale
            a.accumulate(weighted)

    return _node(data, (a,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then scale and shift (fused backward)."""
    x, gain, bias = ensure_tensor(x), ensure_tensor(gain), ensure_tensor(bias)
    n = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    normed = centered * inv
    data = normed * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            gain.accumulate(_unbroadcast(g * normed, gain.data.shape))
        if bias.requires_grad:
            bias.accumulate(_unbroadcast(g, bias.data.shape))
        if x.requires_grad:
            gn = g * gain.data  # gradient w.r.t. the normalized values
            term = gn - gn.mean(axis=-1, keepdims=True)
            term -= normed * np.mean(gn * normed, axis=-1, keepdims=True)
            x.accumulate(term * inv)

    return _node(data, (x, gain, bias), backward)


def cross_entropy_mean(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy of 2-D logits rows against integer targets."""
    targets = np.asarray(targets, dtype=np.int64)
    shift = sub(logits, Tensor(np.max(logits.data, axis=1, keepdims=True)))
    lse = log(tensor_sum(exp(shift), axis=1))
    picked = take_per_row(shift, targets)
    return mean(sub(lse, picked))

"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

The op set is deliberately small: elementwise arithmetic, matmul, reductions,
reshape/transpose/concat/slice, exp/log/sqrt, sigmoid, GELU, softmax,
log-softmax, embedding lookup, and scaled dot-product multi-head attention.
Everything trainable in this package is a patch-token transformer built from
these ops, so nothing else is needed. All values are float64 and all kernels
are deterministic (no parallel reduction reordering), which is what makes the
1e-4 finite-difference tolerance and byte-identical checkpoints achievable.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "tensor",
    "concat",
    "embedding",
    "attention",
    "autodiff_grad",
    "finite_diff_grad",
    "no_grad",
    "grad_enabled",
]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array plus (optionally) a node in the backward graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple["Tensor", ...] = (),
                 _backward: Callable[[np.ndarray], None] | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError("non-finite values entering the graph")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad and _GRAD_ENABLED
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- graph mechanics ----------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar loss."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- arithmetic ---------------------------------------------------------
    @staticmethod
    def _coerce(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def __add__(self, other):
        other = self._coerce(other)
        out = Tensor(self.data + other.data,
                     requires_grad=self.requires_grad or other.requires_grad,
                     _parents=(self, other))

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.shape))
        out._backward = backward if out.requires_grad else None
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, requires_grad=self.requires_grad, _parents=(self,))

        def backward(g):
            self._accumulate(-g)
        out._backward = backward if out.requires_grad else None
        return out

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        other = self._coerce(other)
        out = Tensor(self.data * other.data,
                     requires_grad=self.requires_grad or other.requires_grad,
                     _parents=(self, other))

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))
        out._backward = backward if out.requires_grad else None
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        return self * (other ** -1.0)

    def __rtruediv__(self, other):
        return self._coerce(other) * (self ** -1.0)

    def __pow__(self, exponent: float):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        out = Tensor(self.data ** exponent, requires_grad=self.requires_grad,
                     _parents=(self,))

        def backward(g):
            self._accumulate(g * exponent * self.data ** (exponent - 1))
        out._backward = backward if out.requires_grad else None
        return out

    def __matmul__(self, other):
        other = self._coerce(other)
        if self.ndim < 2 or other.ndim < 2:
            raise ValueError("matmul requires operands with ndim >= 2")
        out = Tensor(self.data @ other.data,
                     requires_grad=self.requires_grad or other.requires_grad,
                     _parents=(self, other))

        def backward(g):
            if self.requires_grad:
                ga = g @ np.swapaxes(other.data, -1, -2)
                self._accumulate(_unbroadcast(ga, self.shape))
            if other.requires_grad:
                gb = np.swapaxes(self.data, -1, -2) @ g
                other._accumulate(_unbroadcast(gb, other.shape))
        out._backward = backward if out.requires_grad else None
        return out

    # -- reductions ---------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims),
                     requires_grad=self.requires_grad, _parents=(self,))

        def backward(g):
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(gg, self.shape).copy())
        out._backward = backward if out.requires_grad else None
        return out

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = 1
            for a in axes:
                n *= self.shape[a]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- shape manipulation ---------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.data.reshape(shape), requires_grad=self.requires_grad,
                     _parents=(self,))

        def backward(g):
            self._accumulate(g.reshape(self.shape))
        out._backward = backward if out.requires_grad else None
        return out

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        out = Tensor(self.data.transpose(axes), requires_grad=self.requires_grad,
                     _parents=(self,))
        inv = np.argsort(axes)

        def backward(g):
            self._accumulate(g.transpose(inv))
        out._backward = backward if out.requires_grad else None
        return out

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(tuple(axes))

    def __getitem__(self, key):
        out = Tensor(self.data[key], requires_grad=self.requires_grad,
                     _parents=(self,))
        parts = key if isinstance(key, tuple) else (key,)
        advanced = any(isinstance(p, (np.ndarray, list)) for p in parts)

        def backward(g):
            full = np.zeros_like(self.data)
            if advanced:
                np.add.at(full, key, g)   # repeated indices must accumulate
            else:
                full[key] += g
            self._accumulate(full)
        out._backward = backward if out.requires_grad else None
        return out

    # -- elementwise nonlinearities -------------------------------------------
    def exp(self):
        out = Tensor(np.exp(self.data), requires_grad=self.requires_grad,
                     _parents=(self,))

        def backward(g):
            self._accumulate(g * out.data)
        out._backward = backward if out.requires_grad else None
        return out

    def log(self):
        out = Tensor(np.log(self.data), requires_grad=self.requires_grad,
                     _parents=(self,))

        def backward(g):
            self._accumulate(g / self.data)
        out._backward = backward if out.requires_grad else None
        return out

    def sqrt(self):
        return self ** 0.5

    def sigmoid(self):
        # numerically stable two-sided form
        x = self.data
        pos = x >= 0
        y = np.empty_like(x)
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        out = Tensor(y, requires_grad=self.requires_grad, _parents=(self,))

        def backward(g):
            self._accumulate(g * out.data * (1.0 - out.data))
        out._backward = backward if out.requires_grad else None
        return out

    def gelu(self):
        # exact (erf) form; derivative Phi(x) + x*phi(x)
        x = self.data
        phi_cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
        out = Tensor(x * phi_cdf, requires_grad=self.requires_grad, _parents=(self,))

        def backward(g):
            pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
            self._accumulate(g * (phi_cdf + x * pdf))
        out._backward = backward if out.requires_grad else None
        return out

    def clip(self, lo: float, hi: float):
        mask = (self.data >= lo) & (self.data <= hi)
        out = Tensor(np.clip(self.data, lo, hi), requires_grad=self.requires_grad,
                     _parents=(self,))

        def backward(g):
            self._accumulate(g * mask)
        out._backward = backward if out.requires_grad else None
        return out

    def softmax(self, axis: int = -1):
        z = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=axis, keepdims=True)
        out = Tensor(y, requires_grad=self.requires_grad, _parents=(self,))

        def backward(g):
            dot = (g * y).sum(axis=axis, keepdims=True)
            self._accumulate(y * (g - dot))
        out._backward = backward if out.requires_grad else None
        return out

    def log_softmax(self, axis: int = -1):
        z = self.data - self.data.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
        out = Tensor(z - lse, requires_grad=self.requires_grad, _parents=(self,))
        sm = np.exp(z - lse)

        def backward(g):
            self._accumulate(g - sm * g.sum(axis=axis, keepdims=True))
        out._backward = backward if out.requires_grad else None
        return out

    def layer_norm(self, eps: float = 1e-5):
        """Normalize over the last axis (affine params applied by the caller)."""
        mu = self.data.mean(axis=-1, keepdims=True)
        xc = self.data - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        y = xc * inv
        out = Tensor(y, requires_grad=self.requires_grad, _parents=(self,))
        n = self.shape[-1]

        def backward(g):
            self._accumulate(inv * (g - g.mean(axis=-1, keepdims=True)
                                    - y * (g * y).sum(axis=-1, keepdims=True) / n))
        out._backward = backward if out.requires_grad else None
        return out


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [Tensor._coerce(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 requires_grad=any(t.requires_grad for t in tensors),
                 _parents=tuple(tensors))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, a, b in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(a, b)
                t._accumulate(g[tuple(sl)])
    out._backward = backward if out.requires_grad else None
    return out


def embedding(table: Tensor, idx) -> Tensor:
    """Row lookup `table[idx]` with scatter-add gradient into the table."""
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(table.data[idx], requires_grad=table.requires_grad,
                 _parents=(table,))

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        table._accumulate(full)
    out._backward = backward if out.requires_grad else None
    return out


def attention(query: Tensor, keys: Tensor, values: Tensor, n_heads: int) -> Tensor:
    """Scaled dot-product multi-head attention with identity projections.

    query: (..., M, D), keys/values: (..., K, D), D divisible by n_heads.
    Output rows are convex combinations of value rows within each head.
    """
    query, keys, values = (Tensor._coerce(t) for t in (query, keys, values))
    d_model = query.shape[-1]
    if d_model % n_heads != 0:
        raise ValueError(f"model dim {d_model} not divisible by {n_heads} heads")
    d_head = d_model // n_heads

    def split(t: Tensor) -> Tensor:
        # (..., N, D) -> (..., heads, N, d_head)
        n = t.shape[-2]
        t = t.reshape(t.shape[:-2] + (n, n_heads, d_head))
        return t.swapaxes(-2, -3)

    q, k, v = split(query), split(keys), split(values)
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d_head))
    weights = scores.softmax(axis=-1)
    heads = weights @ v                      # (..., heads, M, d_head)
    merged = heads.swapaxes(-2, -3)          # (..., M, heads, d_head)
    return merged.reshape(merged.shape[:-2] + (d_model,))


def autodiff_grad(loss_fn: Callable[[dict[str, Tensor]], Tensor],
                  params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss with respect to every parameter array."""
    leaves = {name: Tensor(arr, requires_grad=True) for name, arr in params.items()}
    loss = loss_fn(leaves)
    if not isinstance(loss, Tensor):
        raise TypeError("loss function must return a Tensor built from supported ops")
    if loss.size != 1:
        raise ValueError("loss must be scalar")
    loss.backward()
    return {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for name, t in leaves.items()}


def finite_diff_grad(loss_fn: Callable[[dict[str, Tensor]], Tensor],
                     params: dict[str, np.ndarray],
                     eps: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradients, the test oracle for autodiff_grad."""
    if eps <= 0:
        raise ValueError("eps must be positive")

    def evaluate(arrays: dict[str, np.ndarray]) -> float:
        with no_grad():
            loss = loss_fn({k: Tensor(v) for k, v in arrays.items()})
        return float(loss.data)

    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    grads = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = evaluate(base)
            flat[i] = orig - eps
            lo = evaluate(base)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
        grads[name] = g
    return grads

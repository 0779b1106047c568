"""Dense tensors with reverse-mode automatic differentiation.

Covers exactly what the clustering encoder needs: 2-D matrix algebra, a
handful of elementwise nonlinearities, row-wise layer normalization,
adaptive average pooling, cosine similarity, and cross-entropy. Data is
stored as a C-contiguous numpy array; gradients accumulate into plain
arrays of the same shape. Backward traversal follows a fixed topological
order derived from graph construction order, so repeated runs produce
bit-identical gradients.

Broadcasting is deliberately limited to adding a 1-D bias over the rows
of a 2-D matrix; everything else is strict same-shape.
"""

from __future__ import annotations

import contextvars
import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

DTYPES = {"single": np.float32, "double": np.float64}

LN_EPS = 1e-5


@dataclass(frozen=True)
class Precision:
    """Floating-point mode. Oracles and gradient checks always use double."""

    mode: str = "single"

    def __post_init__(self):
        if self.mode not in DTYPES:
            raise ValueError(f"precision must be one of {sorted(DTYPES)}, got {self.mode!r}")

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(DTYPES[self.mode])


_grad_enabled = contextvars.ContextVar("clusterattn_grad_enabled", default=True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (per-thread via contextvars)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Tensor:
    """n-D array node in a reverse-mode differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: tuple = (), _backward=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def backward(self):
        """Populate grads of everything reachable from this scalar.

        Repeated calls accumulate. Traversal order is a fixed postorder of
        the construction-time graph, making results bit-reproducible.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, post = stack.pop()
            if post:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if id(parent) not in seen:
                    stack.append((parent, False))
        local: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = local.pop(id(node), None)
            if g is None:
                continue
            _accum(node, g)
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                cur = local.get(id(parent))
                if cur is None:
                    # copy: op backwards may return views aliasing g
                    local[id(parent)] = np.array(pg)
                else:
                    cur += pg

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _result(data, inputs: tuple, backward) -> Tensor:
    if _grad_enabled.get() and any(t.requires_grad or t._parents for t in inputs):
        return Tensor(data, _parents=inputs, _backward=backward)
    return Tensor(data)


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a 1-D bias broadcast over rows of 2-D a."""
    if a.shape == b.shape:
        out = a.data + b.data

        def backward(g):
            return g, g
    elif a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1]:
        out = a.data + b.data

        def backward(g):
            return g, g.sum(axis=0)
    else:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    return _result(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    out = a.data - b.data

    def backward(g):
        return g, -g

    return _result(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data * b.data

    def backward(g):
        return g * b.data, g * a.data

    return _result(out, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    out = a.data * a.dtype.type(s)

    def backward(g):
        return (g * a.dtype.type(s),)

    return _result(out, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; backward gives a.grad += g @ b.T and b.grad += a.T @ g."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result(out, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with the bias broadcast over rows."""
    return add(matmul(x, w), b)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got shape {a.shape}")
    out = a.data.T

    def backward(g):
        return (g.T,)

    return _result(out, (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _result(out, (a,), backward)


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _result(out, (a,), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along axis 0 or 1 of a 2-D tensor."""
    if a.data.ndim != 2 or axis not in (0, 1):
        raise ShapeError(f"narrow expects a 2-D tensor and axis 0/1, got shape {a.shape}")
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow range [{start}, {start + length}) exceeds extent {a.shape[axis]}")
    index = (slice(start, start + length),) if axis == 0 else (slice(None), slice(start, start + length))
    out = a.data[index]

    def backward(g):
        buf = np.zeros_like(a.data)
        buf[index] = g
        return (buf,)

    return _result(out, (a,), backward)


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    out = np.concatenate([p.data for p in parts], axis=axis)

    def backward(g):
        grads = []
        pos = 0
        for p in parts:
            n = p.shape[axis]
            index = tuple(slice(pos, pos + n) if d == axis else slice(None)
                          for d in range(g.ndim))
            grads.append(g[index])
            pos += n
        return tuple(grads)

    return _result(out, tuple(parts), backward)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.dtype)

    def backward(g):
        return (np.full_like(a.data, g.reshape(())),)

    return _result(out, (a,), backward)


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def softmax(a: Tensor, axis: int) -> Tensor:
    """Exp-normalize along `axis` with max-subtraction (shift invariant)."""
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {a.shape}")
    axis = axis % a.data.ndim
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _result(out, (a,), backward)


# tanh-form GELU coefficients: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    out = 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x ** 3)))

    def backward(g):
        return (g * _gelu_grad(x),)

    return _result(out, (a,), backward)


def _relu_grad(x: np.ndarray) -> np.ndarray:
    return (x > 0).astype(x.dtype)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def backward(g):
        return (g * _relu_grad(a.data),)

    return _result(out, (a,), backward)


def identity(a: Tensor) -> Tensor:
    return a


ACTIVATIONS = {"gelu": gelu, "relu": relu, "identity": identity}


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Per-row zero-mean unit-variance (population variance) then affine."""
    if x.data.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(
            f"layer_norm: x {x.shape} with gamma {gamma.shape}, beta {beta.shape}")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _result(out, (x, gamma, beta), backward)


def adaptive_avg_pool(a: Tensor, out_h: int, out_w: int) -> Tensor:
    """Mean-pool an (h, w, d) grid to (out_h, out_w, d).

    Cell (i, j) averages rows [floor(i*h/out_h), ceil((i+1)*h/out_h)) and the
    analogous column window, so output extents must not exceed the input's.
    """
    if a.data.ndim != 3:
        raise ShapeError(f"adaptive_avg_pool expects (h, w, d), got shape {a.shape}")
    h, w, d = a.shape
    if not (1 <= out_h <= h and 1 <= out_w <= w):
        raise ShapeError(f"pool output ({out_h}, {out_w}) exceeds input grid ({h}, {w})")

    def bounds(i, n, out_n):
        return (i * n) // out_n, -((-(i + 1) * n) // out_n)

    out = np.empty((out_h, out_w, d), dtype=a.dtype)
    windows = []
    for i in range(out_h):
        r0, r1 = bounds(i, h, out_h)
        for j in range(out_w):
            c0, c1 = bounds(j, w, out_w)
            out[i, j] = a.data[r0:r1, c0:c1].mean(axis=(0, 1))
            windows.append((i, j, r0, r1, c0, c1))

    def backward(g):
        buf = np.zeros_like(a.data)
        for i, j, r0, r1, c0, c1 in windows:
            buf[r0:r1, c0:c1] += g[i, j] / ((r1 - r0) * (c1 - c0))
        return (buf,)

    return _result(out, (a,), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over rows of -log softmax(logits)[label]."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects (n, classes), got shape {logits.shape}")
    n, c = logits.shape
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} rows but {y.shape} labels")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise IndexError(f"cross_entropy label out of range [0, {c}): {y[(y < 0) | (y >= c)][0]}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    losses = lse - shifted[np.arange(n), y]
    out = np.asarray(losses.mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), y] -= 1.0
        return (p * (g.reshape(()) / n),)

    return _result(out, (logits,), backward)


def cosine_similarity(a: Tensor, b: Tensor, clamp: float = 1e-12) -> Tensor:
    """Pairwise cosine similarity between rows: out[i, j] = cos(a_i, b_j).

    The denominator |a_i|*|b_j| is clamped below at `clamp`, so zero-norm
    rows yield similarity 0 instead of an error.
    """
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_similarity: incompatible shapes {a.shape} and {b.shape}")
    na = np.sqrt((a.data * a.data).sum(axis=1))
    nb = np.sqrt((b.data * b.data).sum(axis=1))
    raw = na[:, None] * nb[None, :]
    denom = np.maximum(raw, a.dtype.type(clamp))
    dots = a.data @ b.data.T
    out = dots / denom

    def backward(g):
        live = (raw >= clamp).astype(a.dtype)  # clamped cells treat denom as constant
        gd = g / denom
        gs = g * out * live
        na2 = np.maximum(na * na, a.dtype.type(clamp))
        nb2 = np.maximum(nb * nb, a.dtype.type(clamp))
        da = gd @ b.data - a.data * (gs.sum(axis=1) / na2)[:, None]
        db = gd.T @ a.data - b.data * (gs.sum(axis=0) / nb2)[:, None]
        return da, db

    return _result(out, (a, b), backward)


# ---------------------------------------------------------------------------
# parameter initialization helper


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02,
                     bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) with values beyond bound*std resampled; rng-deterministic."""
    out = rng.normal(0.0, std, size=shape)
    mask = np.abs(out) > bound * std
    while mask.any():
        out[mask] = rng.normal(0.0, std, size=int(mask.sum()))
        mask = np.abs(out) > bound * std
    return out

"""Dense tensors with a small reverse-mode tape.

Every differentiable primitive records a node holding its inputs and a
closure that maps the output gradient to input gradients.  ``backward``
walks the recorded graph once in reverse topological order, accumulating
gradients additively where a tensor fans out.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

PRECISIONS = {"high": np.float64, "standard": np.float32}
PROB_FLOOR = 1e-12
LN_EPS = 1e-6

_default_dtype = np.float32
_recording = True


class ShapeError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


def default_dtype():
    return _default_dtype


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the dtype used for tensors built from Python data."""
    global _default_dtype
    prev = _default_dtype
    _default_dtype = PRECISIONS[name] if name in PRECISIONS else np.dtype(name).type
    try:
        yield
    finally:
        _default_dtype = prev


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording tape nodes."""
    global _recording
    prev = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else _default_dtype))


def _record(out: np.ndarray, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    parents = tuple(parents)
    t = Tensor(out)
    if _recording and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._backward = backward
        t.op = op
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = b
        return _record(a.data * c, (a,), lambda g: (g * c,), "scale")
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)), "mul")


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _record(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor, floor: float = PROB_FLOOR) -> Tensor:
    """Natural log of ``max(a, floor)``.

    The floor only guards the value; the gradient is ``1/max(a, floor)``
    so a vanishing probability still pulls its logit up.
    """
    safe = np.maximum(a.data, floor)
    return _record(np.log(safe), (a,), lambda g: (g / safe,), "log")


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
    out = (xd * cdf).astype(xd.dtype, copy=False)
    return _record(out, (x,), lambda g: (g * (cdf + xd * pdf),), "gelu")


# -- reductions and shape ----------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def index(a: Tensor, key) -> Tensor:
    shape = a.shape
    dtype = a.dtype
    parts = key if isinstance(key, tuple) else (key,)
    basic = all(isinstance(k, (int, np.integer, slice)) or k is Ellipsis or k is None for k in parts)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            # basic indexing never repeats an element
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _record(np.asarray(a.data[key]), (a,), backward, "index")


def gather_tokens(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select ``x[b, idx[b, j], :]`` for a batch of token sequences."""
    rows = np.arange(x.shape[0])[:, None]
    shape = x.shape
    dtype = x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        # indices are unique within a row, so plain assignment accumulates nothing
        full[rows, idx] = g
        return (full,)

    return _record(x.data[rows, idx], (x,), backward, "gather")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


# -- linear algebra ----------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching rules; ``a[..., m, k] @ b[..., k, n]``."""
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            # weight matrix shared across the batch: collapse leading dims
            gb = ad.reshape(-1, sa[-1]).T @ g.reshape(-1, sb[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, sa), _unbroadcast(gb, sb)

    return _record(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# -- normalisation -----------------------------------------------------

def softmax_lastaxis(x: Tensor) -> Tensor:
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record(out, (x,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    lead = tuple(range(xd.ndim - 1))

    def backward(g):
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(out, (x, gamma, beta), backward, "layer_norm")


# -- resampling --------------------------------------------------------

def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic ``n_out x n_in`` interpolation matrix, half-pixel centres."""
    if n_in < 1 or n_out < 1:
        raise ValueError("resize extents must be >= 1")
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m


def resize_array(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of ``img[..., h, w, C]`` on plain arrays."""
    h, w = img.shape[-3], img.shape[-2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    rh = bilinear_matrix(h, out_h, img.dtype)
    rw = bilinear_matrix(w, out_w, img.dtype)
    return np.einsum("ph,...hwc,qw->...pqc", rh, img, rw, optimize=True)


def bilinear_resize(img: Tensor, out_h: int, out_w: int) -> Tensor:
    """Differentiable bilinear resize of ``img[..., h, w, C]``."""
    h, w = img.shape[-3], img.shape[-2]
    if min(h, w, img.shape[-1], out_h, out_w) < 1:
        raise ValueError("resize extents must be >= 1")
    rh = bilinear_matrix(h, out_h, img.dtype)
    rw = bilinear_matrix(w, out_w, img.dtype)
    out = np.einsum("ph,...hwc,qw->...pqc", rh, img.data, rw, optimize=True)

    def backward(g):
        return (np.einsum("ph,...pqc,qw->...hwc", rh, g, rw, optimize=True),)

    return _record(out, (img,), backward, "bilinear_resize")


# -- losses ------------------------------------------------------------

def cross_entropy(p: Tensor, y) -> Tensor:
    """Mean of ``-log p[i, y_i]`` over the batch; ``p`` holds probabilities."""
    y = np.asarray(y, dtype=np.int64)
    if p.ndim != 2 or y.shape != (p.shape[0],):
        raise ShapeError(f"cross_entropy expects p[B, K] and y[B], got {p.shape} and {y.shape}")
    k = p.shape[1]
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"label out of range [0, {k}): {y.tolist()}")
    b = p.shape[0]
    rows = np.arange(b)
    picked = np.maximum(p.data[rows, y], PROB_FLOOR)
    value = -np.log(picked).mean()

    def backward(g):
        full = np.zeros_like(p.data)
        full[rows, y] = -g / (b * picked)
        return (full,)

    return _record(np.asarray(value, dtype=p.dtype), (p,), backward, "cross_entropy")


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """Batch mean of ``sum_k p_k (log p_k - log q_k)``."""
    if p.shape != q.shape or p.ndim != 2:
        raise ShapeError(f"kl_divergence shape mismatch: {p.shape} vs {q.shape}")
    b = p.shape[0]
    pf = np.maximum(p.data, PROB_FLOOR)
    qf = np.maximum(q.data, PROB_FLOOR)
    logratio = np.log(pf) - np.log(qf)
    value = (p.data * logratio).sum() / b

    def backward(g):
        return g * (logratio + p.data / pf) / b, -g * p.data / qf / b

    return _record(np.asarray(value, dtype=p.dtype), (p, q), backward, "kl")


# -- reverse pass ------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that ``loss`` depends on."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss was not produced by recorded operations")
    order = _topo_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._backward(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            g = np.asarray(g, dtype=parent.dtype)
            parent.grad = g if parent.grad is None else parent.grad + g
        if node._parents:
            # interior buffers stay readable; drop the closure to free saved inputs
            node._backward = None
            node._parents = ()


def grad(t: Tensor) -> np.ndarray:
    """Gradient of ``t`` from the last ``backward`` call that reached it."""
    if t.grad is None:
        raise GradientError(f"no gradient recorded for {t!r}")
    return t.grad

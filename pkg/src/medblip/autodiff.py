"""Small reverse-mode automatic differentiation over numpy arrays.

Every primitive checks its output for NaN/Inf and raises immediately; small
models make that cheap, and silent propagation is much harder to debug.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "NonFiniteError",
    "ShapeError",
    "tensor",
    "evaluate",
    "backward",
    "PRIMITIVES",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """An n-dimensional float array that can record how it was computed."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self):
        backward(self)

    # operator sugar; all of these route through the primitives below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if not isinstance(other, Tensor):
            return add(self, -np.asarray(other, dtype=self.dtype))
        return add(self, scale(other, -1.0))

    def __rsub__(self, other):
        return add(np.asarray(other, dtype=self.dtype), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        raise TypeError("division by a tensor is not a primitive; use mul with a reciprocal")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


def _pair(a, b):
    """Wrap constants in the dtype of the tensor operand so float32 graphs stay float32."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return _as_tensor(a), _as_tensor(b)


def _check_finite(name, out):
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{name}: non-finite value in output")
    return out


def _make(name, out, parents, backward_fn):
    _check_finite(name, out)
    t = Tensor(out)
    t.op = name
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._backward = backward_fn
    return t


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(name, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


def _norm_axis(axis, ndim):
    return axis % ndim


# --------------------------------------------------------------------------
# primitives


def add(a, b):
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", out, (a, b), bw)


def mul(a, b):
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", out, (a, b), bw)


def scale(a, factor):
    a = _as_tensor(a)
    out = a.data * a.data.dtype.type(factor)

    def bw(g):
        return (g * a.data.dtype.type(factor),)

    return _make("scale", out, (a,), bw)


def matmul(a, b):
    """Batched matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                # fold the batch into rows: one GEMM instead of a batched one + sum
                a2 = a.data.reshape(-1, a.shape[-1])
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make("matmul", out, (a, b), bw)


def transpose(a, axes=None):
    """Permute axes; default swaps the last two."""
    a = _as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise ShapeError(f"transpose: need at least 2 dims, got shape {a.shape}")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return _make("transpose", out, (a,), bw)


def reshape(a, shape):
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None

    def bw(g):
        return (g.reshape(a.shape),)

    return _make("reshape", out, (a,), bw)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no inputs")
    ax = _norm_axis(axis, tensors[0].ndim)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} on axis {ax}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        grads = []
        for i in range(len(tensors)):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(bounds[i], bounds[i + 1])
            grads.append(g[tuple(idx)])
        return tuple(grads)

    return _make("concat", out, tuple(tensors), bw)


def slice_(a, index):
    """Basic or integer-array indexing; the gradient scatters back with ``np.add.at``."""
    a = _as_tensor(a)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: index {index!r} invalid for shape {a.shape}: {exc}") from None
    out = np.array(out, dtype=a.dtype, copy=True)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make("slice", out, (a,), bw)


def softmax(a, axis=-1):
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (a,), bw)


def log_softmax(a, axis=-1):
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", out, (a,), bw)


def layernorm(a, gain=None, bias=None, axis=-1, eps=1e-5):
    """Normalize along ``axis``; optional gain/bias broadcast against the result."""
    a = _as_tensor(a)
    mu = a.data.mean(axis=axis, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    parents = [a]
    out = xhat
    if gain is not None:
        gain = _as_tensor(gain)
        _broadcast_shape("layernorm", a, gain)
        out = out * gain.data
        parents.append(gain)
    if bias is not None:
        bias = _as_tensor(bias)
        _broadcast_shape("layernorm", a, bias)
        out = out + bias.data
        parents.append(bias)
    def bw(g):
        gx = g * gain.data if gain is not None else g
        ga = inv * (gx - gx.mean(axis=axis, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=axis, keepdims=True))
        grads = [ga]
        if gain is not None:
            grads.append(_unbroadcast(g * xhat, gain.shape))
        if bias is not None:
            grads.append(_unbroadcast(g, bias.shape))
        return tuple(grads)

    return _make("layernorm", out, tuple(parents), bw)


_SQRT_HALF = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(a):
    """Exact GELU, x * Phi(x), with Phi from erf."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
    out = (x * cdf).astype(x.dtype, copy=False)

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return ((g * (cdf + x * pdf)).astype(x.dtype, copy=False),)

    return _make("gelu", out, (a,), bw)


def embedding(table, ids):
    """Row lookup ``table[ids]``; ids is an integer array of any shape."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(f"embedding: ids must be integers, got dtype {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding: id out of range for table of shape {table.shape} "
            f"(ids span {ids.min()}..{ids.max()})"
        )
    out = table.data[ids]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make("embedding", out, (table,), bw)


def masked_fill(a, mask, value):
    """Replace entries where ``mask`` is true by ``value`` (mask broadcasts)."""
    a = _as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    try:
        mask_b = np.broadcast_to(mask, a.shape)
    except ValueError:
        raise ShapeError(f"masked_fill: incompatible shapes {a.shape} and {mask.shape}") from None
    out = np.where(mask_b, a.dtype.type(value), a.data)

    def bw(g):
        return (np.where(mask_b, 0.0, g).astype(g.dtype, copy=False),)

    return _make("masked_fill", out, (a,), bw)


def cross_entropy(logits, targets, mask=None):
    """Mean negative log-likelihood of integer ``targets`` over unmasked rows.

    ``logits`` is (..., V); ``targets`` and ``mask`` have the leading shape.
    Rows with mask False contribute nothing.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    lead = logits.shape[:-1]
    if targets.shape != lead:
        raise ShapeError(f"cross_entropy: incompatible shapes {logits.shape} and {targets.shape}")
    if mask is None:
        mask = np.ones(lead, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != lead:
        raise ShapeError(f"cross_entropy: incompatible shapes {logits.shape} and mask {mask.shape}")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy: mask selects no positions")
    safe_t = np.where(mask, targets, 0)
    if safe_t.min() < 0 or safe_t.max() >= logits.shape[-1]:
        raise ShapeError(f"cross_entropy: target id outside vocabulary of size {logits.shape[-1]}")
    x = logits.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    picked = np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    out = np.asarray(-(picked * mask).sum() / count, dtype=x.dtype)

    def bw(g):
        p = np.exp(logp)
        np.put_along_axis(p, safe_t[..., None], np.take_along_axis(p, safe_t[..., None], -1) - 1.0, -1)
        return ((p * (mask[..., None] * (g / count))).astype(x.dtype, copy=False),)

    return _make("cross_entropy", out, (logits,), bw)


def cosine_similarity(a, b, axis=-1):
    """Cosine between ``a`` and ``b`` along ``axis`` (shapes broadcast)."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("cosine_similarity", a, b)
    na = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(axis=axis, keepdims=True))
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("cosine_similarity: zero-norm vector")
    dot = (a.data * b.data).sum(axis=axis, keepdims=True)
    cos = dot / (na * nb)
    out = np.squeeze(cos, axis=axis)

    def bw(g):
        g = np.expand_dims(g, axis)
        ga = g * (b.data / (na * nb) - cos * a.data / (na * na))
        gb = g * (a.data / (na * nb) - cos * b.data / (nb * nb))
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("cosine_similarity", out, (a, b), bw)


def max_(a, axis=-1):
    """Maximum along ``axis``; returns (values, argmax). Ties go to the lowest index."""
    a = _as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    out = np.squeeze(out, axis=axis)

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make("max", out, (a,), bw), idx


def sum_(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return _make("sum", out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, a.shape) / n).astype(a.dtype),)

    return _make("mean", out, (a,), bw)


def exp(a):
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _make("exp", out, (a,), bw)


def log(a):
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def bw(g):
        return (g / a.data,)

    return _make("log", out, (a,), bw)


PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "scale": scale,
    "transpose": transpose,
    "reshape": reshape,
    "concat": concat,
    "slice": slice_,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "layernorm": layernorm,
    "gelu": gelu,
    "embedding": embedding,
    "masked_fill": masked_fill,
    "cross_entropy": cross_entropy,
    "cosine_similarity": cosine_similarity,
    "max": max_,
    "sum": sum_,
    "mean": mean,
    "exp": exp,
    "log": log,
}


def evaluate(primitive, *inputs, **attrs):
    """Apply a primitive by name, e.g. ``evaluate("softmax", x, axis=0)``."""
    try:
        fn = PRIMITIVES[primitive]
    except KeyError:
        raise ValueError(f"unknown primitive {primitive!r}") from None
    return fn(*inputs, **attrs)


def _topo_order(root):
    order, seen = [], set()
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = np.array(g) if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

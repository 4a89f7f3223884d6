"""Dense tensors with reverse-mode automatic differentiation.

Every tensor wraps a contiguous row-major numpy buffer.  Parameters and
activations are float32; a tensor built from float64 data stays float64,
which is how the finite-difference oracles in the test-suite get their
high-precision shadow copies.

Operations record lineage only when at least one input requires a
gradient, so frozen sub-graphs cost nothing on the backward pass.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import (
    ContractError,
    DegenerateVectorError,
    DimensionError,
    LabelError,
    ParameterError,
)

__all__ = [
    "Tensor",
    "add",
    "backward",
    "broadcast_to",
    "concat",
    "cosine_similarity",
    "cross_entropy",
    "gelu",
    "getitem",
    "l2_normalize",
    "layer_norm",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "no_lineage",
    "reshape",
    "softmax",
    "sub",
    "tsum",
    "transpose",
    "zero_grad",
]


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is None:
        dtype = np.float64 if arr.dtype == np.float64 else np.float32
    return np.asarray(arr, dtype=dtype, order="C")


class Tensor:
    """An n-dimensional float array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = None

    # -- metadata -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # -- gradient plumbing ----------------------------------------------
    def _accumulate(self, g):
        if g.shape != self.data.shape:
            g = _unbroadcast(g, self.data.shape)
        g = g.astype(self.data.dtype, copy=False)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a scalar")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def mT(self):
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _wrap(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _result(data, parents, backward_fn, op):
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


class no_lineage:
    """Context manager that disables lineage recording (inference mode)."""

    _depth = 0

    def __enter__(self):
        no_lineage._depth += 1
        return self

    def __exit__(self, *exc):
        no_lineage._depth -= 1
        return False


def _tracking(*tensors):
    return no_lineage._depth == 0 and any(t.requires_grad for t in tensors)


def _make(data, parents, backward_fn, op):
    if not _tracking(*parents):
        return Tensor(data, dtype=data.dtype)
    return _result(data, parents, backward_fn, op)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    out = a.data + b.data

    def _bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _make(out, (a, b), _bw, "add")


def sub(a, b):
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    out = a.data - b.data

    def _bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _make(out, (a, b), _bw, "sub")


def mul(a, b):
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = _wrap(a)
        s = a.data.dtype.type(b)
        out = a.data * s

        def _bw_scalar(g):
            a._accumulate(g * s)

        return _make(out, (a,), _bw_scalar, "scale")
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    out = a.data * b.data

    def _bw(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _make(out, (a, b), _bw, "mul")


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Matrix product; leading axes broadcast as batch dimensions."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def _bw(g):
        if a.requires_grad:
            a._accumulate(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            b._accumulate(np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _make(out, (a, b), _bw, "matmul")


def transpose(a, axes=None):
    a = _wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))

    def _bw(g):
        a._accumulate(np.transpose(g, inverse))

    return _make(out, (a,), _bw, "transpose")


def reshape(a, shape):
    a = _wrap(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} into {tuple(shape)}") from exc

    def _bw(g):
        a._accumulate(g.reshape(a.shape))

    return _make(out, (a,), _bw, "reshape")


def _is_basic_index(index):
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def getitem(a, index):
    a = _wrap(a)
    out = np.asarray(a.data[index], order="C")

    def _bw(g):
        full = np.zeros_like(a.data)
        if _is_basic_index(index):
            full[index] = g
        else:
            np.add.at(full, index, g)
        a._accumulate(full)

    return _make(out, (a,), _bw, "getitem")


def broadcast_to(a, shape):
    a = _wrap(a)
    try:
        out = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} to {tuple(shape)}") from exc

    def _bw(g):
        a._accumulate(g)

    return _make(out, (a,), _bw, "broadcast_to")


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise DimensionError(f"concat shape mismatch along axis {axis}: {shapes}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _make(out, tensors, _bw, "concat")


def tsum(a, axis=None, keepdims=False):
    a = _wrap(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.data.dtype)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(out, (a,), _bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = _wrap(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tsum(a, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# nonlinearities and normalisation
# ---------------------------------------------------------------------------


def softmax(x, temperature=1.0, mask=None):
    """Softmax over the last axis of ``x / temperature``.

    ``mask`` is an optional additive constant (e.g. ``-inf`` above the
    diagonal for causal attention) applied before normalisation.
    """
    if not temperature > 0:
        raise ParameterError(f"softmax temperature must be positive, got {temperature}")
    x = _wrap(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax needs a non-empty last axis, got {x.shape}")
    z = x.data / x.data.dtype.type(temperature)
    if mask is not None:
        z = z + mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    inv_t = x.data.dtype.type(1.0 / temperature)

    def _bw(g):
        x._accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)) * inv_t)

    return _make(y, (x,), _bw, "softmax")


def log_softmax(x):
    x = _wrap(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    y = np.exp(out)

    def _bw(g):
        x._accumulate(g - y * g.sum(axis=-1, keepdims=True))

    return _make(out, (x,), _bw, "log_softmax")


def layer_norm(x, gain, bias, epsilon=1e-5):
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm width mismatch: input {x.shape}, gain {gain.shape}, bias {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(epsilon))
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def _bw(g):
        if x.requires_grad:
            gx = g * gain.data
            dx = inv * (
                gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            )
            x._accumulate(dx)
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, d).sum(axis=0))

    return _make(out, (x, gain, bias), _bw, "layer_norm")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """tanh approximation of the Gaussian error linear unit."""
    x = _wrap(x)
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = (0.5 * v * (1.0 + t)).astype(v.dtype, copy=False)

    def _bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        dy = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner
        x._accumulate(g * dy)

    return _make(out, (x,), _bw, "gelu")


def l2_normalize(x, axis=-1):
    """Scale each slice along ``axis`` to unit Euclidean norm."""
    x = _wrap(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise DegenerateVectorError("cannot normalise a zero-norm vector")
    y = x.data / norm

    def _bw(g):
        x._accumulate((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm)

    return _make(y, (x,), _bw, "l2_normalize")


def cosine_similarity(a, b):
    """dot(a, b) / (|a| |b|) for two vectors of equal length."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"cosine_similarity needs equal-length vectors, got {a.shape} and {b.shape}")
    return tsum(mul(l2_normalize(a), l2_normalize(b)))


def cross_entropy(logits, targets):
    """Mean over the batch of -log softmax(logits)[target]."""
    logits = _wrap(logits)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects B x K logits, got {logits.shape}")
    batch, k = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != batch:
        raise DimensionError(f"{targets.shape[0]} targets for a batch of {batch}")
    if batch == 0:
        raise DimensionError("cross_entropy on an empty batch")
    if np.any(targets < 0) or np.any(targets >= k):
        raise LabelError(f"target labels must lie in [0, {k}), got {targets.tolist()}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = np.arange(batch)
    loss = np.asarray(-logp[rows, targets].mean(), dtype=logits.data.dtype)

    def _bw(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        logits._accumulate(p * (g / batch))

    return _make(loss, (logits,), _bw, "cross_entropy")


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Populate ``.grad`` on every ancestor of ``loss`` that requires it.

    Gradients add into existing buffers; call :func:`zero_grad` between
    steps.  Intermediate nodes receive fresh buffers on each call.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss has no lineage to differentiate")
    order = _topological_order(loss)
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grad(params):
    for p in params:
        p.grad = None

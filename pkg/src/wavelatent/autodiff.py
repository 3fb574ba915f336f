"""Dense N-D tensors with reverse-mode automatic differentiation.

The engine is define-by-run: every differentiable operation records its
inputs and a backward closure on the output tensor, and ``backward`` walks
the recorded graph in exact reverse topological order. Storage is 32-bit by
default; reductions and normalization statistics accumulate in 64-bit.
Tests may switch the whole engine to 64-bit via ``default_dtype`` to run
finite-difference shadow evaluations.

Axis convention for volumes is ``[N, C, D, H, W]`` with row-major layout
(slowest axis first).
"""

from __future__ import annotations

import contextlib
import math
import warnings

import numpy as np
from scipy.special import expit

from .errors import ContractError

_DTYPE = np.float32
_GRAD_ENABLED = True
_DEBUG_CHECKS = False


def set_debug_checks(on: bool) -> None:
    """Enable per-op finiteness checks (NaN/inf in any output raises)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(on)


def current_dtype():
    return _DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype newly created tensors use.

    Used by gradient checks to rerun a computation as a 64-bit shadow.
    """
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class _Op:
    __slots__ = ("inputs", "fn", "name")

    def __init__(self, inputs, fn, name):
        self.inputs = inputs
        self.fn = fn
        self.name = name


class Tensor:
    """A dense array plus optional gradient buffer and graph record."""

    __slots__ = ("data", "grad", "requires_grad", "_op")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._op = None

    # -- basic introspection -------------------------------------------------
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

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._op = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}{flag})"

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method sugar ----------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def backward(self):
        backward(self)


def _coerce(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    t = Tensor.__new__(Tensor)
    t.data = np.asarray(x, dtype=dtype if dtype is not None else _DTYPE)
    t.grad = None
    t.requires_grad = False
    t._op = None
    return t


def _make(data, inputs, backward_fn, name) -> Tensor:
    """Wrap a forward result, recording the op if gradients are flowing."""
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by op '{name}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    needs = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    out._op = _Op(inputs, backward_fn, name) if needs else None
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] > 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.astype(grad.dtype, copy=False)


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    ``loss`` must be a scalar. Leaves keep their gradient buffers between
    calls, so running backward twice on the same graph doubles them.
    """
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._op is not None:
            for parent in node._op.inputs:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

    flows = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = flows.pop(id(node), None)
        if g is None:
            continue
        if node._op is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._op.inputs, node._op.fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = flows.get(id(parent))
            # never accumulate in place: backward closures may hand out
            # aliased views of the same flow array
            flows[id(parent)] = pg if acc is None else acc + pg


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data - b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data * b.data

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = a.data / b.data

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(out, (a, b), back, "div")


def neg(a) -> Tensor:
    a = _coerce(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def pow_scalar(a, p) -> Tensor:
    a = _coerce(a)
    p = float(p)
    out = a.data ** p

    def back(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(out, (a,), back, "pow")


def exp(a) -> Tensor:
    a = _coerce(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _coerce(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = _coerce(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def clamp(a, lo=None, hi=None) -> Tensor:
    a = _coerce(a)
    out = np.clip(a.data, lo, hi)

    def back(g):
        mask = np.ones_like(a.data, dtype=bool)
        if lo is not None:
            mask &= a.data >= lo
        if hi is not None:
            mask &= a.data <= hi
        return (g * mask,)

    return _make(out, (a,), back, "clamp")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    out = expit(a.data).astype(a.dtype, copy=False)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(a) -> Tensor:
    """Sigmoid-weighted linear unit, x * sigmoid(x)."""
    a = _coerce(a)
    s = expit(a.data).astype(a.dtype, copy=False)
    out = a.data * s

    def back(g):
        return (g * (s + a.data * s * (1.0 - s)),)

    return _make(out, (a,), back, "silu")


def leaky_relu(a, negative_slope=0.2) -> Tensor:
    a = _coerce(a)
    out = np.where(a.data >= 0, a.data, negative_slope * a.data)

    def back(g):
        return (np.where(a.data >= 0, g, negative_slope * g),)

    return _make(out, (a,), back, "leaky_relu")


def tanh(a) -> Tensor:
    a = _coerce(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def softplus(a) -> Tensor:
    """log(1 + exp(x)) computed without overflow."""
    a = _coerce(a)
    out = np.logaddexp(0.0, a.data).astype(a.dtype, copy=False)
    s = expit(a.data).astype(a.dtype, copy=False)
    return _make(out, (a,), lambda g: (g * s,), "softplus")


# ---------------------------------------------------------------------------
# reductions (64-bit accumulation)
# ---------------------------------------------------------------------------


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _coerce(a)
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return _make(out, (a,), back, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _coerce(a)
    out = a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    if axis is None:
        count = a.size
    else:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for i in ax:
            count *= a.shape[i]

    def back(g):
        if axis is None:
            gg = np.broadcast_to(g, a.shape)
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            gg = np.broadcast_to(gg, a.shape)
        return ((gg / count).astype(a.dtype, copy=False),)

    return _make(out, (a,), back, "mean")


# ---------------------------------------------------------------------------
# linear algebra and softmax
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError("matmul expects tensors with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ContractError(
            f"matmul inner dimensions disagree: {a.shape[-1]} (a) vs {b.shape[-2]} (b)"
        )
    out = a.data @ b.data

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), back, "matmul")


def softmax(a, axis=-1) -> Tensor:
    a = _coerce(a)
    if not -a.ndim <= axis < a.ndim:
        raise ContractError(f"softmax axis {axis} out of bounds for ndim {a.ndim}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True, dtype=np.float64).astype(a.dtype)

    def back(g):
        dot = (g * out).sum(axis=axis, keepdims=True, dtype=np.float64).astype(a.dtype)
        return (out * (g - dot),)

    return _make(out, (a,), back, "softmax")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes) -> Tensor:
    a = _coerce(a)
    axes = tuple(axes)
    inv = np.argsort(axes)
    out = a.data.transpose(axes)
    return _make(out, (a,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors, axis=0) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        grads = []
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, stop)
            grads.append(g[tuple(idx)])
        return tuple(grads)

    return _make(out, tuple(tensors), back, "concat")


def narrow(a, axis, start, length) -> Tensor:
    """Slice ``length`` entries from ``start`` along ``axis``."""
    a = _coerce(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = a.data[idx]

    def back(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _make(out, (a,), back, "narrow")


def split(a, sizes, axis) -> list:
    """Split into consecutive chunks of the given sizes along ``axis``."""
    a = _coerce(a)
    if sum(sizes) != a.shape[axis]:
        raise ContractError(
            f"split sizes {sizes} do not cover axis {axis} of extent {a.shape[axis]}"
        )
    outs, start = [], 0
    for s in sizes:
        outs.append(narrow(a, axis, start, s))
        start += s
    return outs


# ---------------------------------------------------------------------------
# spatial resizing (volumes [N, C, D, H, W])
# ---------------------------------------------------------------------------


def upsample_nearest2(a) -> Tensor:
    """Double every spatial extent by voxel replication."""
    a = _coerce(a)
    if a.ndim != 5:
        raise ContractError(f"upsample_nearest2 expects [N,C,D,H,W], got ndim {a.ndim}")
    out = a.data.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)
    n, c, d, h, w = a.shape

    def back(g):
        g6 = g.reshape(n, c, d, 2, h, 2, w, 2)
        return (g6.sum(axis=(3, 5, 7), dtype=np.float64).astype(a.dtype),)

    return _make(out, (a,), back, "upsample_nearest2")


def _linear_axis_weights(n_in: int, n_out: int):
    """Index pairs and blend weights for 1-D linear resize (half-voxel centers)."""
    if n_in == n_out:
        idx = np.arange(n_in)
        return idx, idx, np.zeros(n_in)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = src - i0
    return i0, i1, w


def resize_trilinear(a, out_spatial) -> Tensor:
    """Linearly resample the three trailing spatial axes to ``out_spatial``."""
    a = _coerce(a)
    if a.ndim != 5:
        raise ContractError(f"resize_trilinear expects [N,C,D,H,W], got ndim {a.ndim}")
    plans = []
    data = a.data
    for ax, n_out in zip((2, 3, 4), out_spatial):
        i0, i1, w = _linear_axis_weights(data.shape[ax], int(n_out))
        plans.append((ax, i0, i1, w.astype(data.dtype)))
        shape = [1] * data.ndim
        shape[ax] = len(w)
        wv = w.astype(data.dtype).reshape(shape)
        data = data.take(i0, axis=ax) * (1 - wv) + data.take(i1, axis=ax) * wv
    out = data

    def back(g):
        for ax, i0, i1, w in reversed(plans):
            shape = [1] * g.ndim
            shape[ax] = len(w)
            wv = w.reshape(shape)
            # adjoint of the per-axis linear map: scatter-add both taps
            in_len = a.shape[ax]
            gshape = list(g.shape)
            gshape[ax] = in_len
            gi = np.zeros(gshape, dtype=g.dtype)
            np.add.at(gi, _axis_index(g.ndim, ax, i0), g * (1 - wv))
            np.add.at(gi, _axis_index(g.ndim, ax, i1), g * wv)
            g = gi
        return (g,)

    return _make(out, (a,), back, "resize_trilinear")


def _axis_index(ndim, axis, idx):
    sel = [slice(None)] * ndim
    sel[axis] = idx
    return tuple(sel)


# ---------------------------------------------------------------------------
# similarity and embeddings
# ---------------------------------------------------------------------------


def cosine_similarity(a, b, *, floor=1e-8) -> Tensor:
    """Cosine of the angle between two tensors flattened to vectors.

    The denominator is floored at ``floor`` so zero vectors return 0 (with a
    warning) instead of dividing by zero. Result lies in [-1, 1].
    """
    a, b = _coerce(a), _coerce(b)
    if a.shape != b.shape:
        raise ContractError(f"cosine_similarity shape mismatch: {a.shape} vs {b.shape}")
    af = reshape(a, (a.size,))
    bf = reshape(b, (b.size,))
    na = float(np.linalg.norm(af.data))
    nb = float(np.linalg.norm(bf.data))
    if na * nb < floor:
        warnings.warn("cosine_similarity received a zero vector; floor dominates")
    dot = sum_(mul(af, bf))
    denom = clamp(mul(sqrt(sum_(mul(af, af))), sqrt(sum_(mul(bf, bf)))), lo=floor)
    return div(dot, denom)


def sinusoidal_embedding(t, dim: int) -> Tensor:
    """Classic sin/cos positional embedding of timestep indices.

    ``t`` is an int or an array of ints, returned as shape [len(t), dim].
    Constant w.r.t. the graph (timesteps are not differentiated through).
    """
    if dim % 2 != 0:
        raise ContractError("embedding dim must be even")
    ts = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = ts[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    return _coerce(emb.astype(_DTYPE))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def finite_difference_check(fn, tensors, h=1e-3, max_elems=None, rng=None):
    """Compare analytic gradients of ``fn(*tensors)`` against central differences.

    The whole check reruns in a 64-bit shadow of the engine. ``fn`` must
    return a scalar Tensor. Returns the largest relative error observed.
    When ``max_elems`` is given, only that many randomly chosen coordinates
    per tensor are probed (for composite blocks where the full sweep is
    too slow).
    """
    with default_dtype(np.float64):
        shadows = [Tensor(t.data.astype(np.float64), requires_grad=True) for t in tensors]
        loss = fn(*shadows)
        backward(loss)
        worst = 0.0
        for t in shadows:
            flat = t.data.reshape(-1)
            gflat = t.grad.reshape(-1) if t.grad is not None else np.zeros_like(flat)
            idxs = np.arange(flat.size)
            if max_elems is not None and flat.size > max_elems:
                r = rng if rng is not None else np.random.default_rng(0)
                idxs = r.choice(flat.size, size=max_elems, replace=False)
            for i in idxs:
                orig = flat[i]
                flat[i] = orig + h
                up = float(fn(*shadows).data)
                flat[i] = orig - h
                down = float(fn(*shadows).data)
                flat[i] = orig
                numeric = (up - down) / (2 * h)
                denom = max(abs(numeric), abs(gflat[i]), 1e-4)
                worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst

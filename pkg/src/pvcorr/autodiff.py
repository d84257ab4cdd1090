"""Dense tensors with tape-based reverse-mode differentiation.

Only the primitives the network blocks need are provided. Shapes are explicit:
apart from the bias add inside :func:`pointwise_linear` (and the scalar
constants of :func:`scale` / :func:`one_minus`) nothing broadcasts.

Ops are recorded only while a :class:`Tape` is active::

    with Tape():
        y = tanh(pointwise_linear(x, w, b))
        loss = sum_all(y)
    loss.backward()
    w.grad

Without an active tape the same ops run in inference mode and keep no history.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

__all__ = [
    "NonFiniteError",
    "Tape",
    "Tensor",
    "abs_",
    "add",
    "concat",
    "default_dtype",
    "gather_rows",
    "group_norm",
    "leaky_relu",
    "matmul",
    "max_pool_neighbors",
    "mean_all",
    "mul",
    "no_grad",
    "one_minus",
    "pointwise_linear",
    "precision",
    "prelu",
    "relu",
    "repeat_rows",
    "reshape",
    "scale",
    "segment_mean",
    "sigmoid",
    "sub",
    "sum_all",
    "take_along_rows",
    "tanh",
    "transpose",
]

GN_EPS = 1e-5

_state = threading.local()


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


def default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextmanager
def precision(dtype):
    """Create new tensors with ``dtype`` inside the block (float64 for grad checks)."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


def _tape_stack():
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def current_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Suspend recording, e.g. for evaluation inside a training loop."""
    stack = _tape_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating) or arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None
        self.name = name

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._tape = None
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor._wrap(self.data)

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def backward(self):
        if self._tape is None:
            raise RuntimeError("tensor was not produced by a recorded op; nothing to differentiate")
        self._tape.backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of executed ops.

    Entering the tape makes it the recording target for the current thread.
    :meth:`backward` walks the record in exact reverse order, summing gradient
    contributions when a tensor feeds several ops, and may run only once.
    """

    def __init__(self):
        self._nodes = []
        self._consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:
            stack.remove(self)
        return False

    def __len__(self):
        return len(self._nodes)

    def _record(self, out, inputs, backward_fn):
        self._nodes.append((out, inputs, backward_fn))

    def backward(self, root):
        if self._consumed:
            raise RuntimeError("backward already ran on this tape; re-run the forward pass first")
        if root.data.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
        self._consumed = True
        grads = {id(root): np.ones_like(root.data)}
        produced = set()
        leaves = {}
        for out, inputs, fn in reversed(self._nodes):
            produced.add(id(out))
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = fn(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if t._tape is None:
                    leaves[key] = t
        for key, t in leaves.items():
            if key in grads:
                t.grad = grads[key]
        self._nodes = []


def _check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _result(arr, inputs, backward_fn, op):
    _check_finite(arr, op)
    out = Tensor._wrap(arr)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape._record(out, inputs, backward_fn)
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return _result(ad @ bd, (a, b), backward, "matmul")


def transpose(a):
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    return _result(np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def pointwise_linear(x, w, bias):
    """Per-point 1x1 convolution: ``x @ w + bias`` over the last axis.

    Leading axes of ``x`` are treated as independent points.
    """
    x, w, bias = _as_tensor(x), _as_tensor(w), _as_tensor(bias)
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ValueError(f"pointwise_linear: input channels {x.shape[-1]} vs weight {w.shape}")
    if bias.shape != (w.shape[1],):
        raise ValueError(f"pointwise_linear: bias shape {bias.shape} vs {w.shape[1]} outputs")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    y = x2 @ w.data
    y += bias.data

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _result(y.reshape(lead + (w.shape[1],)), (x, w, bias), backward, "pointwise_linear")


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a, c):
    a = _as_tensor(a)
    c = a.data.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def one_minus(a):
    a = _as_tensor(a)
    return _result(1 - a.data, (a,), lambda g: (-g,), "one_minus")


def abs_(a):
    a = _as_tensor(a)
    s = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def sum_all(a):
    a = _as_tensor(a)
    shape = a.shape
    return _result(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,),
                   lambda g: (np.full(shape, g, dtype=a.data.dtype),), "sum")


def mean_all(a):
    a = _as_tensor(a)
    n = a.data.size
    return scale(sum_all(a), 1.0 / n)


def sigmoid(a):
    a = _as_tensor(a)
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)
    return _result(y, (a,), lambda g: (g * y * (1 - y),), "sigmoid")


def tanh(a):
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1 - y * y),), "tanh")


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0).astype(a.data.dtype, copy=False), (a,),
                   lambda g: (g * mask,), "relu")


def leaky_relu(a, slope=0.1):
    a = _as_tensor(a)
    mask = a.data > 0
    s = a.data.dtype.type(slope)
    k = np.where(mask, a.data.dtype.type(1), s)
    return _result(a.data * k, (a,), lambda g: (g * k,), "leaky_relu")


def prelu(a, slope):
    """Leaky ReLU whose single negative slope is a learnable shape-(1,) tensor."""
    a, slope = _as_tensor(a), _as_tensor(slope)
    if slope.shape != (1,):
        raise ValueError(f"prelu slope must have shape (1,), got {slope.shape}")
    x = a.data
    neg = x <= 0
    s = slope.data[0]
    y = np.where(neg, x * s, x)

    def backward(g):
        gx = np.where(neg, g * s, g) if a.requires_grad else None
        gs = np.asarray([(g * x)[neg].sum()], dtype=x.dtype) if slope.requires_grad else None
        return gx, gs

    return _result(y, (a, slope), backward, "prelu")


def group_norm(x, groups, gamma, beta, eps=GN_EPS):
    """Group normalization over the channel axis (last).

    Statistics of each channel group are pooled over every leading position
    (all points, and all neighbors for N x K x C input) of the one sample,
    as a 2D GroupNorm would over the spatial extent. ``groups=1`` therefore
    normalizes the whole tensor; see also :func:`layer_norm_reference` in the
    tests.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    c = x.shape[-1]
    if groups < 1 or c % groups:
        raise ValueError(f"group_norm: {c} channels not divisible into {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError("group_norm: gamma/beta must have one entry per channel")
    per = c // groups
    x2 = x.data.reshape(-1, c)
    n = x2.shape[0] * per

    def group_mean(col_sums):
        # per-channel column sums -> per-group means broadcast back to channels
        return np.repeat(col_sums.reshape(groups, per).sum(axis=1) / n, per)

    mu = group_mean(x2.sum(axis=0))
    xc = x2 - mu
    var = group_mean(np.einsum("ij,ij->j", xc, xc))
    inv = (1 / np.sqrt(var + x2.dtype.type(eps))).astype(x2.dtype, copy=False)
    xhat = xc * inv
    y = (xhat * gamma.data + beta.data).reshape(x.shape)

    def backward(g):
        g2 = g.reshape(-1, c)
        gg = gb = gx = None
        if gamma.requires_grad:
            gg = np.einsum("ij,ij->j", g2, xhat)
        if beta.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            dxhat = g2 * gamma.data
            m1 = group_mean(dxhat.sum(axis=0)).astype(x2.dtype, copy=False)
            m2 = group_mean(np.einsum("ij,ij->j", dxhat, xhat)).astype(x2.dtype, copy=False)
            gx = ((dxhat - m1 - xhat * m2) * inv).reshape(x.shape)
        return gx, gg, gb

    return _result(y, (x, gamma, beta), backward, "group_norm")


def max_pool_neighbors(x):
    """Max over the neighbor axis of an N x K x C tensor.

    The gradient goes to the first (lowest-index) maximum.
    """
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise ValueError("max_pool_neighbors expects N x K x C input")
    if x.shape[1] == 0:
        raise ValueError("max_pool_neighbors: empty neighbor axis")
    n, k, c = x.shape
    arg = np.argmax(x.data, axis=1)
    flat = ((np.arange(n)[:, None] * k + arg) * c + np.arange(c)).ravel()
    y = x.data.reshape(-1)[flat].reshape(n, c)

    def backward(g):
        gx = np.zeros(x.data.size, dtype=x.data.dtype)
        gx[flat] = g.ravel()
        return (gx.reshape(x.shape),)

    return _result(y, (x,), backward, "max_pool")


def concat(xs, axis=-1):
    xs = [_as_tensor(t) for t in xs]
    if not xs:
        raise ValueError("concat needs at least one tensor")
    nd = xs[0].data.ndim
    ax = axis % nd
    for t in xs[1:]:
        if t.data.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != xs[0].shape[:ax] + xs[0].shape[ax + 1:]:
            raise ValueError(f"concat: shapes {[t.shape for t in xs]} disagree off axis {axis}")
    if len(xs) == 1:
        return _result(xs[0].data.copy(), (xs[0],), lambda g: (g,), "concat")
    sizes = np.cumsum([t.shape[ax] for t in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _result(np.concatenate([t.data for t in xs], axis=ax), tuple(xs), backward, "concat")


def _scatter_rows(idx, g, n):
    """Sum the rows of ``g`` into ``n`` buckets given by ``idx`` (inverse of a row gather)."""
    flat = idx.ravel()
    order = np.argsort(flat, kind="stable")
    keys = flat[order]
    starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
    out = np.zeros((n,) + g.shape[idx.ndim:], dtype=g.dtype)
    out[keys[starts]] = np.add.reduceat(g.reshape((flat.size,) + g.shape[idx.ndim:])[order], starts, axis=0)
    return out


def gather_rows(x, idx):
    """``x[idx]`` for a 2-D ``x``; ``idx`` is an integer array of any shape."""
    x = _as_tensor(x)
    idx = np.asarray(idx)
    if x.data.ndim != 2:
        raise ValueError("gather_rows expects a 2-D source")
    n = x.shape[0]
    return _result(x.data[idx], (x,), lambda g: (_scatter_rows(idx, g, n),), "gather_rows")


def repeat_rows(x, k):
    """(N, C) -> (N, k, C), every row repeated ``k`` times."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ValueError("repeat_rows expects a 2-D tensor")
    y = np.repeat(x.data[:, None, :], k, axis=1)
    return _result(y, (x,), lambda g: (g.sum(axis=1),), "repeat_rows")


def take_along_rows(x, idx):
    """``out[i, j] = x[i, idx[i, j]]`` for 2-D ``x`` and ``idx``."""
    x = _as_tensor(x)
    idx = np.asarray(idx)
    if x.data.ndim != 2 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ValueError("take_along_rows: need 2-D tensor and matching 2-D index")
    n, m = x.shape

    def backward(g):
        flat = (np.arange(n)[:, None] * m + idx).ravel()
        gx = np.bincount(flat, weights=g.ravel(), minlength=n * m)
        return (gx.reshape(n, m).astype(x.data.dtype, copy=False),)

    return _result(np.take_along_axis(x.data, idx, axis=1), (x,), backward, "take_along_rows")


def segment_mean(x, seg, nseg):
    """Per-row mean of ``x`` grouped by segment id; ``-1`` drops an entry.

    Returns an ``N x nseg`` tensor; empty segments are exactly zero.
    """
    x = _as_tensor(x)
    seg = np.asarray(seg)
    if x.data.ndim != 2 or seg.shape != x.shape:
        raise ValueError("segment_mean: segment ids must match the 2-D input")
    n = x.shape[0]
    valid = seg >= 0
    rows = np.broadcast_to(np.arange(n)[:, None], seg.shape)
    flat = (rows * nseg + seg)[valid]
    counts = np.bincount(flat, minlength=n * nseg).reshape(n, nseg)
    sums = np.bincount(flat, weights=x.data[valid], minlength=n * nseg).reshape(n, nseg)
    denom = np.maximum(counts, 1)
    y = (sums / denom).astype(x.data.dtype, copy=False)

    def backward(g):
        share = (g / denom).astype(x.data.dtype, copy=False)
        gx = np.zeros_like(x.data)
        gx[valid] = share.ravel()[flat]
        return (gx,)

    return _result(y, (x,), backward, "segment_mean")

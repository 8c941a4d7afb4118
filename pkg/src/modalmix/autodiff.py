"""Reverse-mode automatic differentiation on dense float64 arrays.

Supplies exactly the primitives the retrieval model needs: elementwise
arithmetic and activations, 2-D matmul, 1x1 and strided 3x3 convolutions,
softmax, generalized-mean pooling, reductions, and the indexing/layout ops
(gather, concat, reshape, transpose) that glue them together.  Values and
gradients are always float64.  A central-difference oracle for checking
analytic gradients lives at the bottom of the module.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ParameterError, ShapeError

_GRAD_ENABLED = True

GEM_CLAMP = 1e-6


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / teacher passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A float64 array plus an optional gradient and backward rule.

    Interior nodes keep references to the parents that require gradients so
    that ``backward`` can replay the recorded operations in reverse
    topological order.  Data is treated as immutable once produced by an
    op; only the optimizer mutates leaf parameters in place.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # small operator sugar; the functional forms below do the work
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    out = Tensor(data)
    if _GRAD_ENABLED:
        grad_parents = tuple(p for p in parents if p.requires_grad)
        if grad_parents:
            out.requires_grad = True
            out._parents = grad_parents
            out._backward = backward
    return out


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable requires_grad leaf.

    The recorded graph is replayed once in reverse topological order;
    repeated calls on the same graph replay the identical schedule.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    topo = []
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
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    for node in topo:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# broadcasting helpers

def _check_elementwise(sa, sb):
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) != len(sb):
        raise ShapeError(f"elementwise rank mismatch: {sa} vs {sb}")
    for x, y in zip(sa, sb):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"shapes {sa} and {sb} differ on a non-unit axis")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


# ---------------------------------------------------------------------------
# elementwise primitives

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a.shape, b.shape)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a.shape, b.shape)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    """Hadamard product with unit-axis broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a.shape, b.shape)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), bw)


def scale(a, s):
    a = as_tensor(a)
    s = float(s)

    def bw(g):
        if a.requires_grad:
            a._accum(g * s)

    return _make(a.data * s, (a,), bw)


def sigmoid(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        y = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        if a.requires_grad:
            a._accum(g * y * (1.0 - y))

    return _make(y, (a,), bw)


def tanh(a):
    a = as_tensor(a)
    y = np.tanh(a.data)

    def bw(g):
        if a.requires_grad:
            a._accum(g * (1.0 - y * y))

    return _make(y, (a,), bw)


def relu(a):
    a = as_tensor(a)

    def bw(g):
        if a.requires_grad:
            a._accum(g * (a.data > 0.0))

    return _make(np.maximum(a.data, 0.0), (a,), bw)


def exp(a):
    a = as_tensor(a)
    y = np.exp(a.data)

    def bw(g):
        if a.requires_grad:
            a._accum(g * y)

    return _make(y, (a,), bw)


def log(a):
    a = as_tensor(a)

    def bw(g):
        if a.requires_grad:
            a._accum(g / a.data)

    return _make(np.log(a.data), (a,), bw)


def clamp_min(a, lo):
    a = as_tensor(a)
    lo = float(lo)

    def bw(g):
        if a.requires_grad:
            a._accum(g * (a.data > lo))

    return _make(np.maximum(a.data, lo), (a,), bw)


def pow_scalar(a, p):
    """a ** p for real p; defined on positive inputs (clamp first)."""
    a = as_tensor(a)
    p = float(p)
    y = a.data**p

    def bw(g):
        if a.requires_grad:
            a._accum(g * p * a.data ** (p - 1.0))

    return _make(y, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra and layout

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} x {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bw)


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        if a.ndim != 2:
            raise ShapeError("transpose without axes is for 2-D tensors")
        axes = (1, 0)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        if a.requires_grad:
            a._accum(np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), (a,), bw)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.data.shape

    def bw(g):
        if a.requires_grad:
            a._accum(g.reshape(old))

    return _make(a.data.reshape(shape), (a,), bw)


def concat(parts, axis=0):
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat needs at least one operand")
    y = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                p._accum(g[tuple(sl)])

    return _make(y, tuple(parts), bw)


def gather_rows(a, indices):
    """Select rows along the leading axis; backward scatter-adds."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("gather_rows needs a 1-D index list")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather index out of range for leading extent {a.shape[0]}")

    def bw(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            a._accum(buf)

    return _make(a.data[idx], (a,), bw)


def reduce_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accum(np.broadcast_to(np.asarray(g), a.data.shape))
            return
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        gx = g
        if not keepdims:
            for ax in sorted(ax % a.data.ndim for ax in axes):
                gx = np.expand_dims(gx, ax)
        a._accum(np.broadcast_to(gx, a.data.shape))

    return _make(y, (a,), bw)


def softmax(a, axis):
    """Numerically stable softmax (max-subtraction) along one axis."""
    a = as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        if a.requires_grad:
            a._accum(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (a,), bw)


# ---------------------------------------------------------------------------
# convolutions

def conv1x1(x, w, bias):
    """Per-position linear map over a [Cin, P] grid of positions."""
    x, w, bias = as_tensor(x), as_tensor(w), as_tensor(bias)
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"conv1x1 needs 2-D input and weight, got {x.shape}, {w.shape}")
    if w.shape[1] != x.shape[0]:
        raise ShapeError(f"conv1x1 channel mismatch: weight {w.shape} vs input {x.shape}")
    if bias.shape != (w.shape[0],):
        raise ShapeError(f"conv1x1 bias shape {bias.shape} does not match {w.shape[0]} channels")
    return add(matmul(w, x), reshape(bias, (w.shape[0], 1)))


def conv3x3_stride2_batch(x, w, bias):
    """3x3 cross-correlation, stride 2, zero padding 1, over [B, Cin, H, W]."""
    x, w, bias = as_tensor(x), as_tensor(w), as_tensor(bias)
    if x.ndim != 4:
        raise ShapeError(f"batched conv needs [B, Cin, H, W], got {x.shape}")
    if w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ShapeError(f"conv weight must be [Cout, Cin, 3, 3], got {w.shape}")
    nb, cin, h, wd_ = x.shape
    cout = w.shape[0]
    if w.shape[1] != cin:
        raise ShapeError(f"conv channel mismatch: input {cin}, weight {w.shape[1]}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv bias shape {bias.shape} does not match {cout} channels")
    if h < 3 or wd_ < 3:
        raise ShapeError(f"conv input {h}x{wd_} smaller than the 3x3 kernel")
    hp, wp = -(-h // 2), -(-wd_ // 2)

    pad = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(pad, (3, 3), axis=(2, 3))[:, :, ::2, ::2]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(cin * 9, nb * hp * wp)
    y = w.data.reshape(cout, cin * 9) @ cols + bias.data[:, None]
    out = y.reshape(cout, nb, hp, wp).transpose(1, 0, 2, 3)

    def bw(g):
        gm = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        if bias.requires_grad:
            bias._accum(gm.sum(axis=1))
        if w.requires_grad:
            w._accum((gm @ cols.T).reshape(cout, cin, 3, 3))
        if x.requires_grad:
            gcols = w.data.reshape(cout, -1).T @ gm
            gwin = gcols.reshape(cin, 3, 3, nb, hp, wp).transpose(3, 0, 4, 5, 1, 2)
            gpad = np.zeros_like(pad)
            for u in range(3):
                for v in range(3):
                    gpad[:, :, u : u + 2 * hp - 1 : 2, v : v + 2 * wp - 1 : 2] += gwin[..., u, v]
            x._accum(gpad[:, :, 1 : 1 + h, 1 : 1 + wd_])

    return _make(out, (x, w, bias), bw)


def conv3x3_stride2(x, w, bias):
    """Single-image form of the strided conv: [Cin, H, W] -> [Cout, H', W']."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"conv3x3_stride2 needs [Cin, H, W], got {x.shape}")
    out = conv3x3_stride2_batch(reshape(x, (1,) + x.shape), w, bias)
    return reshape(out, out.shape[1:])


# ---------------------------------------------------------------------------
# pooling

def gem_pool(x, p):
    """Generalized-mean pool over the last axis: ((1/P) * sum x^p)^(1/p).

    Inputs are clamped to >= GEM_CLAMP before the fractional power.
    """
    x = as_tensor(x)
    if not p > 0:
        raise ParameterError(f"GeM exponent must be positive, got {p}")
    if x.ndim < 2:
        raise ShapeError(f"gem_pool needs at least 2 axes, got shape {x.shape}")
    n = x.shape[-1]
    powed = pow_scalar(clamp_min(x, GEM_CLAMP), p)
    mean = scale(reduce_sum(powed, axis=-1), 1.0 / n)
    return pow_scalar(mean, 1.0 / p)


# ---------------------------------------------------------------------------
# parameters

def parameter(shape, rng, fan_in):
    """Trainable tensor initialized uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zero_parameter(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


# ---------------------------------------------------------------------------
# finite-difference oracle

def central_difference(f, x, step=1e-5):
    """Numeric gradient of scalar-valued f() w.r.t. the array x (mutated in place)."""
    g = np.zeros_like(x)
    flat, gf = x.ravel(), g.ravel()
    for i in range(flat.size):
        v = flat[i]
        flat[i] = v + step
        fp = f()
        flat[i] = v - step
        fm = f()
        flat[i] = v
        gf[i] = (fp - fm) / (2.0 * step)
    return g


def max_relative_error(analytic, numeric):
    """Largest |a - n| / max(1, |a|, |n|) over all elements."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    den = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / den)) if a.size else 0.0

"""Dense tensors with reverse-mode automatic differentiation.

Storage and arithmetic are numpy; the differentiation tape is ours. Every
operation builds an implicit graph through parent links and a gradient
closure, and ``backward`` replays that record once in reverse topological
order, accumulating additively across fan-out.

Conventions fixed here and relied on everywhere else:

* dtypes are float32 or float64, chosen at tensor creation; binary ops
  refuse mixed dtypes (python scalars adopt the tensor's dtype).
* broadcasting aligns trailing axes and expands singleton extents only;
  gradients are summed back over broadcast axes.
* reductions run in storage order (numpy's deterministic order), so two
  executions of the same graph are bit-identical.
* ``reduce(max)`` routes its gradient to the first maximum on ties.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class GraphError(RuntimeError):
    """Raised on invalid use of the autodiff tape (e.g. double backward)."""


# ---------------------------------------------------------------------------
# Operation auditing (used by the cost-model audit and memory-claim checks)
# ---------------------------------------------------------------------------

@dataclass
class OpRecord:
    """One executed forward primitive: its kind, output size and op tallies.

    ``muls`` counts scalar multiplications exactly as executed; the cost
    model's closed-form MAC counts are required to match it. The other
    tallies follow the documented FLOP convention (see costmodel).
    """

    op: str
    out_shape: tuple
    elements: int
    muls: int = 0
    adds: int = 0
    divs: int = 0
    exps: int = 0
    comps: int = 0


@dataclass
class OpAudit:
    records: list = field(default_factory=list)

    @property
    def muls(self) -> int:
        return sum(r.muls for r in self.records)

    @property
    def adds(self) -> int:
        return sum(r.adds for r in self.records)

    def count(self, op: str) -> int:
        return sum(1 for r in self.records if r.op == op)

    def allocation_sizes(self) -> set:
        """Element counts of every intermediate materialized in the pass."""
        return {r.elements for r in self.records}


_AUDITS: list[OpAudit] = []


@contextmanager
def audit_ops():
    """Record every primitive executed inside the block."""
    audit = OpAudit()
    _AUDITS.append(audit)
    try:
        yield audit
    finally:
        _AUDITS.remove(audit)


def _record(op, out_shape, muls=0, adds=0, divs=0, exps=0, comps=0):
    if _AUDITS:
        n = int(np.prod(out_shape)) if out_shape else 1
        rec = OpRecord(op, tuple(out_shape), n, muls, adds, divs, exps, comps)
        for audit in _AUDITS:
            audit.records.append(rec)


# ---------------------------------------------------------------------------
# Gradient mode
# ---------------------------------------------------------------------------

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording (evaluation passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------

class Tensor:
    """A dense n-d array plus an optional gradient accumulator.

    Values are immutable once created (gradient accumulation into ``.grad``
    is the only sanctioned mutation). Interior nodes carry parent links and
    a gradient closure until ``backward`` consumes them.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn",
                 "_consumed")

    def __init__(self, data, requires_grad=False, dtype=None,
                 _parents=(), _grad_fn=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._grad_fn = _grad_fn
        self._consumed = False

    # -- inspection --------------------------------------------------------

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
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, " \
               f"requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return sub(_wrap(0.0, self.dtype), self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def _wrap(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _check_same_dtype(op, a, b):
    if a.data.dtype != b.data.dtype:
        raise ShapeError(
            f"{op}: mixed dtypes {a.data.dtype} vs {b.data.dtype}")


def _make(data, parents, grad_fn):
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if needs:
        return Tensor(data, requires_grad=True, _parents=parents,
                      _grad_fn=grad_fn)
    return Tensor(data)


# ---------------------------------------------------------------------------
# Broadcasting helpers
# ---------------------------------------------------------------------------

def _broadcastable(sa, sb):
    for xa, xb in zip(reversed(sa), reversed(sb)):
        if xa != xb and xa != 1 and xb != 1:
            return False
    return True


def _unbroadcast(g, shape):
    """Sum a gradient back down to ``shape`` after broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def _binary(op_name, a, b, fwd, grad_a, grad_b, muls=0, adds=0, divs=0):
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        ref = a if isinstance(a, Tensor) else b
        a = _wrap(a, ref.dtype)
        b = _wrap(b, ref.dtype)
    _check_same_dtype(op_name, a, b)
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(f"{op_name}: shapes {a.shape} and {b.shape} do not "
                         f"broadcast (trailing-axis singleton rule)")
    out = fwd(a.data, b.data)
    n = out.size
    _record(op_name, out.shape, muls=muls * n, adds=adds * n, divs=divs * n)

    def backward(g):
        ga = _unbroadcast(grad_a(g, a.data, b.data, out), a.shape) \
            if a.requires_grad else None
        gb = _unbroadcast(grad_b(g, a.data, b.data, out), b.shape) \
            if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


def add(a, b):
    return _binary("add", a, b, np.add,
                   lambda g, x, y, o: g, lambda g, x, y, o: g, adds=1)


def sub(a, b):
    return _binary("sub", a, b, np.subtract,
                   lambda g, x, y, o: g, lambda g, x, y, o: -g, adds=1)


def mul(a, b):
    return _binary("mul", a, b, np.multiply,
                   lambda g, x, y, o: g * y, lambda g, x, y, o: g * x, muls=1)


def div(a, b):
    return _binary("div", a, b, np.divide,
                   lambda g, x, y, o: g / y,
                   lambda g, x, y, o: -g * o / y, divs=1)


ELEMENTWISE = {"add": add, "mul": mul, "sub": sub}


def elementwise(op, a, b):
    """Dispatch table for the pointwise ops: add, mul, sub."""
    try:
        return ELEMENTWISE[op](a, b)
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None


# ---------------------------------------------------------------------------
# Matrix multiplication (2-d contract, stacked leading dims supported)
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Matrix product over the last two axes.

    Leading axes broadcast numpy-style; gradients are summed back over any
    broadcast leading axes. dA = dC @ B^T, dB = A^T @ dC.
    """
    _check_same_dtype("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-d, got {a.shape} "
                         f"and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ: {a.shape} vs "
                         f"{b.shape}")
    if not _broadcastable(a.shape[:-2], b.shape[:-2]):
        raise ShapeError(f"matmul: leading axes of {a.shape} and {b.shape} "
                         f"do not broadcast")
    out = a.data @ b.data
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    batch = int(np.prod(out.shape[:-2])) if out.ndim > 2 else 1
    _record("matmul", out.shape, muls=batch * m * k * n,
            adds=batch * m * (k - 1) * n)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), backward)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} invalid for ndim {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce_sum(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    _record("sum", np.shape(out), adds=max(a.size - np.size(out), 0))

    def backward(g):
        if not keepdims and axes is not None:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)

    return _make(np.asarray(out), (a,), backward)


def reduce_mean(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    out = a.data.mean(axis=axes, keepdims=keepdims)
    count = a.size // max(np.size(out), 1)
    _record("mean", np.shape(out), adds=max(a.size - np.size(out), 0),
            divs=int(np.size(out)))

    def backward(g):
        if not keepdims and axes is not None:
            g = np.expand_dims(g, axes)
        g = g / np.asarray(count, dtype=a.dtype)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)

    return _make(np.asarray(out), (a,), backward)


def reduce_max(a, axis=None, keepdims=False):
    """Max along ``axis``; backward routes to the first argmax on ties."""
    axes = _norm_axis(axis, a.ndim)
    if axes is not None and len(axes) != 1:
        raise ShapeError("max supports a single axis or None")
    out = a.data.max(axis=axes[0] if axes else None, keepdims=keepdims)
    _record("max", np.shape(out), comps=max(a.size - np.size(out), 0))

    def backward(g):
        dx = np.zeros_like(a.data)
        if axes is None:
            idx = np.unravel_index(np.argmax(a.data), a.shape)
            dx[idx] = np.sum(g)
        else:
            ax = axes[0]
            gg = np.asarray(g) if keepdims else np.expand_dims(np.asarray(g), ax)
            idx = np.expand_dims(np.argmax(a.data, axis=ax), ax)
            np.put_along_axis(dx, idx, gg, ax)
        return (dx,)

    return _make(np.asarray(out), (a,), backward)


REDUCTIONS = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}


def reduce(op, a, axis=None, keepdims=False):
    try:
        return REDUCTIONS[op](a, axis, keepdims)
    except KeyError:
        raise ValueError(f"unknown reduction {op!r}") from None


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------

def relu(a):
    out = np.maximum(a.data, 0)
    _record("relu", out.shape, comps=out.size)

    def backward(g):
        return (g * (a.data > 0),)  # subgradient 0 at 0

    return _make(out, (a,), backward)


def sigmoid(a):
    """Numerically stable logistic; no overflow for any finite input."""
    x = a.data
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    _record("sigmoid", out.shape, adds=out.size, divs=out.size,
            exps=out.size)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), backward)


ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid}


def activation(op, a):
    try:
        return ACTIVATIONS[op](a)
    except KeyError:
        raise ValueError(f"unknown activation {op!r}") from None


def exp(a):
    out = np.exp(a.data)
    _record("exp", out.shape, exps=out.size)

    def backward(g):
        return (g * out,)

    return _make(out, (a,), backward)


def log(a):
    out = np.log(a.data)
    _record("log", out.shape, exps=out.size)

    def backward(g):
        return (g / a.data,)

    return _make(out, (a,), backward)


def sqrt(a):
    out = np.sqrt(a.data)
    _record("sqrt", out.shape)

    def backward(g):
        return (g * 0.5 / out,)

    return _make(out, (a,), backward)


def softmax_rows(a):
    """Row softmax over the last axis, max-shifted for stability.

    Rows are every index combination of the leading axes; each output row
    is nonnegative and sums to 1.
    """
    if a.ndim < 1 or a.shape[-1] < 1:
        raise ShapeError(f"softmax_rows needs a nonempty last axis, got "
                         f"{a.shape}")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    n = a.shape[-1]
    rows = a.size // n
    _record("softmax_rows", out.shape, adds=rows * (2 * n - 1),
            divs=rows * n, exps=rows * n, comps=rows * (n - 1))

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - dot) * out,)

    return _make(out, (a,), backward)


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------

def reshape(a, shape):
    out = a.data.reshape(shape)
    _record("reshape", out.shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), backward)


def transpose(a, axes=None):
    out = np.transpose(a.data, axes)
    _record("transpose", out.shape)

    def backward(g):
        inv = None if axes is None else np.argsort(axes)
        return (np.transpose(g, inv),)

    return _make(out, (a,), backward)


def swap_last2(a):
    return transpose(a, tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2))


def permute_rows(a, order):
    """Reorder along axis -2 by a permutation (per leading index).

    ``order`` has shape ``a.shape[:-1]`` (one permutation of the row axis
    per leading index) or just ``(rows,)``. Backward applies the inverse
    permutation, so the op is an exact bijection of gradients.
    """
    order = np.asarray(order)
    idx = order[..., None]
    out = np.take_along_axis(a.data, idx, axis=-2)
    _record("permute_rows", out.shape)
    inverse = np.argsort(order, axis=-1)

    def backward(g):
        return (np.take_along_axis(g, inverse[..., None], axis=-2),)

    return _make(out, (a,), backward)


def select_labels(logits, labels):
    """Pick ``logits[i, labels[i]]`` for each row i of a 2-d tensor."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ShapeError(f"select_labels expects [batch, classes], got "
                         f"{logits.shape}")
    if labels.min(initial=0) < 0 or \
            labels.max(initial=-1) >= logits.shape[1]:
        raise IndexError(f"label out of range for {logits.shape[1]} classes")
    rows = np.arange(logits.shape[0])
    out = logits.data[rows, labels]
    _record("select_labels", out.shape)

    def backward(g):
        dx = np.zeros_like(logits.data)
        dx[rows, labels] = g
        return (dx,)

    return _make(out, (logits,), backward)


def subsample_hw(a, stride, axes=(-2, -1)):
    """Keep every ``stride``-th element along two axes."""
    sl = [slice(None)] * a.ndim
    for ax in axes:
        sl[ax] = slice(None, None, stride)
    sl = tuple(sl)
    out = a.data[sl]
    _record("subsample_hw", out.shape)

    def backward(g):
        dx = np.zeros_like(a.data)
        dx[sl] = g
        return (dx,)

    return _make(out, (a,), backward)


def pad_axis(a, axis, before, after):
    """Zero-pad one axis."""
    widths = [(0, 0)] * a.ndim
    widths[axis] = (before, after)
    out = np.pad(a.data, widths)
    _record("pad_axis", out.shape)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(before, before + a.shape[axis])
    sl = tuple(sl)

    def backward(g):
        return (g[sl],)

    return _make(out, (a,), backward)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def conv2d(x, kernels, stride=1, padding=0, layout="nchw"):
    """2-d cross-correlation with zero padding.

    ``x`` is [c_in, h, w] or [batch, c_in, h, w] (layout "nchw", the
    contract shape) or channels-last [..., h, w, c_in] (layout "nhwc", the
    cache-friendly path the stems run on); ``kernels`` is always
    [c_out, c_in, k, k]. Output spatial extent is
    floor((h + 2p - k)/stride) + 1 and the output keeps the input layout.
    Both paths are im2col + matmul and perform exactly
    c_out*c_in*k^2*h'*w' multiplies per sample.
    """
    _check_same_dtype("conv2d", x, kernels)
    if layout == "nhwc":
        return _conv2d_nhwc(x, kernels, stride, padding)
    if layout != "nchw":
        raise ValueError(f"unknown conv layout {layout!r}")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernels.ndim != 4:
        raise ShapeError(f"conv2d: got input {x.shape}, kernels "
                         f"{kernels.shape}")
    b, c_in, h, w = xd.shape
    c_out, kc, kh, kw = kernels.shape
    _conv_check(c_in, h, w, kernels.shape, padding)
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw),
                                                   axis=(2, 3))
    win = win[:, :, ::stride, ::stride]           # [b, c_in, ho, wo, kh, kw]
    col = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        b * ho * wo, c_in * kh * kw)
    w2 = kernels.data.reshape(c_out, -1)
    out_mat = col @ w2.T
    out = out_mat.reshape(b, ho, wo, c_out).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    _record("conv2d", out.shape, muls=b * c_out * c_in * kh * kw * ho * wo,
            adds=b * c_out * (c_in * kh * kw - 1) * ho * wo)

    def backward(g):
        if squeeze:
            g = g[None]
        gm = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, c_out)
        gk = gx = None
        if kernels.requires_grad:
            gk = (gm.T @ col).reshape(kernels.shape)
        if x.requires_grad:
            dcol = (gm @ w2).reshape(b, ho, wo, c_in, kh, kw)
            dxp = np.zeros_like(xp)
            for u in range(kh):
                for v in range(kw):
                    dxp[:, :, u:u + stride * ho:stride,
                        v:v + stride * wo:stride] += \
                        dcol[:, :, :, :, u, v].transpose(0, 3, 1, 2)
            gx = dxp[:, :, padding:padding + h, padding:padding + w]
            if squeeze:
                gx = gx[0]
        return gx, gk

    result = _make(out[0] if squeeze else out, (x, kernels), backward)
    return result


def _conv_check(c_in, h, w, kshape, padding):
    c_out, kc, kh, kw = kshape
    if kc != c_in:
        raise ShapeError(f"conv2d: input channels {c_in} != kernel channels "
                         f"{kc}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} exceeds padded input "
                         f"{h + 2 * padding}x{w + 2 * padding}")


def _conv2d_nhwc(x, kernels, stride, padding):
    """Channels-last conv: slab im2col, no output transpose."""
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernels.ndim != 4:
        raise ShapeError(f"conv2d: got input {x.shape}, kernels "
                         f"{kernels.shape}")
    b, h, w, c_in = xd.shape
    c_out, _, kh, kw = kernels.shape
    _conv_check(c_in, h, w, kernels.shape, padding)
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1

    xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    col = np.empty((b, ho, wo, kh * kw * c_in), dtype=xd.dtype)
    for u in range(kh):
        for v in range(kw):
            col[:, :, :, (u * kw + v) * c_in:(u * kw + v + 1) * c_in] = \
                xp[:, u:u + stride * (ho - 1) + 1:stride,
                   v:v + stride * (wo - 1) + 1:stride, :]
    colm = col.reshape(b * ho * wo, kh * kw * c_in)
    w2 = np.ascontiguousarray(
        kernels.data.transpose(2, 3, 1, 0)).reshape(kh * kw * c_in, c_out)
    out = (colm @ w2).reshape(b, ho, wo, c_out)
    _record("conv2d", out.shape, muls=b * c_out * c_in * kh * kw * ho * wo,
            adds=b * c_out * (c_in * kh * kw - 1) * ho * wo)

    def backward(g):
        if squeeze:
            g = g[None]
        gm = g.reshape(b * ho * wo, c_out)
        gk = gx = None
        if kernels.requires_grad:
            gk = np.ascontiguousarray(
                (colm.T @ gm).reshape(kh, kw, c_in, c_out).transpose(
                    3, 2, 0, 1))
        if x.requires_grad:
            dcol = (gm @ w2.T).reshape(b, ho, wo, kh * kw * c_in)
            dxp = np.zeros_like(xp)
            for u in range(kh):
                for v in range(kw):
                    dxp[:, u:u + stride * (ho - 1) + 1:stride,
                        v:v + stride * (wo - 1) + 1:stride, :] += \
                        dcol[:, :, :,
                             (u * kw + v) * c_in:(u * kw + v + 1) * c_in]
            gx = dxp[:, padding:padding + h, padding:padding + w, :]
            if padding:
                gx = np.ascontiguousarray(gx)
            if squeeze:
                gx = gx[0]
        return gx, gk

    return _make(out[0] if squeeze else out, (x, kernels), backward)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def backward(loss):
    """Populate ``.grad`` on every reachable requires_grad leaf.

    ``loss`` must be a scalar produced by recorded operations. The tape is
    consumed: a second call on the same graph raises GraphError.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape "
                         f"{loss.shape}")
    if loss._consumed:
        raise GraphError("backward already ran on this graph; rebuild the "
                         "graph before calling again")
    if loss._grad_fn is None:
        raise GraphError("loss is not attached to a recorded graph "
                         "(detached tensor or grad disabled)")

    # Topological order via iterative post-order DFS over parent links.
    topo = []
    visited = set()
    stack = [(loss, False)]
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

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None or node._grad_fn is None:
            if g is not None and node._grad_fn is None:
                if node._consumed:
                    raise GraphError("graph node already consumed by a "
                                     "previous backward; rebuild the graph")
                node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._grad_fn(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._grad_fn = None
        node._parents = ()
        node._consumed = True
    loss._consumed = True

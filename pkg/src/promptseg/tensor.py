"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value flowing through the models in this package is a `Tensor`: a numpy
float64 array plus a node in a dynamically built computation graph. Calling
`backward()` on a scalar loss walks the graph in reverse topological order and
accumulates gradients into every node that requires them. Parameters live in a
`ParameterStore`, which owns the arrays and the frozen/trainable flags;
`grad()` evaluates a loss over a store and returns the gradients of exactly
the trainable entries. `finite_diff_check()` is the independent oracle: it
compares analytic gradients against central differences entry by entry.

Design notes:
  * everything is float64; gradient checking at sane tolerances needs it
  * ops are pure and deterministic: same inputs give bit-identical outputs
  * ReLU's derivative at exactly 0 is defined as 0; the finite-difference
    checker flags entries whose perturbation flips a ReLU activation pattern
    instead of failing them
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

__all__ = [
    "Tensor",
    "ParameterStore",
    "GradientReport",
    "FiniteDiffResult",
    "NonFiniteError",
    "grad",
    "finite_diff_check",
    "concat",
    "expand",
    "narrow",
    "matmul",
    "linear",
    "relu",
    "gelu",
    "sigmoid",
    "softmax",
    "layer_norm",
    "attention",
    "conv2d",
    "maxpool2d",
    "upsample_nearest",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class NonFiniteError(ArithmeticError):
    """A computation produced NaN/Inf; the message names the first bad op."""


# Optional trace of ReLU activation patterns, used by finite_diff_check to
# detect kink crossings. Single-writer: one evaluation at a time may trace.
_RELU_TRACE: list | None = None


class Tensor:
    """A float64 array plus its place in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad=False, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = ()
        self._backward = None

    # -- graph plumbing ----------------------------------------------------

    def _accum(self, arr, g):
        # `arr is g` means the closure passed the incoming gradient through
        # unchanged; anything else (including views of g) is safe to adopt,
        # because a node's gradient buffer is never written after its own
        # backward step has run.
        if self.grad is None:
            self.grad = arr.copy() if arr is g else arr
        elif self.grad.flags.writeable:
            self.grad += arr
        else:
            self.grad = self.grad + arr

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() needs a scalar, got shape %s" % (self.shape,))
        order = _toposort(self, grad_only=True)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    # -- conveniences --------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return "Tensor(op=%s, shape=%s)" % (self.op, self.data.shape)

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, op="const")


def _make(data, parents, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.parents = parents
    out.requires_grad = any(p.requires_grad for p in parents)
    out._backward = None
    return out


def _toposort(root, grad_only):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, emitted = stack.pop()
        if emitted:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and (p.requires_grad or not grad_only):
                stack.append((p, False))
    return order  # dependencies before dependents


def first_nonfinite(root):
    """Name of the earliest op (dependency order) with NaN/Inf, or None."""
    for node in _toposort(root, grad_only=False):
        if not np.all(np.isfinite(node.data)):
            return node.op
    return None


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic --------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def bwd(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.data.shape), g)
            if b.requires_grad:
                b._accum(_unbroadcast(g, b.data.shape), g)
        out._backward = bwd
    return out


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        def bwd(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.data.shape), g)
            if b.requires_grad:
                b._accum(_unbroadcast(-g, b.data.shape), g)
        out._backward = bwd
    return out


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def bwd(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.data.shape), g)
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.data.shape), g)
        out._backward = bwd
    return out


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make(a.data / b.data, (a, b), "div")
    if out.requires_grad:
        def bwd(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g / b.data, a.data.shape), g)
            if b.requires_grad:
                b._accum(_unbroadcast(-g * out.data / b.data, b.data.shape), g)
        out._backward = bwd
    return out


def neg(a):
    a = _as_tensor(a)
    out = _make(-a.data, (a,), "neg")
    if out.requires_grad:
        def bwd(g):
            a._accum(-g, g)
        out._backward = bwd
    return out


# -- shape manipulation -------------------------------------------------------


def reshape(a, shape):
    a = _as_tensor(a)
    out = _make(a.data.reshape(shape), (a,), "reshape")
    if out.requires_grad:
        def bwd(g):
            a._accum(g.reshape(a.data.shape), g)
        out._backward = bwd
    return out


def transpose(a, axes):
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = _make(a.data.transpose(axes), (a,), "transpose")
    if out.requires_grad:
        def bwd(g):
            a._accum(g.transpose(inv), g)
        out._backward = bwd
    return out


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out = _make(np.concatenate([t.data for t in tensors], axis=axis),
                tuple(tensors), "concat")
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        def bwd(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    t._accum(g[tuple(idx)], g)
        out._backward = bwd
    return out


def expand(a, shape):
    """Broadcast to `shape` without copying; gradient sums back."""
    a = _as_tensor(a)
    out = _make(np.broadcast_to(a.data, shape), (a,), "expand")
    if out.requires_grad:
        def bwd(g):
            a._accum(_unbroadcast(g, a.data.shape), g)
        out._backward = bwd
    return out


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    a = _as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = _make(a.data[idx].copy(), (a,), "narrow")
    if out.requires_grad:
        def bwd(g):
            z = np.zeros_like(a.data)
            z[idx] = g
            a._accum(z, g)
        out._backward = bwd
    return out


# -- reductions ---------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum")
    if out.requires_grad:
        def bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.data.shape), g)
        out._backward = bwd
    return out


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), "mean")
    if out.requires_grad:
        n = a.data.size / out.data.size
        def bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.data.shape) / n, g)
        out._backward = bwd
    return out


# -- matmul -------------------------------------------------------------------


def matmul(a, b):
    """Matrix product on the trailing two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul needs >= 2-D operands")
    out = _make(a.data @ b.data, (a, b), "matmul")
    if out.requires_grad:
        def bwd(g):
            if a.requires_grad:
                ga = g @ b.data.swapaxes(-1, -2)
                a._accum(_unbroadcast(ga, a.data.shape), g)
            if b.requires_grad:
                gb = a.data.swapaxes(-1, -2) @ g
                b._accum(_unbroadcast(gb, b.data.shape), g)
        out._backward = bwd
    return out


# -- nonlinearities -----------------------------------------------------------


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0.0  # derivative at exactly 0 is 0
    if _RELU_TRACE is not None:
        _RELU_TRACE.append(mask)
    out = _make(np.where(mask, a.data, 0.0), (a,), "relu")
    if out.requires_grad:
        def bwd(g):
            a._accum(g * mask, g)
        out._backward = bwd
    return out


def gelu(a):
    a = _as_tensor(a)
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = _make(x * phi, (a,), "gelu")
    if out.requires_grad:
        def bwd(g):
            dens = np.exp(-0.5 * x * x) * _INV_SQRT2PI
            a._accum(g * (phi + x * dens), g)
        out._backward = bwd
    return out


def sigmoid(a):
    a = _as_tensor(a)
    x = a.data
    t = np.exp(-np.abs(x))
    y = np.where(x >= 0.0, 1.0 / (1.0 + t), t / (1.0 + t))
    out = _make(y, (a,), "sigmoid")
    if out.requires_grad:
        def bwd(g):
            a._accum(g * y * (1.0 - y), g)
        out._backward = bwd
    return out


def softmax(a):
    """Numerically stable softmax over the last axis."""
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _make(y, (a,), "softmax")
    if out.requires_grad:
        def bwd(g):
            gy = g * y
            a._accum(gy - y * gy.sum(axis=-1, keepdims=True), g)
        out._backward = bwd
    return out


def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.data.shape[-1]
    if eps <= 0:
        raise ValueError("layer_norm eps must be > 0")
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ValueError(
            "layer_norm affine shape mismatch: x has d=%d, gamma %s, beta %s"
            % (d, gamma.data.shape, beta.data.shape))
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _make(gamma.data * xhat + beta.data, (x, gamma, beta), "layer_norm")
    if out.requires_grad:
        def bwd(g):
            if x.requires_grad:
                dxhat = g * gamma.data
                m1 = dxhat.mean(axis=-1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
                x._accum(inv * (dxhat - m1 - xhat * m2), g)
            if gamma.requires_grad:
                gg = g * xhat
                gamma._accum(gg.reshape(-1, d).sum(axis=0), g)
            if beta.requires_grad:
                beta._accum(g.reshape(-1, d).sum(axis=0), g)
        out._backward = bwd
    return out


# -- fused linear and attention ------------------------------------------------


def linear(x, w, b=None):
    """x @ w (+ b) as one graph node; x is (..., in), w is (in, out)."""
    x, w = _as_tensor(x), _as_tensor(w)
    b = _as_tensor(b) if b is not None else None
    y = x.data @ w.data
    if b is not None:
        y += b.data
    parents = (x, w) if b is None else (x, w, b)
    out = _make(y, parents, "linear")
    if out.requires_grad:
        n_in, n_out = w.data.shape
        def bwd(g):
            if x.requires_grad:
                x._accum(g @ w.data.T, g)
            if w.requires_grad:
                w._accum(x.data.reshape(-1, n_in).T @ g.reshape(-1, n_out), g)
            if b is not None and b.requires_grad:
                b._accum(g.reshape(-1, n_out).sum(axis=0), g)
        out._backward = bwd
    return out


def attention(q, k, v, heads, w_out=None, b_out=None):
    """Multi-head scaled dot-product attention, fused into one graph node.

    q: (..., T_q, d), k/v: (..., T_k, d) with matching leading dims. Each
    head attends with scale 1/sqrt(d/heads); head outputs are concatenated
    and, when `w_out` is given, linearly projected (identity otherwise).
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    d = q.data.shape[-1]
    if d % heads != 0:
        raise ValueError("embed dim %d not divisible by %d heads" % (d, heads))
    if k.data.shape != v.data.shape:
        raise ValueError("key/value shapes differ: %s vs %s"
                         % (k.data.shape, v.data.shape))
    if k.data.shape[:-2] != q.data.shape[:-2]:
        raise ValueError("query/key leading dims differ: %s vs %s"
                         % (q.data.shape, k.data.shape))
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)
    tq, tk = q.data.shape[-2], k.data.shape[-2]
    lead = q.data.shape[:-2]

    def split(a, t):  # (..., t, d) -> (..., heads, t, dh)
        a = a.reshape(lead + (t, heads, dh))
        return np.moveaxis(a, -2, -3)

    qh, kh, vh = split(q.data, tq), split(k.data, tk), split(v.data, tk)
    s = (qh @ kh.swapaxes(-1, -2)) * scale
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    attn = s / s.sum(axis=-1, keepdims=True)
    ctx = attn @ vh
    merged = np.moveaxis(ctx, -3, -2).reshape(lead + (tq, d))
    wo = _as_tensor(w_out) if w_out is not None else None
    bo = _as_tensor(b_out) if b_out is not None else None
    if wo is None:
        y = merged
        parents = (q, k, v)
    else:
        y = merged @ wo.data
        if bo is not None:
            y += bo.data
        parents = (q, k, v, wo) if bo is None else (q, k, v, wo, bo)
    out = _make(y, parents, "attention")
    if out.requires_grad:
        def bwd(g):
            if wo is None:
                gm = g
            else:
                g2 = g.reshape(-1, d)
                if bo is not None and bo.requires_grad:
                    bo._accum(g2.sum(axis=0), g)
                if wo.requires_grad:
                    wo._accum(merged.reshape(-1, d).T @ g2, g)
                gm = g @ wo.data.T
            gctx = np.moveaxis(gm.reshape(lead + (tq, heads, dh)), -2, -3)
            if v.requires_grad:
                gvh = attn.swapaxes(-1, -2) @ gctx
                v._accum(np.moveaxis(gvh, -3, -2).reshape(v.data.shape), g)
            ga = gctx @ vh.swapaxes(-1, -2)
            gs = (ga - (ga * attn).sum(axis=-1, keepdims=True)) * attn * scale
            if q.requires_grad:
                gqh = gs @ kh
                q._accum(np.moveaxis(gqh, -3, -2).reshape(q.data.shape), g)
            if k.requires_grad:
                gkh = gs.swapaxes(-1, -2) @ qh
                k._accum(np.moveaxis(gkh, -3, -2).reshape(k.data.shape), g)
        out._backward = bwd
    return out


# -- spatial ops ----------------------------------------------------------------


def _spatial_4d(x):
    if x.data.ndim == 3:
        return reshape(x, (1,) + x.data.shape), True
    if x.data.ndim == 4:
        return x, False
    raise ValueError("expected (C,H,W) or (B,C,H,W), got %s" % (x.data.shape,))


def conv2d(x, kernel, bias):
    """Same-size 2-D cross-correlation with per-channel bias.

    x: (C_in,H,W) or (B,C_in,H,W); kernel: (C_out,C_in,k,k) with k odd;
    bias: (C_out,). Zero padding of (k-1)/2 keeps the spatial size.
    """
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    x4, squeeze = _spatial_4d(x)
    b_, cin, h, w = x4.data.shape
    if kernel.data.ndim != 4 or kernel.data.shape[2] != kernel.data.shape[3]:
        raise ValueError("kernel must be (C_out,C_in,k,k), got %s"
                         % (kernel.data.shape,))
    cout, kcin, kk, _ = kernel.data.shape
    if kcin != cin:
        raise ValueError("conv2d channel mismatch: input has %d channels, "
                         "kernel expects %d" % (cin, kcin))
    if kk % 2 != 1:
        raise ValueError("conv2d kernel size must be odd, got %d" % kk)
    if bias.data.shape != (cout,):
        raise ValueError("bias must be (C_out,), got %s" % (bias.data.shape,))
    p = (kk - 1) // 2

    # Column matrix in (C*k*k, B*H*W) orientation: the copy streams over the
    # padded image's contiguous rows, which is what makes this fast.
    xp = np.zeros((b_, cin, h + 2 * p, w + 2 * p))
    xp[:, :, p:p + h, p:p + w] = x4.data
    win = sliding_window_view(xp, (kk, kk), axis=(2, 3))  # (B,C,H,W,k,k)
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(cin * kk * kk, b_ * h * w)
    wmat = kernel.data.reshape(cout, cin * kk * kk)
    ymat = wmat @ cols
    ymat += bias.data[:, None]
    y = np.ascontiguousarray(
        np.moveaxis(ymat.reshape(cout, b_, h, w), 0, 1))
    out = _make(y, (x4, kernel, bias), "conv2d")
    if out.requires_grad:
        def bwd(g):
            gmat = np.ascontiguousarray(np.moveaxis(g, 1, 0)).reshape(cout, -1)
            if bias.requires_grad:
                bias._accum(gmat.sum(axis=1), g)
            if kernel.requires_grad:
                kernel._accum((gmat @ cols.T).reshape(kernel.data.shape), g)
            if x4.requires_grad:
                dcols = (wmat.T @ gmat).reshape(cin, kk, kk, b_, h, w)
                dxp = np.zeros((cin, b_, h + 2 * p, w + 2 * p))
                for i in range(kk):
                    for j in range(kk):
                        dxp[:, :, i:i + h, j:j + w] += dcols[:, i, j]
                x4._accum(np.moveaxis(dxp[:, :, p:p + h, p:p + w], 0, 1), g)
        out._backward = bwd
    return reshape(out, out.data.shape[1:]) if squeeze else out


def maxpool2d(x, size=2):
    """Non-overlapping max pooling; ties route the gradient to the first max
    in row-major block order."""
    x = _as_tensor(x)
    x4, squeeze = _spatial_4d(x)
    b_, c, h, w = x4.data.shape
    if h % size or w % size:
        raise ValueError("maxpool2d needs H, W divisible by %d" % size)
    views = [x4.data[:, :, i::size, j::size]
             for i in range(size) for j in range(size)]
    y = views[0].copy()
    for v in views[1:]:
        np.maximum(y, v, out=y)
    out = _make(y, (x4,), "maxpool2d")
    if out.requires_grad:
        def bwd(g):
            gx = np.zeros_like(x4.data)
            claimed = np.zeros(y.shape, dtype=bool)
            for i in range(size):
                for j in range(size):
                    hit = (x4.data[:, :, i::size, j::size] == y) & ~claimed
                    gx[:, :, i::size, j::size] = np.where(hit, g, 0.0)
                    claimed |= hit
            x4._accum(gx, g)
        out._backward = bwd
    return reshape(out, out.data.shape[1:]) if squeeze else out


def upsample_nearest(x, fh, fw=None):
    """Nearest-neighbor upsampling: each pixel becomes an fh x fw block."""
    x = _as_tensor(x)
    fw = fh if fw is None else fw
    x4, squeeze = _spatial_4d(x)
    b_, c, h, w = x4.data.shape
    y = np.broadcast_to(x4.data[:, :, :, None, :, None],
                        (b_, c, h, fh, w, fw)).reshape(b_, c, h * fh, w * fw)
    out = _make(y, (x4,), "upsample_nearest")
    if out.requires_grad:
        def bwd(g):
            x4._accum(g.reshape(b_, c, h, fh, w, fw).sum(axis=(3, 5)), g)
        out._backward = bwd
    return reshape(out, out.data.shape[1:]) if squeeze else out


# -- parameters ----------------------------------------------------------------


@dataclass
class _Entry:
    value: np.ndarray
    trainable: bool


class ParameterStore:
    """Named parameter arrays with frozen/trainable flags, insertion-ordered."""

    def __init__(self):
        self._entries: dict[str, _Entry] = {}

    def add(self, name, value, trainable=True):
        if name in self._entries:
            raise ValueError("duplicate parameter name %r" % name)
        arr = np.ascontiguousarray(value, dtype=np.float64)
        self._entries[name] = _Entry(arr, bool(trainable))
        return arr

    def __contains__(self, name):
        return name in self._entries

    def __getitem__(self, name):
        return self._entries[name].value

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def items(self):
        return [(n, e.value, e.trainable) for n, e in self._entries.items()]

    def is_trainable(self, name):
        return self._entries[name].trainable

    def trainable_names(self):
        return [n for n, e in self._entries.items() if e.trainable]

    def frozen_names(self):
        return [n for n, e in self._entries.items() if not e.trainable]

    def set_trainable(self, name, flag):
        self._entries[name].trainable = bool(flag)

    def freeze_all(self):
        for e in self._entries.values():
            e.trainable = False

    def unfreeze_all(self):
        for e in self._entries.values():
            e.trainable = True

    def set_value(self, name, value):
        """Replace an entry's contents in place (shape must match)."""
        e = self._entries[name]
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != e.value.shape:
            raise ValueError("shape mismatch for %r: %s vs %s"
                             % (name, arr.shape, e.value.shape))
        e.value[...] = arr

    def leaves(self):
        """Fresh graph leaves sharing this store's arrays (no copies)."""
        return {n: Tensor(e.value, requires_grad=e.trainable, op="param:" + n)
                for n, e in self._entries.items()}

    def count(self, trainable_only=False):
        return sum(e.value.size for e in self._entries.values()
                   if e.trainable or not trainable_only)

    def snapshot(self):
        """Byte-exact copies of every entry, for freeze verification."""
        return {n: e.value.tobytes() for n, e in self._entries.items()}

    def copy_values(self):
        return {n: e.value.copy() for n, e in self._entries.items()}

    def load_values(self, values):
        for n, v in values.items():
            self.set_value(n, v)

    @staticmethod
    def merge(*stores):
        """A store over the same arrays (shared, not copied) of several stores."""
        merged = ParameterStore()
        for s in stores:
            for n, e in s._entries.items():
                if n in merged._entries:
                    raise ValueError("duplicate parameter name %r in merge" % n)
                merged._entries[n] = e  # shared entry: flags and array alias
        return merged


@dataclass
class GradientReport:
    """Loss value plus a gradient for every trainable parameter."""
    loss: float
    grads: dict[str, np.ndarray]


def grad(loss_fn, store):
    """Evaluate `loss_fn(leaves)` and return analytic gradients.

    `loss_fn` receives a dict of graph leaves (one per store entry, frozen
    ones marked as not requiring grad) and must return a scalar Tensor.
    """
    leaves = store.leaves()
    loss = loss_fn(leaves)
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ValueError("loss_fn must return a scalar Tensor")
    if not np.isfinite(loss.data):
        bad = first_nonfinite(loss)
        raise NonFiniteError("loss is non-finite; first non-finite "
                             "intermediate: %r" % bad)
    loss.backward()
    grads = {}
    for name in store.trainable_names():
        leaf = leaves[name]
        grads[name] = (leaf.grad if leaf.grad is not None
                       else np.zeros_like(leaf.data))
    return GradientReport(loss=float(loss.data), grads=grads)


# -- finite differences ----------------------------------------------------------


@dataclass
class FiniteDiffResult:
    """Per-parameter verdict of the central-difference gradient check."""
    name: str
    status: str  # "pass" | "fail" | "skipped"
    max_rel_err: float = 0.0
    checked: int = 0
    kinks: int = 0
    rel_err: np.ndarray | None = field(default=None, repr=False)

    @property
    def ok(self):
        return self.status != "fail"


def _traced_loss(loss_fn, store):
    global _RELU_TRACE
    _RELU_TRACE = trace = []
    try:
        loss = loss_fn(store.leaves())
    finally:
        _RELU_TRACE = None
    return float(loss.data), trace


def _same_pattern(ta, tb):
    if len(ta) != len(tb):
        return False
    return all(np.array_equal(a, b) for a, b in zip(ta, tb))


def finite_diff_check(loss_fn, store, step=1e-5, tol=1e-3, max_entries=None):
    """Compare analytic gradients against central finite differences.

    Relative error per entry is |analytic - numeric| guarded by
    max(|analytic|, |numeric|, 1e-8). Entries whose perturbation flips a
    ReLU activation pattern are flagged as kinks and excluded from
    pass/fail. Frozen parameters are reported as skipped. `max_entries`
    optionally subsamples large parameters (deterministically).
    """
    if step <= 0:
        raise ValueError("step must be > 0")
    report = grad(loss_fn, store)
    results = []
    for name, value, trainable in store.items():
        if not trainable:
            results.append(FiniteDiffResult(name, "skipped"))
            continue
        analytic = report.grads[name].reshape(-1)
        flat = value.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            sel = np.linspace(0, n - 1, max_entries).astype(int)
        else:
            sel = np.arange(n)
        rel = np.zeros(sel.size)
        kinks = 0
        for pos, i in enumerate(sel):
            orig = flat[i]
            flat[i] = orig + step
            lp, sig_p = _traced_loss(loss_fn, store)
            flat[i] = orig - step
            lm, sig_m = _traced_loss(loss_fn, store)
            flat[i] = orig
            if not _same_pattern(sig_p, sig_m):
                rel[pos] = np.nan  # nondifferentiable point
                kinks += 1
                continue
            numeric = (lp - lm) / (2.0 * step)
            denom = max(abs(analytic[i]), abs(numeric), 1e-8)
            rel[pos] = abs(analytic[i] - numeric) / denom
        finite = rel[~np.isnan(rel)]
        worst = float(finite.max()) if finite.size else 0.0
        status = "pass" if worst < tol else "fail"
        results.append(FiniteDiffResult(name, status, worst, int(sel.size),
                                        kinks, rel))
    return results

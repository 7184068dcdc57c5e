"""Dense-tensor numerical core with reverse-mode automatic differentiation.

Everything downstream (networks, losses, metrics) is built from the
primitives in this module.  Design points:

* numpy arrays underneath; float64 everywhere by default, float32 allowed
  for training speed (ops preserve the input dtype).
* closure-based backward rules; ``backward()`` walks the graph in reverse
  topological order exactly once.
* every operation validates that its output is finite -- NaN/Inf anywhere
  is treated as an error state, not a value.

Coordinate convention (shared repo-wide): sampling grids and flows store
normalized coordinates in [-1, 1], corner-aligned, ordered (x, y) with x
along the width axis.  ``identity_grid`` produces the grid for which
``grid_sample`` is an exact identity.
"""

from __future__ import annotations

import functools

import numpy as np

__all__ = [
    "Tensor", "NonFiniteError", "no_grad", "tensor", "parameter", "backward",
    "add", "sub", "mul", "scale", "neg", "abs_", "relu", "sigmoid", "exp",
    "log", "softplus", "xlogx", "concat", "reshape", "transpose",
    "broadcast_to", "slice_axis", "sum_", "mean", "matmul", "softmax",
    "conv2d", "conv_transpose2d", "grid_sample", "instance_norm", "avgpool2",
    "bilinear_resize", "resample", "solve", "identity_grid", "Module",
]


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph construction."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in (np.float32, np.float64):
        return arr.astype(np.float64)
    return arr


class Tensor:
    """N-dimensional real array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
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

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._non_scalar()

    def _non_scalar(self):
        raise ValueError(f"item() on non-scalar tensor of shape {self.shape}")

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # sugar -------------------------------------------------------------
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else scale(self, 1.0, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else scale(self, 1.0, -float(other))

    def __rsub__(self, other):
        return scale(self, -1.0, float(other))

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}{flag})"


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def parameter(data, dtype=None):
    return Tensor(data, requires_grad=True, dtype=dtype)


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {op}")


def _make(out_data, parents, bw, op):
    """Wrap an op result; attach the backward closure when grads are on."""
    _check_finite(out_data, op)
    need = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    t = Tensor.__new__(Tensor)
    t.data = out_data
    t.grad = None
    t.requires_grad = need
    t._parents = tuple(p for p in parents if p.requires_grad) if need else ()
    t._backward = bw if need else None
    return t


def _acc(t, g):
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g


def backward(loss):
    """Populate ``grad`` for every reachable tensor with requires_grad.

    Repeated calls accumulate into existing grad buffers unless they are
    zeroed in between.
    """
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    topo, seen, stack = [], set(), [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ----------------------------------------------------------------------
# elementwise / structural
# ----------------------------------------------------------------------

def _require_same_shape(a, b, op):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b):
    _require_same_shape(a, b, "add")

    def bw(g):
        _acc(a, g)
        _acc(b, g)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    _require_same_shape(a, b, "sub")

    def bw(g):
        _acc(a, g)
        _acc(b, -g)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    _require_same_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        _acc(a, g * bd)
        _acc(b, g * ad)

    return _make(ad * bd, (a, b), bw, "mul")


def scale(a, s, shift=0.0):
    """a * s + shift with python scalars s, shift."""
    s = float(s)

    def bw(g):
        _acc(a, g * s)

    out = a.data * s
    if shift != 0.0:
        out = out + shift
    return _make(out, (a,), bw, "scale")


def neg(a):
    return scale(a, -1.0)


def abs_(a):
    sgn = np.sign(a.data)

    def bw(g):
        _acc(a, g * sgn)

    return _make(np.abs(a.data), (a,), bw, "abs")


def relu(a):
    mask = a.data > 0

    def bw(g):
        _acc(a, g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), bw, "relu")


def sigmoid(a):
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bw(g):
        _acc(a, g * out * (1.0 - out))

    return _make(out, (a,), bw, "sigmoid")


def exp(a):
    out = np.exp(a.data)

    def bw(g):
        _acc(a, g * out)

    return _make(out, (a,), bw, "exp")


def log(a):
    if np.any(a.data <= 0):
        raise NonFiniteError("log of non-positive value")
    ad = a.data

    def bw(g):
        _acc(a, g / ad)

    return _make(np.log(ad), (a,), bw, "log")


def softplus(a):
    # stable: max(x,0) + log1p(exp(-|x|))
    ad = a.data
    out = np.maximum(ad, 0.0) + np.log1p(np.exp(-np.abs(ad)))

    def bw(g):
        s = np.empty_like(ad)
        pos = ad >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
        ex = np.exp(ad[~pos])
        s[~pos] = ex / (1.0 + ex)
        _acc(a, g * s)

    return _make(out, (a,), bw, "softplus")


def xlogx(a):
    """x * log(x) with the removable singularity x=0 -> 0 (subgradient 0).

    Radial basis of the thin-plate spline: U(r^2) = r^2 log(r^2).
    """
    ad = a.data
    if np.any(ad < 0):
        raise NonFiniteError("xlogx of negative value")
    pos = ad > 0
    out = np.zeros_like(ad)
    out[pos] = ad[pos] * np.log(ad[pos])

    def bw(g):
        d = np.zeros_like(ad)
        d[pos] = np.log(ad[pos]) + 1.0
        _acc(a, g * d)

    return _make(out, (a,), bw, "xlogx")


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of empty list")
    sizes = [t.shape[axis] for t in tensors]
    offs = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offs[:-1], offs[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _acc(t, g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 tensors, bw, "concat")


def reshape(a, shape):
    old = a.shape

    def bw(g):
        _acc(a, g.reshape(old))

    return _make(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a, axes):
    inv = np.argsort(axes)

    def bw(g):
        _acc(a, g.transpose(inv))

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), bw, "transpose")


def broadcast_to(a, shape):
    old = a.shape
    lead = len(shape) - len(old)
    if lead < 0:
        raise ValueError(f"broadcast_to: cannot reduce rank {old} -> {shape}")
    expanded = [i + lead for i, (o, n) in enumerate(zip(old, shape[lead:])) if o == 1 and n != 1]
    axes = tuple(range(lead)) + tuple(expanded)

    def bw(g):
        red = g.sum(axis=axes, keepdims=False) if axes else g
        _acc(a, red.reshape(old))

    return _make(np.ascontiguousarray(np.broadcast_to(a.data, shape)), (a,), bw, "broadcast_to")


def slice_axis(a, axis, start, stop):
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def bw(g):
        buf = np.zeros_like(a.data)
        buf[sl] = g
        _acc(a, buf)

    return _make(np.ascontiguousarray(a.data[sl]), (a,), bw, "slice_axis")


def sum_(a, axis=None, keepdims=False):
    if axis is None:
        out = np.asarray(a.data.sum(keepdims=keepdims))

        def bw_scalar(g):
            _acc(a, np.full_like(a.data, np.asarray(g).reshape(-1)[0]))

        return _make(out, (a,), bw_scalar, "sum")

    axes = (axis,) if isinstance(axis, int) else tuple(axis)

    def bw(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axes)
        _acc(a, np.broadcast_to(gg, a.shape))

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum_(a, axis, keepdims), 1.0 / n)


def matmul(a, b):
    """Batched matrix product; leading dims must match exactly."""
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dims {a.shape} x {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: batch dims {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        _acc(a, g @ bd.swapaxes(-1, -2))
        _acc(b, ad.swapaxes(-1, -2) @ g)

    return _make(ad @ bd, (a, b), bw, "matmul")


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _acc(a, (g - dot) * out)

    return _make(out, (a,), bw, "softmax")


# ----------------------------------------------------------------------
# convolution
# ----------------------------------------------------------------------

def _conv_output_size(h, k, stride, padding):
    return (h + 2 * padding - k) // stride + 1


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D convolution (cross-correlation), NCHW layout.

    x: (N, Cin, H, W); w: (Cout, Cin, kh, kw); b: (Cout,) or None.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d: need 4-D input/weight, got {x.shape}, {w.shape}")
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ValueError(f"conv2d: input channels {cin} != weight channels {cin_w}")
    if b is not None and b.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {b.shape} != ({cout},)")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input")
    ho = _conv_output_size(h, kh, stride, padding)
    wo = _conv_output_size(wd, kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ValueError("conv2d: zero-size output")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]                       # (N,Cin,Ho,Wo,kh,kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cin * kh * kw)
    wmat = w.data.reshape(cout, cin * kh * kw).T
    out = cols @ wmat
    if b is not None:
        out += b.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def bw(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        if w.requires_grad:
            _acc(w, (cols.T @ gmat).T.reshape(cout, cin, kh, kw))
        if b is not None and b.requires_grad:
            _acc(b, gmat.sum(axis=0))
        if x.requires_grad:
            dcols = (gmat @ wmat.T).reshape(n, ho, wo, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            dxp = np.zeros_like(xp)
            for ki in range(kh):
                for kj in range(kw):
                    dxp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += \
                        dcols[:, :, :, :, ki, kj]
            _acc(x, dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, bw, "conv2d")


def conv_transpose2d(x, w, b=None, stride=1, padding=0, output_padding=0):
    """Transposed 2-D convolution, the adjoint of conv2d.

    x: (N, Cin, H, W); w: (Cin, Cout, kh, kw).  Output spatial size is
    (H-1)*stride - 2*padding + kh + output_padding.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv_transpose2d: need 4-D input/weight, got {x.shape}, {w.shape}")
    n, cin, h, wd = x.shape
    cin_w, cout, kh, kw = w.shape
    if cin != cin_w:
        raise ValueError(f"conv_transpose2d: input channels {cin} != weight channels {cin_w}")
    if b is not None and b.shape != (cout,):
        raise ValueError(f"conv_transpose2d: bias shape {b.shape} != ({cout},)")
    ho = (h - 1) * stride - 2 * padding + kh + output_padding
    wo = (wd - 1) * stride - 2 * padding + kw + output_padding
    if ho <= 0 or wo <= 0:
        raise ValueError("conv_transpose2d: zero-size output")
    hf = (h - 1) * stride + kh
    wf = (wd - 1) * stride + kw

    t = np.tensordot(x.data, w.data, axes=([1], [0]))          # (N,H,W,Cout,kh,kw)
    full = np.zeros((n, cout, hf, wf), dtype=x.data.dtype)
    for ki in range(kh):
        for kj in range(kw):
            full[:, :, ki:ki + stride * (h - 1) + 1:stride,
                 kj:kj + stride * (wd - 1) + 1:stride] += t[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
    pad_h = max(0, padding + ho - hf)
    pad_w = max(0, padding + wo - wf)
    if pad_h or pad_w:
        full = np.pad(full, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)))
    out = np.ascontiguousarray(full[:, :, padding:padding + ho, padding:padding + wo])
    if b is not None:
        out += b.data[None, :, None, None]

    def bw(g):
        gfull = np.zeros((n, cout, hf + pad_h, wf + pad_w), dtype=g.dtype)
        gfull[:, :, padding:padding + ho, padding:padding + wo] = g
        gfull = gfull[:, :, :hf, :wf]
        if b is not None and b.requires_grad:
            _acc(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            for ki in range(kh):
                for kj in range(kw):
                    sl = gfull[:, :, ki:ki + stride * (h - 1) + 1:stride,
                               kj:kj + stride * (wd - 1) + 1:stride]
                    dx += np.tensordot(sl, w.data[:, :, ki, kj], axes=([1], [1])).transpose(0, 3, 1, 2)
            _acc(x, dx)
        if w.requires_grad:
            dw = np.zeros_like(w.data)
            for ki in range(kh):
                for kj in range(kw):
                    sl = gfull[:, :, ki:ki + stride * (h - 1) + 1:stride,
                               kj:kj + stride * (wd - 1) + 1:stride]
                    dw[:, :, ki, kj] = np.tensordot(x.data, sl, axes=([0, 2, 3], [0, 2, 3]))
            _acc(w, dw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, bw, "conv_transpose2d")


# ----------------------------------------------------------------------
# sampling / resizing
# ----------------------------------------------------------------------

_SNAP_TOL = 1e-8  # px; corner-aligned normalized round-trips err below 1e-13


def _to_pixels(coord, size):
    px = (coord + 1.0) * (0.5 * (size - 1))
    r = np.rint(px)
    return np.where(np.abs(px - r) <= _SNAP_TOL, r, px)


@functools.lru_cache(maxsize=64)
def _identity_grid_cached(h, w):
    ys = 2.0 * np.arange(h, dtype=np.float64) / (h - 1) - 1.0 if h > 1 else np.zeros(1)
    xs = 2.0 * np.arange(w, dtype=np.float64) / (w - 1) - 1.0 if w > 1 else np.zeros(1)
    grid = np.empty((h, w, 2), dtype=np.float64)
    grid[:, :, 0] = xs[None, :]
    grid[:, :, 1] = ys[:, None]
    grid.setflags(write=False)
    return grid


def identity_grid(h, w):
    """(h, w, 2) grid of normalized (x, y) coords sampling each own cell."""
    return _identity_grid_cached(h, w)


def grid_sample(x, flow):
    """Bilinear sampling of x at normalized coordinates, clamped to border.

    x: (N, C, H, W); flow: (N, Ho, Wo, 2) with (x, y) in [-1, 1].
    """
    if x.ndim != 4 or flow.ndim != 4 or flow.shape[-1] != 2:
        raise ValueError(f"grid_sample: bad shapes {x.shape}, {flow.shape}")
    if x.shape[0] != flow.shape[0]:
        raise ValueError(f"grid_sample: batch mismatch {x.shape[0]} vs {flow.shape[0]}")
    n, c, h, w = x.shape
    ho, wo = flow.shape[1], flow.shape[2]
    m = ho * wo

    px = _to_pixels(flow.data[..., 0], w).reshape(n, m)
    py = _to_pixels(flow.data[..., 1], h).reshape(n, m)
    inx = (px > 0) & (px < w - 1)
    iny = (py > 0) & (py < h - 1)
    pxc = np.clip(px, 0.0, w - 1.0)
    pyc = np.clip(py, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(pxc), w - 2).astype(np.int64) if w > 1 else np.zeros_like(pxc, dtype=np.int64)
    y0 = np.minimum(np.floor(pyc), h - 2).astype(np.int64) if h > 1 else np.zeros_like(pyc, dtype=np.int64)
    wx = (pxc - x0).astype(x.data.dtype)
    wy = (pyc - y0).astype(x.data.dtype)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)

    xr = x.data.reshape(n, c, h * w)
    def gather(yy, xx):
        idx = (yy * w + xx)[:, None, :]
        return np.take_along_axis(xr, np.broadcast_to(idx, (n, c, m)), axis=2)

    v00 = gather(y0, x0)
    v01 = gather(y0, x1)
    v10 = gather(y1, x0)
    v11 = gather(y1, x1)
    wxb = wx[:, None, :]
    wyb = wy[:, None, :]
    out = ((1 - wyb) * ((1 - wxb) * v00 + wxb * v01)
           + wyb * ((1 - wxb) * v10 + wxb * v11))
    out = out.reshape(n, c, ho, wo)

    def bw(g):
        gm = g.reshape(n, c, m)
        if x.requires_grad:
            dxr = np.zeros((n, c, h * w), dtype=x.data.dtype)
            ni = np.arange(n)[:, None, None]
            ci = np.arange(c)[None, :, None]
            for yy, xx, ww in ((y0, x0, (1 - wyb) * (1 - wxb)),
                               (y0, x1, (1 - wyb) * wxb),
                               (y1, x0, wyb * (1 - wxb)),
                               (y1, x1, wyb * wxb)):
                np.add.at(dxr, (ni, ci, (yy * w + xx)[:, None, :]), gm * ww)
            _acc(x, dxr.reshape(n, c, h, w))
        if flow.requires_grad:
            dpx = (((v01 - v00) * (1 - wyb) + (v11 - v10) * wyb) * gm).sum(axis=1)
            dpy = (((v10 - v00) * (1 - wxb) + (v11 - v01) * wxb) * gm).sum(axis=1)
            dflow = np.zeros_like(flow.data)
            dflow[..., 0] = (dpx * inx * (0.5 * (w - 1))).reshape(n, ho, wo)
            dflow[..., 1] = (dpy * iny * (0.5 * (h - 1))).reshape(n, ho, wo)
            _acc(flow, dflow)

    return _make(np.ascontiguousarray(out), (x, flow), bw, "grid_sample")


def instance_norm(x, gamma, beta, eps=1e-5):
    """Per-(sample, channel) standardization with learned scale/shift."""
    if x.ndim != 4:
        raise ValueError(f"instance_norm: need (N,C,H,W), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"instance_norm: gamma/beta must be ({c},)")
    if eps <= 0:
        raise ValueError("instance_norm: eps must be > 0")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def bw(g):
        if beta.requires_grad:
            _acc(beta, g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            _acc(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxh = g * gamma.data[None, :, None, None]
            m1 = dxh.mean(axis=(2, 3), keepdims=True)
            m2 = (dxh * xhat).mean(axis=(2, 3), keepdims=True)
            _acc(x, inv * (dxh - m1 - xhat * m2))

    return _make(out, (x, gamma, beta), bw, "instance_norm")


def avgpool2(x):
    """2x2 average pooling with stride 2; spatial dims must be even."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avgpool2: odd spatial dims ({h},{w})")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        _acc(x, np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25)

    return _make(out, (x,), bw, "avgpool2")


@functools.lru_cache(maxsize=256)
def _resize_matrix(src, dst):
    """(dst, src) corner-aligned bilinear interpolation matrix."""
    m = np.zeros((dst, src), dtype=np.float64)
    if src == 1:
        m[:, 0] = 1.0
        return m
    if dst == 1:
        pos = np.array([(src - 1) / 2.0])
    else:
        ratio = (src - 1) / (dst - 1)
        pos = np.arange(dst, dtype=np.float64) * ratio
    i0 = np.minimum(np.floor(pos).astype(np.int64), src - 2)
    frac = pos - i0
    m[np.arange(dst), i0] = 1.0 - frac
    m[np.arange(dst), i0 + 1] += frac
    m.setflags(write=False)
    return m


def bilinear_resize(x, out_h, out_w):
    """Corner-aligned bilinear resize of (N, C, H, W); same-size is identity."""
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return x
    wh = _resize_matrix(h, out_h).astype(x.data.dtype)
    ww = _resize_matrix(w, out_w).astype(x.data.dtype)
    out = wh @ x.data @ ww.T

    def bw(g):
        _acc(x, wh.T @ g @ ww)

    return _make(np.ascontiguousarray(out), (x,), bw, "bilinear_resize")


def resample(x, mode, size=None):
    """Resampling front-end: 'avgpool2', 'bilinear_up2' or 'bilinear_to'."""
    if mode == "avgpool2":
        return avgpool2(x)
    if mode == "bilinear_up2":
        return bilinear_resize(x, x.shape[2] * 2, x.shape[3] * 2)
    if mode == "bilinear_to":
        if size is None:
            raise ValueError("resample: bilinear_to needs a target size")
        return bilinear_resize(x, size[0], size[1])
    raise ValueError(f"resample: unknown mode {mode!r}")


def solve(a, b):
    """Batched linear solve X = A^-1 B, differentiable in A and B.

    a: (..., n, n), b: (..., n, m).
    """
    xd = np.linalg.solve(a.data, b.data)

    def bw(g):
        gb = np.linalg.solve(a.data.swapaxes(-1, -2), g)
        if a.requires_grad:
            _acc(a, -gb @ xd.swapaxes(-1, -2))
        if b.requires_grad:
            _acc(b, gb)

    return _make(xd, (a, b), bw, "solve")


# ----------------------------------------------------------------------
# parameter containers
# ----------------------------------------------------------------------

class Module:
    """Minimal parameter container: collects Tensor/Module attributes."""

    def named_parameters(self, prefix=""):
        out = {}
        for name, val in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(val, Tensor):
                out[key] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(f"{key}."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Tensor):
                        out[f"{key}.{i}"] = item
                    elif isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
        return self

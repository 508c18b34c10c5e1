"""Differentiable forward operations with their hand-written backward rules.

Every function accepts Tensors (or anything ``np.asarray`` understands, taken
as a constant) and returns a new Tensor, registering itself on the active
tape when any input is tracked.
"""

from __future__ import annotations

import itertools

import numpy as np

from .tensor import Tensor, as_tensor, note_branches, record


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        gb = -g * out / b.data
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(gb, b.shape)

    return record(out, (a, b), backward, "div")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    note_branches(mask)
    return record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def abs(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    sign = np.sign(x.data)
    note_branches(sign)
    return record(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def square(x) -> Tensor:
    x = as_tensor(x)
    return record(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return record(out, (x,), lambda g: (g / (2.0 * out),), "sqrt")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return record(out, (x,), lambda g: (g * out,), "exp")


def where(condition, a, b) -> Tensor:
    """Select ``a`` where the constant boolean ``condition`` holds, else ``b``."""
    cond = np.asarray(condition, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                _unbroadcast(np.where(cond, 0.0, g), b.shape))

    return record(np.where(cond, a.data, b.data), (a, b), backward, "where")


# --------------------------------------------------------------------------
# reductions and shape plumbing


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return record(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    orig = x.shape
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),), "reshape")


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    basic = _is_basic(index)

    def backward(g):
        gx = np.zeros(x.shape)
        if basic:
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return record(x.data[index], (x,), backward, "getitem")


def concat(tensors, axis: int = 0) -> Tensor:
    """Join tensors along ``axis`` (the channel axis by default)."""
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return record(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if axis < 0:
        axis += tensors[0].ndim + 1
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def softmax_over_axis(x, axis: int) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record(out, (x,), backward, "softmax")


# --------------------------------------------------------------------------
# convolution and pooling


def _window_slices(offset, stride, out_shape):
    return (slice(None),) + tuple(
        slice(o, o + stride * (m - 1) + 1, stride) for o, m in zip(offset, out_shape))


def _conv(x, weight, stride, padding, bias, nd, op) -> Tensor:
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != nd + 1 or weight.ndim != nd + 2:
        raise ValueError(f"{op}: expected input with {nd + 1} dims and weights with {nd + 2}, "
                         f"got input {x.shape} and weights {weight.shape}")
    if stride < 1:
        raise ValueError(f"{op}: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"{op}: padding must be >= 0, got {padding}")
    c_out, c_in = weight.shape[:2]
    kernel = weight.shape[2:]
    k = kernel[0]
    if any(s != k for s in kernel) or k % 2 == 0:
        raise ValueError(f"{op}: kernel must be square and odd-sized, got weights {weight.shape}")
    if x.shape[0] != c_in:
        raise ValueError(f"{op}: input shape {x.shape} has {x.shape[0]} channels "
                         f"but weight shape {weight.shape} expects {c_in}")
    spatial = x.shape[1:]
    if any(s + 2 * padding < k for s in spatial):
        raise ValueError(f"{op}: input {x.shape} with padding {padding} is smaller than kernel {k}")
    out_sp = tuple((s + 2 * padding - k) // stride + 1 for s in spatial)
    xp = np.pad(x.data, [(0, 0)] + [(padding, padding)] * nd) if padding else x.data
    offsets = list(itertools.product(range(k), repeat=nd))
    cols = np.empty((c_in, len(offsets)) + out_sp)
    for n, off in enumerate(offsets):
        cols[:, n] = xp[_window_slices(off, stride, out_sp)]
    cols2 = cols.reshape(c_in * len(offsets), -1)
    wmat = weight.data.reshape(c_out, -1)
    out = (wmat @ cols2).reshape((c_out,) + out_sp)
    inputs = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ValueError(f"{op}: bias shape {bias.shape} does not match {c_out} output channels")
        out += bias.data.reshape((c_out,) + (1,) * nd)
        inputs = (x, weight, bias)

    def backward(g):
        g2 = g.reshape(c_out, -1)
        gw = (g2 @ cols2.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape((c_in, len(offsets)) + out_sp)
            gxp = np.zeros(xp.shape)
            for n, off in enumerate(offsets):
                gxp[_window_slices(off, stride, out_sp)] += gcols[:, n]
            crop = (slice(None),) + tuple(slice(padding, padding + s) for s in spatial)
            gx = gxp[crop]
        grads = (gx, gw)
        if bias is not None:
            grads += (g2.sum(axis=1),)
        return grads

    return record(out, inputs, backward, op)


def conv2d(x, weight, stride: int = 1, padding: int = 0, bias=None) -> Tensor:
    """2-D cross-correlation of ``x[C_in,H,W]`` with ``weight[C_out,C_in,k,k]``, zero padded."""
    return _conv(x, weight, stride, padding, bias, 2, "conv2d")


def conv3d(x, weight, stride: int = 1, padding: int = 0, bias=None) -> Tensor:
    """3-D cross-correlation of ``x[C_in,D,H,W]`` with ``weight[C_out,C_in,k,k,k]``."""
    return _conv(x, weight, stride, padding, bias, 3, "conv3d")


def _pool_geometry(x, window, stride, nd, op):
    if window < 1:
        raise ValueError(f"{op}: window must be >= 1, got {window}")
    if stride < 1:
        raise ValueError(f"{op}: stride must be >= 1, got {stride}")
    if x.ndim != nd + 1:
        raise ValueError(f"{op}: expected {nd + 1}-dim input, got {x.shape}")
    spatial = x.shape[1:]
    if any(window > s for s in spatial):
        raise ValueError(f"{op}: window {window} exceeds input dims {x.shape}")
    out_sp = tuple((s - window) // stride + 1 for s in spatial)
    return out_sp, list(itertools.product(range(window), repeat=nd))


def maxpool3d(x, window: int, stride: int | None = None) -> Tensor:
    """Max over cubic windows; ties send the gradient to the lowest linear index."""
    x = as_tensor(x)
    stride = window if stride is None else stride
    out_sp, offsets = _pool_geometry(x, window, stride, 3, "maxpool3d")
    views = np.stack([x.data[_window_slices(o, stride, out_sp)] for o in offsets])
    # argmax returns the first maximum; offsets run in increasing linear order.
    arg = views.argmax(axis=0)
    note_branches(arg)
    out = np.take_along_axis(views, arg[None], axis=0)[0]

    def backward(g):
        gx = np.zeros(x.shape)
        for n, off in enumerate(offsets):
            gx[_window_slices(off, stride, out_sp)] += np.where(arg == n, g, 0.0)
        return (gx,)

    return record(out, (x,), backward, "maxpool3d")


def avg_pool2d(x, window: int, stride: int | None = None) -> Tensor:
    x = as_tensor(x)
    stride = window if stride is None else stride
    out_sp, offsets = _pool_geometry(x, window, stride, 2, "avg_pool2d")
    out = np.zeros((x.shape[0],) + out_sp)
    for off in offsets:
        out += x.data[_window_slices(off, stride, out_sp)]
    out /= len(offsets)

    def backward(g):
        gx = np.zeros(x.shape)
        share = g / len(offsets)
        for off in offsets:
            gx[_window_slices(off, stride, out_sp)] += share
        return (gx,)

    return record(out, (x,), backward, "avg_pool2d")


def _upsample_nearest(x, factor, nd, op) -> Tensor:
    x = as_tensor(x)
    if factor < 1:
        raise ValueError(f"{op}: factor must be >= 1, got {factor}")
    if x.ndim != nd + 1:
        raise ValueError(f"{op}: expected {nd + 1}-dim input, got {x.shape}")
    out = x.data
    for ax in range(1, nd + 1):
        out = np.repeat(out, factor, axis=ax)

    def backward(g):
        blocked = []
        for s in x.shape[1:]:
            blocked += [s, factor]
        g = g.reshape((x.shape[0],) + tuple(blocked))
        return (g.sum(axis=tuple(range(2, 2 * nd + 1, 2))),)

    return record(out, (x,), backward, op)


def upsample2d(x, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of ``x[C,H,W]`` by an integer factor."""
    return _upsample_nearest(x, factor, 2, "upsample2d")


def upsample3d(x, factor: int = 2) -> Tensor:
    return _upsample_nearest(x, factor, 3, "upsample3d")


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centres, edge clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.minimum(np.floor(src).astype(int), max(n_in - 2, 0))
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(mat, (rows, lo), 1.0 - frac)
    np.add.at(mat, (rows, hi), frac)
    return mat


def resize_bilinear(x, size) -> Tensor:
    """Bilinear resize of ``x[C,h,w]`` to ``size=(H, W)``; each output is a convex mix of inputs."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ValueError(f"resize_bilinear expects [C,h,w], got {x.shape}")
    rows = _interp_matrix(x.shape[1], size[0])
    cols = _interp_matrix(x.shape[2], size[1])
    out = rows @ x.data @ cols.T

    def backward(g):
        return (rows.T @ g @ cols,)

    return record(out, (x,), backward, "resize_bilinear")


# --------------------------------------------------------------------------
# sampling


def bilinear_sample(feature, coords) -> Tensor:
    """Sample ``feature[C,H,W]`` at continuous pixel positions ``coords[H',W',2]``.

    ``coords[..., 0]`` is the column ``u`` and ``coords[..., 1]`` the row ``v``.
    Positions outside ``[0, W-1] x [0, H-1]`` read as zero. Differentiable in
    both the feature values and the coordinates.
    """
    feature, coords = as_tensor(feature), as_tensor(coords)
    if feature.ndim != 3 or coords.ndim != 3 or coords.shape[-1] != 2:
        raise ValueError(f"bilinear_sample expects feature [C,H,W] and coords [H',W',2], "
                         f"got {feature.shape} and {coords.shape}")
    c, h, w = feature.shape
    u = coords.data[..., 0]
    v = coords.data[..., 1]
    valid = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    u = np.where(valid, u, 0.0)
    v = np.where(valid, v, 0.0)
    u0 = np.minimum(np.floor(u).astype(np.int64), max(w - 2, 0))
    v0 = np.minimum(np.floor(v).astype(np.int64), max(h - 2, 0))
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    note_branches(valid, u0, v0)
    fu = u - u0
    fv = v - v0
    flat = feature.data.reshape(c, -1)
    idx = [v0 * w + u0, v0 * w + u1, v1 * w + u0, v1 * w + u1]
    wts = [(1 - fv) * (1 - fu), (1 - fv) * fu, fv * (1 - fu), fv * fu]
    wts = [wt * valid for wt in wts]
    corners = [flat[:, i] for i in idx]
    out = corners[0] * wts[0]
    for cval, wt in zip(corners[1:], wts[1:]):
        out = out + cval * wt

    def backward(g):
        gf = None
        if feature.requires_grad:
            gf = np.zeros(c * h * w)
            offs = (np.arange(c) * (h * w))[:, None, None]
            for i, wt in zip(idx, wts):
                gf += np.bincount((offs + i[None]).ravel(), weights=(g * wt[None]).ravel(),
                                  minlength=c * h * w)
            gf = gf.reshape(feature.shape)
        gc = None
        if coords.requires_grad:
            c00, c01, c10, c11 = corners
            du = (1 - fv) * (c01 - c00) + fv * (c11 - c10)
            dv = (1 - fu) * (c10 - c00) + fu * (c11 - c01)
            gc = np.stack([(g * du).sum(axis=0) * valid, (g * dv).sum(axis=0) * valid], axis=-1)
        return gf, gc

    return record(out, (feature, coords), backward, "bilinear_sample")

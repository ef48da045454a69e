"""Differentiable primitives.

Every function takes and returns :class:`Tensor`. Plain Python or numpy
scalars are accepted where a constant operand makes sense.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from multifuse.errors import ShapeError
from multifuse.tensor.tensor import Tensor, make_result


def _t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = _t(a, b if isinstance(b, Tensor) else None), _t(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return make_result(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add"
    )


def sub(a, b) -> Tensor:
    a, b = _t(a, b if isinstance(b, Tensor) else None), _t(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return make_result(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub"
    )


def mul(a, b) -> Tensor:
    a, b = _t(a, b if isinstance(b, Tensor) else None), _t(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return make_result(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _t(a, b if isinstance(b, Tensor) else None), _t(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return make_result(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D operands, or batched over equal leading dims."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return make_result(ad @ bd, (a, b), backward, "matmul")


def minimum(a, b) -> Tensor:
    a, b = _t(a, b if isinstance(b, Tensor) else None), _t(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "minimum")
    pick_a = a.data <= b.data

    def backward(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return make_result(np.where(pick_a, a.data, b.data), (a, b), backward, "minimum")


def maximum(a, b) -> Tensor:
    a, b = _t(a, b if isinstance(b, Tensor) else None), _t(b, a if isinstance(a, Tensor) else None)
    _check_broadcast(a, b, "maximum")
    pick_a = a.data >= b.data

    def backward(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return make_result(np.where(pick_a, a.data, b.data), (a, b), backward, "maximum")


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to [lo, hi]; gradient is zero where the bound is active."""
    out = np.clip(x.data, lo, hi)
    keep = out == x.data
    return make_result(out, (x,), lambda g: (g * keep,), "clamp")


# ---------------------------------------------------------------- elementwise


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign to stay finite for large |x|
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype, copy=False)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    pos = x.data > 0
    slope = np.where(pos, 1.0, alpha).astype(x.dtype)
    return make_result(x.data * slope, (x,), lambda g: (g * slope,), "leaky_relu")


# ---------------------------------------------------------------- reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def max(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Maximum along one axis; ties share the gradient equally."""
    out = x.data.max(axis=axis, keepdims=True)
    hit = x.data == out
    share = (hit / hit.sum(axis=axis, keepdims=True)).astype(x.dtype)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * share,)

    return make_result(out if keepdims else np.squeeze(out, axis=axis), (x,), backward, "max")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward, "softmax")


# ---------------------------------------------------------------- shape


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from None
    return make_result(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return make_result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def flip(x: Tensor, axis: int) -> Tensor:
    return make_result(np.flip(x.data, axis=axis).copy(), (x,), lambda g: (np.flip(g, axis=axis).copy(),), "flip")


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype
    idx = index if isinstance(index, tuple) else (index,)
    advanced = any(isinstance(i, (list, np.ndarray)) for i in idx)

    def backward(g):
        gx = np.zeros(shape, dtype=dtype)
        if advanced:
            np.add.at(gx, index, g)
        else:
            gx[index] += g
        return (gx,)

    return make_result(np.array(x.data[index]), (x,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make_result(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: {exc}") from None

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_result(out, tensors, backward, "stack")


# ---------------------------------------------------------------- pooling


def global_avg_pool(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C] channel means."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [N,C,H,W], got {x.shape}")
    return mean(x, axis=(2, 3))


def max_pool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    """Max pooling with a k x k window and no padding."""
    stride = stride or k
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects [N,C,H,W], got {x.shape}")
    N, C, H, W = x.shape
    if H < k or W < k:
        raise ShapeError(f"max_pool2d window {k} larger than input {H}x{W}")
    Ho, Wo = (H - k) // stride + 1, (W - k) // stride + 1
    win = np.empty((N, C, k * k, Ho, Wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            win[:, :, i * k + j] = x.data[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
    arg = win.argmax(axis=2)
    out = np.take_along_axis(win, arg[:, :, None], axis=2)[:, :, 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        for i in range(k):
            for j in range(k):
                gx[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += g * (arg == i * k + j)
        return (gx,)

    return make_result(out, (x,), backward, "max_pool2d")


def group_norm(x: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Normalise each sample's channel groups to zero mean, unit variance (no affine part)."""
    if x.ndim != 4:
        raise ShapeError(f"group_norm expects [N,C,H,W], got {x.shape}")
    N, C, H, W = x.shape
    if groups < 1 or C % groups:
        raise ShapeError(f"group_norm: {C} channels not divisible into {groups} groups")
    xg = x.data.reshape(N, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(xg.var(axis=2, keepdims=True) + eps)
    xhat = (xg - mu) * inv

    def backward(g):
        gg = g.reshape(N, groups, -1)
        gx = inv * (gg - gg.mean(axis=2, keepdims=True) - xhat * (gg * xhat).mean(axis=2, keepdims=True))
        return (gx.reshape(x.shape).astype(x.dtype, copy=False),)

    return make_result(xhat.reshape(x.shape).astype(x.dtype, copy=False), (x,), backward, "group_norm")


def _upsample_matrix(n: int, dtype) -> np.ndarray:
    # half-pixel centres, edge-clamped: the usual align_corners=False rule
    m = np.zeros((2 * n, n), dtype=dtype)
    for i in range(2 * n):
        src = (i + 0.5) / 2.0 - 0.5
        if src < 0.0:
            src = 0.0
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m


def upsample2x_bilinear(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"upsample2x_bilinear expects [N,C,H,W], got {x.shape}")
    ah = _upsample_matrix(x.shape[2], x.dtype)
    aw = _upsample_matrix(x.shape[3], x.dtype)
    out = np.einsum("ih,nchw,jw->ncij", ah, x.data, aw, optimize=True)

    def backward(g):
        return (np.einsum("ih,ncij,jw->nchw", ah, g, aw, optimize=True),)

    return make_result(out, (x,), backward, "upsample2x_bilinear")


# ---------------------------------------------------------------- convolution


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    N, C = xp.shape[:2]
    cols = np.empty((N, C, kh * kw, Ho, Wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i * kw + j] = xp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
    return cols


def _col2im(dcols: np.ndarray, padded_shape: tuple, kh: int, kw: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    dxp = np.zeros(padded_shape, dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[:, :, i * kw + j]
    return dxp


def _grouped_matmul(cols: np.ndarray, w: np.ndarray, groups: int):
    """cols [N, C, K, Ho, Wo] x weight [Co, C/g, kh, kw] -> ([N, Co, Ho, Wo], reshaped views)."""
    N, C, K, Ho, Wo = cols.shape
    Co = w.shape[0]
    cg = cols.reshape(N, groups, (C // groups) * K, Ho * Wo)
    wg = w.reshape(groups, Co // groups, (C // groups) * K)
    out = np.matmul(wg[None], cg).reshape(N, Co, Ho, Wo)
    return out, cg, wg


def _grouped_matmul_backward(g: np.ndarray, cg: np.ndarray, wg: np.ndarray, cols_shape: tuple, w_shape: tuple):
    N, Co, Ho, Wo = g.shape
    groups = wg.shape[0]
    gg = g.reshape(N, groups, Co // groups, Ho * Wo)
    dw = np.matmul(gg, np.swapaxes(cg, -1, -2)).sum(axis=0).reshape(w_shape)
    dcols = np.matmul(np.swapaxes(wg, -1, -2)[None], gg).reshape(cols_shape)
    return dw, dcols


def _check_conv(x: Tensor, weight: Tensor, bias, stride: int, pad: int, groups: int, op: str):
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"{op}: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    if stride < 1 or pad < 0 or groups < 1:
        raise ShapeError(f"{op}: invalid stride={stride} pad={pad} groups={groups}")
    C, Co = x.shape[1], weight.shape[0]
    if C % groups or Co % groups:
        raise ShapeError(f"{op}: channels ({C} in, {Co} out) not divisible by groups={groups}")
    if weight.shape[1] != C // groups:
        raise ShapeError(f"{op}: weight expects {weight.shape[1] * groups} input channels, input has {C}")
    if bias is not None and bias.shape != (Co,):
        raise ShapeError(f"{op}: bias shape {bias.shape} != ({Co},)")
    kh, kw = weight.shape[2:]
    Ho, Wo = _out_size(x.shape[2], kh, stride, pad), _out_size(x.shape[3], kw, stride, pad)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"{op}: kernel {kh}x{kw} does not fit input {x.shape[2:]} with pad {pad}")
    return kh, kw, Ho, Wo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding and channel groups."""
    kh, kw, Ho, Wo = _check_conv(x, weight, bias, stride, pad, groups, "conv2d")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, Ho, Wo)
    out, cg, wg = _grouped_matmul(cols, weight.data, groups)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        dw, dcols = _grouped_matmul_backward(g, cg, wg, cols.shape, weight.shape)
        dxp = _col2im(dcols, xp.shape, kh, kw, stride, Ho, Wo)
        dx = dxp[:, :, pad : pad + x.shape[2], pad : pad + x.shape[3]] if pad else dxp
        db = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (dx, dw, db) if bias is not None else (dx, dw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(out, parents, backward, "conv2d")


def _bilinear_corners(py: np.ndarray, px: np.ndarray, H: int, W: int):
    """Yield (flat index, validity, weight, dweight/dy, dweight/dx) for the four neighbours."""
    y0 = np.floor(py)
    x0 = np.floor(px)
    ay = py - y0
    ax = px - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yc, xc = y0 + dy, x0 + dx
        wy = ay if dy else 1.0 - ay
        wx = ax if dx else 1.0 - ax
        sy = 1.0 if dy else -1.0
        sx = 1.0 if dx else -1.0
        valid = (yc >= 0) & (yc < H) & (xc >= 0) & (xc < W)
        flat = np.where(valid, yc * W + xc, 0)
        yield flat, valid, wy * wx, sy * wx, sx * wy


def _deform_sample(x: np.ndarray, offset: np.ndarray, kh: int, kw: int, stride: int, pad: int, Ho: int, Wo: int):
    """Sample x at the deformed tap positions.

    Offsets are laid out [N, 2*kh*kw, Ho, Wo] with channel 2k = dx and
    2k+1 = dy for tap k (row-major over the kernel). Neighbours outside the
    map contribute zero.
    """
    N, C, H, W = x.shape
    K = kh * kw
    off = offset.reshape(N, K, 2, Ho, Wo)
    ky, kx = np.divmod(np.arange(K), kw)
    base_y = (np.arange(Ho) * stride - pad)[None, None, :, None] + ky[None, :, None, None]
    base_x = (np.arange(Wo) * stride - pad)[None, None, None, :] + kx[None, :, None, None]
    py = base_y + off[:, :, 1]
    px = base_x + off[:, :, 0]
    xf = x.reshape(N, C, H * W)
    cols = np.zeros((N, C, K * Ho * Wo), dtype=x.dtype)
    corners = []
    for flat, valid, w, dwdy, dwdx in _bilinear_corners(py, px, H, W):
        flat = flat.reshape(N, 1, -1)
        vals = np.take_along_axis(xf, flat, axis=2)
        wv = (w * valid).reshape(N, 1, -1).astype(x.dtype)
        cols += vals * wv
        corners.append((flat, valid.reshape(N, 1, -1), wv, dwdy.reshape(N, 1, -1), dwdx.reshape(N, 1, -1), vals))
    return cols.reshape(N, C, K, Ho, Wo), corners


def _deform_sample_backward(dcols: np.ndarray, corners, x_shape: tuple, dtype):
    N, C, K, Ho, Wo = dcols.shape
    H, W = x_shape[2:]
    dflat = dcols.reshape(N, C, -1)
    dxf = np.zeros((N, C, H * W), dtype=dtype)
    dpy = np.zeros((N, K * Ho * Wo), dtype=dtype)
    dpx = np.zeros((N, K * Ho * Wo), dtype=dtype)
    for flat, valid, wv, dwdy, dwdx, vals in corners:
        contrib = dflat * wv
        for n in range(N):
            np.add.at(dxf[n].T, flat[n, 0], contrib[n].T)
        s = (dflat * vals).sum(axis=1, keepdims=True) * valid
        dpy += (s * dwdy)[:, 0]
        dpx += (s * dwdx)[:, 0]
    doff = np.stack([dpx.reshape(N, K, Ho, Wo), dpy.reshape(N, K, Ho, Wo)], axis=2).reshape(N, 2 * K, Ho, Wo)
    return dxf.reshape(x_shape), doff


def deform_conv2d(
    x: Tensor,
    offset: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    pad: int = 0,
    groups: int = 1,
) -> Tensor:
    """Deformable convolution: each kernel tap reads x at its grid position plus a learned offset."""
    kh, kw, Ho, Wo = _check_conv(x, weight, bias, stride, pad, groups, "deform_conv2d")
    expected = (x.shape[0], 2 * kh * kw, Ho, Wo)
    if offset.shape != expected:
        raise ShapeError(f"deform_conv2d: offset shape {offset.shape} != {expected}")
    cols, corners = _deform_sample(x.data, offset.data, kh, kw, stride, pad, Ho, Wo)
    out, cg, wg = _grouped_matmul(cols, weight.data, groups)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        dw, dcols = _grouped_matmul_backward(g, cg, wg, cols.shape, weight.shape)
        dx, doff = _deform_sample_backward(dcols, corners, x.shape, x.dtype)
        if bias is None:
            return dx, doff, dw
        return dx, doff, dw, g.sum(axis=(0, 2, 3))

    parents = (x, offset, weight) if bias is None else (x, offset, weight, bias)
    return make_result(out, parents, backward, "deform_conv2d")


def bilinear_sample(fmap: Tensor, x, y) -> Tensor:
    """Interpolate a [C, H, W] map at column x, row y; out-of-map neighbours read as zero."""
    if fmap.ndim != 3:
        raise ShapeError(f"bilinear_sample expects [C,H,W], got {fmap.shape}")
    xt, yt = _t(x, fmap), _t(y, fmap)
    C, H, W = fmap.shape
    py = np.asarray(yt.data, dtype=np.float64).reshape(1)
    px = np.asarray(xt.data, dtype=np.float64).reshape(1)
    flat_map = fmap.data.reshape(C, H * W)
    out = np.zeros(C, dtype=fmap.dtype)
    corners = list(_bilinear_corners(py, px, H, W))
    for flat, valid, w, _, _ in corners:
        if valid[0]:
            out += flat_map[:, flat[0]] * w[0]

    def backward(g):
        gmap = np.zeros_like(flat_map)
        gx = 0.0
        gy = 0.0
        for flat, valid, w, dwdy, dwdx in corners:
            if valid[0]:
                v = flat_map[:, flat[0]]
                gmap[:, flat[0]] += g * w[0]
                gy += float(g @ v) * dwdy[0]
                gx += float(g @ v) * dwdx[0]
        return (gmap.reshape(C, H, W), np.asarray(gx, dtype=xt.dtype).reshape(xt.shape),
                np.asarray(gy, dtype=yt.dtype).reshape(yt.shape))

    return make_result(out, (fmap, xt, yt), backward, "bilinear_sample")


# ---------------------------------------------------------------- operator sugar


def _install_operators() -> None:
    Tensor.__add__ = lambda a, b: add(a, b)
    Tensor.__radd__ = lambda a, b: add(b, a)
    Tensor.__sub__ = lambda a, b: sub(a, b)
    Tensor.__rsub__ = lambda a, b: sub(b, a)
    Tensor.__mul__ = lambda a, b: mul(a, b)
    Tensor.__rmul__ = lambda a, b: mul(b, a)
    Tensor.__truediv__ = lambda a, b: div(a, b)
    Tensor.__rtruediv__ = lambda a, b: div(b, a)
    Tensor.__neg__ = lambda a: neg(a)
    Tensor.__matmul__ = lambda a, b: matmul(a, b)
    Tensor.__getitem__ = lambda a, idx: getitem(a, idx)
    Tensor.sum = lambda a, axis=None, keepdims=False: sum(a, axis, keepdims)
    Tensor.mean = lambda a, axis=None, keepdims=False: mean(a, axis, keepdims)
    Tensor.reshape = lambda a, *shape: reshape(a, shape[0] if len(shape) == 1 else shape)
    Tensor.transpose = lambda a, *axes: transpose(a, axes[0] if len(axes) == 1 else axes)


_install_operators()

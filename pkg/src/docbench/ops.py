"""Neural-network operations on :class:`~docbench.tensor.Tensor`.

Spatial ops use an im2col layout so the heavy lifting lands in BLAS matmuls;
backward passes scatter-add through the same window views.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, _sigmoid

VALID = "valid"
SAME = "same"


def _check_4d(t, what):
    if t.ndim != 4:
        raise ShapeError(f"{what} must be 4-D (N,C,H,W), got shape {t.shape}")


def _pad_amounts(extent, field, stride, padding):
    """(before, after, out_extent) for one spatial dimension."""
    if padding == VALID:
        if field > extent:
            raise ShapeError(f"filter extent {field} exceeds input extent {extent}")
        return 0, 0, (extent - field) // stride + 1
    if padding == SAME:
        out = -(-extent // stride)  # ceil
        total = max((out - 1) * stride + field - extent, 0)
        return total // 2, total - total // 2, out
    raise ValueError(f"padding must be 'valid' or 'same', got {padding!r}")


def conv_output_dims(height, width, field, stride=1, padding=VALID):
    """Spatial output extents of a conv/pool layer; raises on non-positive."""
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    _, _, out_h = _pad_amounts(height, field, stride, padding)
    _, _, out_w = _pad_amounts(width, field, stride, padding)
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(
            f"conv output collapsed to {out_h}x{out_w} for input {height}x{width}, "
            f"filter {field}, stride {stride}, padding {padding}"
        )
    return out_h, out_w


def _window_view(x, field, stride, out_h, out_w):
    """Gather (N,C,F,F,Ho,Wo) windows from a padded (N,C,H,W) array."""
    n, c = x.shape[:2]
    win = np.empty((n, c, field, field, out_h, out_w), dtype=x.dtype)
    for i in range(field):
        for j in range(field):
            win[:, :, i, j] = x[:, :, i : i + stride * out_h : stride,
                                j : j + stride * out_w : stride]
    return win

def _window_scatter(shape, dwin, field, stride, out_h, out_w):
    """Adjoint of :func:`_window_view`: scatter-add windows back."""
    dx = np.zeros(shape, dtype=dwin.dtype)
    for i in range(field):
        for j in range(field):
            dx[:, :, i : i + stride * out_h : stride,
               j : j + stride * out_w : stride] += dwin[:, :, i, j]
    return dx


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: str = VALID) -> Tensor:
    """2-D cross-correlation of (N,C,H,W) input with (K,C,F,F) filters."""
    _check_4d(x, "conv2d input")
    _check_4d(w, "conv2d filters")
    n, c, h, wd = x.shape
    k, cf, fh, fw = w.shape
    if fh != fw:
        raise ShapeError(f"only square filters supported, got {fh}x{fw}")
    if cf != c:
        raise ShapeError(f"filter channels {cf} do not match input channels {c}")
    if b is not None and b.shape != (k,):
        raise ShapeError(f"bias shape {b.shape} does not match {k} filters")
    top, bottom, out_h = _pad_amounts(h, fh, stride, padding)
    left, right, out_w = _pad_amounts(wd, fw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right))) \
        if (top or bottom or left or right) else x.data
    win = _window_view(xp, fh, stride, out_h, out_w)
    cols = win.reshape(n, c * fh * fw, out_h * out_w)
    wmat = w.data.reshape(k, c * fh * fw)
    out = np.matmul(wmat, cols).reshape(n, k, out_h, out_w)
    if b is not None:
        out = out + b.data[None, :, None, None]

    parents = (x, w) if b is None else (x, w, b)

    def vjp(g):
        gmat = g.reshape(n, k, out_h * out_w)
        dw = np.einsum("nkl,ncl->kc", gmat, cols).reshape(w.shape)
        dcols = np.matmul(wmat.T, gmat)
        dwin = dcols.reshape(n, c, fh, fw, out_h, out_w)
        dxp = _window_scatter(xp.shape, dwin, fh, stride, out_h, out_w)
        dx = dxp[:, :, top : top + h, left : left + wd]
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    return Tensor.from_op("conv2d", parents, out, vjp)


def depthwise_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
                     stride: int = 1, padding: str = VALID) -> Tensor:
    """Per-channel convolution: (N,C,H,W) with one (C,1,F,F) filter plane each."""
    _check_4d(x, "depthwise input")
    _check_4d(w, "depthwise filters")
    n, c, h, wd = x.shape
    cf, one, fh, fw = w.shape
    if one != 1 or fh != fw:
        raise ShapeError(f"depthwise filters must be (C,1,F,F), got {w.shape}")
    if cf != c:
        raise ShapeError(f"one filter plane per channel required: {cf} planes, {c} channels")
    if b is not None and b.shape != (c,):
        raise ShapeError(f"bias shape {b.shape} does not match {c} channels")
    top, bottom, out_h = _pad_amounts(h, fh, stride, padding)
    left, right, out_w = _pad_amounts(wd, fw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right))) \
        if (top or bottom or left or right) else x.data
    win = _window_view(xp, fh, stride, out_h, out_w)
    out = np.einsum("ncijhw,cij->nchw", win, w.data[:, 0])
    if b is not None:
        out = out + b.data[None, :, None, None]

    parents = (x, w) if b is None else (x, w, b)

    def vjp(g):
        dw = np.einsum("ncijhw,nchw->cij", win, g)[:, None]
        dwin = np.einsum("nchw,cij->ncijhw", g, w.data[:, 0])
        dxp = _window_scatter(xp.shape, dwin, fh, stride, out_h, out_w)
        dx = dxp[:, :, top : top + h, left : left + wd]
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    return Tensor.from_op("depthwise_conv2d", parents, out, vjp)


def maxpool2d(x: Tensor, size: int, stride: int | None = None) -> Tensor:
    """Max over non-overlapping/strided P x P windows; grad to first argmax."""
    _check_4d(x, "maxpool input")
    stride = size if stride is None else stride
    n, c, h, w = x.shape
    if size > h or size > w:
        raise ShapeError(f"pool size {size} exceeds spatial extent {h}x{w}")
    out_h = (h - size) // stride + 1
    out_w = (w - size) // stride + 1
    win = _window_view(x.data, size, stride, out_h, out_w)
    flat = win.reshape(n, c, size * size, out_h, out_w)
    arg = flat.argmax(axis=2)  # first maximal position on ties
    out = np.take_along_axis(flat, arg[:, :, None], axis=2)[:, :, 0]

    def vjp(g):
        dwin = np.zeros_like(flat)
        np.put_along_axis(dwin, arg[:, :, None], g[:, :, None], axis=2)
        dwin = dwin.reshape(n, c, size, size, out_h, out_w)
        return (_window_scatter(x.shape, dwin, size, stride, out_h, out_w),)

    return Tensor.from_op("maxpool2d", (x,), out, vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C) spatial mean."""
    _check_4d(x, "global_avg_pool input")
    return x.mean(axis=(2, 3))


def swish(x: Tensor) -> Tensor:
    """x * sigmoid(x), fused."""
    s = _sigmoid(x.data)
    out = x.data * s

    def vjp(g):
        return (g * (s + x.data * s * (1.0 - s)),)

    return Tensor.from_op("swish", (x,), out, vjp)


def relu(x: Tensor) -> Tensor:
    return x.relu()


def sigmoid(x: Tensor) -> Tensor:
    return x.sigmoid()


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return Tensor.from_op("softmax", (x,), out, vjp)


def softmax_crossentropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row softmax."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (N,C), got {logits.shape}")
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    loge = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -loge[np.arange(n), labels].mean()
    probs = np.exp(loge)

    def vjp(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return (g * d / n,)

    return Tensor.from_op("softmax_crossentropy", (logits,),
                          np.asarray(loss, dtype=logits.dtype), vjp)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None = None,
            training: bool = True) -> Tensor:
    """Inverted dropout: scales kept units by 1/(1-rate); identity at eval."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    out = x.data * keep
    return Tensor.from_op("dropout", (x,), out, lambda g: (g * keep,))


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; duplicate ids accumulate gradient."""
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise ValueError(f"ids out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def vjp(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids, g)
        return (dt,)

    return Tensor.from_op("embedding", (table,), out, vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    normed = centered / (var + eps).sqrt()
    return normed * gain + bias

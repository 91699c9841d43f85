"""Layer primitives for volumetric networks.

Feature maps use the layout ``(batch, channel, depth, height, width)``.
Convolutions are cross-correlations (no kernel flip).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, make_result

LOG_CLAMP = 1e-12


def _triple(v):
    if isinstance(v, (tuple, list)):
        if len(v) != 3:
            raise ValueError(f"expected 3 values, got {v}")
        return tuple(int(x) for x in v)
    return (int(v),) * 3


# -- convolution -----------------------------------------------------------

def _chunk_len(rows):
    # keeps one column chunk around 1 MB
    return int(min(4096, max(256, (1 << 18) // max(rows, 1))))


def _conv_stride1(xp, w):
    """Stride-1 valid cross-correlation of an already padded input.

    Each kernel offset is a constant shift in the flattened padded grid, so
    the column matrix is assembled from contiguous row copies, one cache-sized
    chunk of positions at a time.  Positions whose window would run off the
    grid are computed and then discarded.
    """
    n, c, pd, ph, pw = xp.shape
    o, _, kd, kh, kw = w.shape
    od, oh, ow = pd - kd + 1, ph - kh + 1, pw - kw + 1
    vol = pd * ph * pw
    shifts = [i * ph * pw + j * pw + k for i in range(kd) for j in range(kh) for k in range(kw)]
    span = n * vol - shifts[-1]
    xf = np.ascontiguousarray(xp.transpose(1, 0, 2, 3, 4)).reshape(c, n * vol)
    w2 = w.reshape(o, -1)
    step = _chunk_len(w2.shape[1])
    col = np.empty((c, len(shifts), step), dtype=xp.dtype)
    flat = np.zeros((o, n * vol), dtype=xp.dtype)
    for a in range(0, span, step):
        b = min(a + step, span)
        cv = col[:, :, : b - a]
        for t, s in enumerate(shifts):
            cv[:, t, :] = xf[:, a + s : b + s]
        flat[:, a:b] = w2 @ cv.reshape(-1, b - a)
    y = flat.reshape(o, n, pd, ph, pw)[:, :, :od, :oh, :ow].transpose(1, 0, 2, 3, 4)
    return np.ascontiguousarray(y), (xf, shifts, span)


def _conv_stride1_backward(gy, w, xp_shape, saved, pad, need_w=True, need_x=True):
    """Gradients of :func:`_conv_stride1`; ``gx`` is returned for the unpadded input."""
    xf, shifts, span = saved
    n, c, pd, ph, pw = xp_shape
    o = w.shape[0]
    ksize = w.shape[2:]
    od, oh, ow = gy.shape[2:]
    vol = pd * ph * pw
    gw = gx = None
    if need_w:
        gflat = np.zeros((o, n * vol), dtype=gy.dtype)
        gflat.reshape(o, n, pd, ph, pw)[:, :, :od, :oh, :ow] = gy.transpose(1, 0, 2, 3, 4)
        step = _chunk_len(c * len(shifts))
        acc = np.zeros((c * len(shifts), o), dtype=np.float64)
        col = np.empty((c, len(shifts), step), dtype=gy.dtype)
        for a in range(0, span, step):
            b = min(a + step, span)
            cv = col[:, :, : b - a]
            for t, s in enumerate(shifts):
                cv[:, t, :] = xf[:, a + s : b + s]
            acc += cv.reshape(-1, b - a) @ gflat[:, a:b].T
        gw = acc.T.reshape(w.shape)
    if need_x:
        flipped = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
        if all(p <= k - 1 for p, k in zip(pad, ksize)):
            # full correlation, cropped to the unpadded input in one go
            gpad = np.pad(gy, ((0, 0), (0, 0)) + tuple((k - 1 - p, k - 1 - p) for p, k in zip(pad, ksize)))
            gx, _ = _conv_stride1(gpad, flipped)
        else:
            gpad = np.pad(gy, ((0, 0), (0, 0)) + tuple((k - 1, k - 1) for k in ksize))
            gxp, _ = _conv_stride1(gpad, flipped)
            gx = gxp[:, :, pad[0] : pd - pad[0], pad[1] : ph - pad[1], pad[2] : pw - pad[2]]
    return gw, gx


def conv3d(input, weight, bias=None, stride=1, padding=0):
    """3-D cross-correlation.

    ``weight`` has shape ``(out_channels, in_channels, kd, kh, kw)``.
    ``padding`` is an int, a triple, or ``"same"`` (stride 1, odd kernels).
    Output extent per axis is ``floor((in + 2*pad - k) / stride) + 1``.
    """
    x, w = as_tensor(input), as_tensor(weight)
    b = as_tensor(bias) if bias is not None else None
    if x.ndim != 5 or w.ndim != 5:
        raise ValueError("conv3d expects 5-D input and weight")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, weight expects {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError(f"bias shape {b.shape} != ({w.shape[0]},)")
    stride = _triple(stride)
    ksize = w.shape[2:]
    if padding == "same":
        if stride != (1, 1, 1) or any(k % 2 == 0 for k in ksize):
            raise ValueError("'same' padding needs stride 1 and odd kernels")
        padding = tuple((k - 1) // 2 for k in ksize)
    pad = _triple(padding)
    if any(s <= 0 for s in stride) or any(p < 0 for p in pad):
        raise ValueError("stride must be positive and padding non-negative")
    out_ext = tuple((i + 2 * p - k) // s + 1 for i, p, k, s in zip(x.shape[2:], pad, ksize, stride))
    if any(i + 2 * p - k < 0 for i, p, k in zip(x.shape[2:], pad, ksize)):
        raise ValueError(f"non-positive output extent for input {x.shape[2:]} and kernel {ksize}")

    xp = np.pad(x.data, ((0, 0), (0, 0)) + tuple((p, p) for p in pad)) if any(pad) else x.data
    w_data = w.data.astype(x.dtype, copy=False)
    y1, saved = _conv_stride1(xp, w_data)
    sd, sh, sw = stride
    y = y1[:, :, ::sd, ::sh, ::sw] if stride != (1, 1, 1) else y1
    if b is not None:
        y = y + b.data.astype(x.dtype).reshape(1, -1, 1, 1, 1)
    y = np.ascontiguousarray(y)
    assert y.shape[2:] == out_ext

    def _backward(g):
        if stride != (1, 1, 1):
            g1 = np.zeros(y1.shape, dtype=g.dtype)
            g1[:, :, ::sd, ::sh, ::sw] = g
        else:
            g1 = g
        gw, gx = _conv_stride1_backward(g1, w_data, xp.shape, saved, pad, w.requires_grad, x.requires_grad)
        if gx is not None:
            gx = np.ascontiguousarray(gx)
        grads = [gx, None if gw is None else gw.astype(w.dtype, copy=False)]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(b.dtype))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return make_result(y, parents, _backward, "conv3d")


def conv_transpose3d(input, weight, bias=None, stride=2):
    """Transposed 3-D convolution (adjoint of a strided ``conv3d`` w.r.t. its input).

    ``weight`` has shape ``(in_channels, out_channels, kd, kh, kw)``; output
    extent per axis is ``(in - 1) * stride + k``, i.e. ``in * stride`` for
    the U-Net configuration ``k == stride == 2``.
    """
    x, w = as_tensor(input), as_tensor(weight)
    b = as_tensor(bias) if bias is not None else None
    stride = _triple(stride)
    if any(s not in (1, 2) for s in stride):
        raise ValueError(f"unsupported stride {stride}; only 1 and 2 are implemented")
    if x.ndim != 5 or w.ndim != 5 or x.shape[1] != w.shape[0]:
        raise ValueError(f"shape mismatch: input {x.shape}, weight {w.shape}")
    n, c, d, h, wd = x.shape
    o = w.shape[1]
    kd, kh, kw = w.shape[2:]
    sd, sh, sw = stride
    out_shape = (n, o, (d - 1) * sd + kd, (h - 1) * sh + kh, (wd - 1) * sw + kw)
    offsets = [(i, j, k) for i in range(kd) for j in range(kh) for k in range(kw)]
    w_data = w.data.astype(x.dtype, copy=False)

    x2 = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3, 4)).reshape(c, -1)
    # rows ordered (out_channel, offset)
    wmat = w_data.reshape(c, o * len(offsets))
    cols = (wmat.T @ x2).reshape(o, len(offsets), n, d, h, wd)
    y = np.zeros(out_shape, dtype=x.dtype)
    for t, (i, j, k) in enumerate(offsets):
        y[:, :, i : i + sd * d : sd, j : j + sh * h : sh, k : k + sw * wd : sw] += cols[:, t].transpose(1, 0, 2, 3, 4)
    if b is not None:
        y += b.data.astype(x.dtype).reshape(1, -1, 1, 1, 1)

    def _backward(g):
        gathered = np.empty((o, len(offsets), n, d, h, wd), dtype=g.dtype)
        for t, (i, j, k) in enumerate(offsets):
            gathered[:, t] = g[:, :, i : i + sd * d : sd, j : j + sh * h : sh, k : k + sw * wd : sw].transpose(
                1, 0, 2, 3, 4
            )
        gmat = gathered.reshape(o * len(offsets), -1)
        gx = gw = None
        if x.requires_grad:
            gx = (wmat @ gmat).reshape(c, n, d, h, wd).transpose(1, 0, 2, 3, 4)
            gx = np.ascontiguousarray(gx)
        if w.requires_grad:
            gw = (x2 @ gmat.T).reshape(w.shape).astype(w.dtype, copy=False)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(b.dtype))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return make_result(y, parents, _backward, "conv_transpose3d")


# -- pooling, activation, concatenation --------------------------------------

def maxpool3d(input, window=2, stride=2):
    """Non-overlapping max pooling; odd extents are padded with -inf.

    The gradient goes to the first maximal voxel of each window in
    (depth, height, width) scan order.
    """
    x = as_tensor(input)
    if window != 2 or stride != 2:
        raise ValueError("only window=2, stride=2 pooling is implemented")
    n, c, d, h, w = x.shape
    pad = [(0, 0), (0, 0)] + [(0, s % 2) for s in (d, h, w)]
    xp = np.pad(x.data, pad, constant_values=-np.inf) if any(p[1] for p in pad) else x.data
    D, H, W = (s // 2 for s in xp.shape[2:])
    win = xp.reshape(n, c, D, 2, H, 2, W, 2).transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(n, c, D, H, W, 8)
    arg = np.argmax(win, axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def _backward(g):
        gw = np.zeros((n, c, D, H, W, 8), dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, D, H, W, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7).reshape(xp.shape)
        return (np.ascontiguousarray(gx[:, :, :d, :h, :w]),)

    return make_result(np.ascontiguousarray(y), (x,), _backward, "maxpool3d")


def relu(input):
    x = as_tensor(input)
    positive = x.data > 0
    y = np.where(positive, x.data, 0).astype(x.dtype)

    def _backward(g):
        return (g * positive,)

    return make_result(y, (x,), _backward, "relu")


def concat(tensors, axis=1):
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or any(a != b for k, (a, b) in enumerate(zip(t.shape, ref)) if k != axis):
            raise ValueError(f"cannot concatenate shapes {ref} and {t.shape} on axis {axis}")
    sizes = [t.shape[axis] for t in ts]
    y = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def _backward(g):
        index = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            out.append(np.ascontiguousarray(g[tuple(index)]))
        return out

    return make_result(y, tuple(ts), _backward, "concat")


# -- normalization ------------------------------------------------------------

@dataclass
class RunningStats:
    """Per-channel running mean / variance for batch normalization."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def create(cls, channels, momentum=0.1):
        return cls(np.zeros(channels, np.float32), np.ones(channels, np.float32), momentum)


def batchnorm3d(input, gamma, beta, running_stats, mode="train", eps=1e-5):
    """Batch normalization over (batch, depth, height, width) per channel.

    In ``"train"`` mode the batch statistics normalize the input and the
    running statistics move towards them with ``running_stats.momentum``
    (unbiased variance); ``"eval"`` uses the running statistics.
    """
    x, gamma, beta = as_tensor(input), as_tensor(gamma), as_tensor(beta)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"gamma/beta must have shape ({c},)")
    axes = (0, 2, 3, 4)
    m = x.data.size // c
    bshape = (1, c, 1, 1, 1)
    dt = x.dtype
    if mode == "train":
        if m < 2:
            raise ValueError("batch statistics need more than one value per channel")
        mean = x.data.sum(axis=axes, dtype=np.float64) / m
        xc = x.data - mean.astype(dt).reshape(bshape)
        var = (xc * xc).sum(axis=axes, dtype=np.float64) / m
        mom = running_stats.momentum
        running_stats.mean[...] = (1 - mom) * running_stats.mean + mom * mean
        running_stats.var[...] = (1 - mom) * running_stats.var + mom * var * m / (m - 1)
    elif mode == "eval":
        mean = running_stats.mean.astype(np.float64)
        var = running_stats.var.astype(np.float64)
        xc = x.data - mean.astype(dt).reshape(bshape)
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv_std = (1.0 / np.sqrt(var + eps)).astype(dt).reshape(bshape)
    xhat = xc * inv_std
    y = xhat * gamma.data.astype(dt).reshape(bshape) + beta.data.astype(dt).reshape(bshape)

    def _backward(g):
        ggamma = (g * xhat).sum(axis=axes, dtype=np.float64)
        gbeta = g.sum(axis=axes, dtype=np.float64)
        gx = None
        if x.requires_grad:
            scale = gamma.data.astype(dt).reshape(bshape) * inv_std
            if mode == "train":
                mean_g = (gbeta / m).astype(dt).reshape(bshape)
                mean_gx = (ggamma / m).astype(dt).reshape(bshape)
                gx = scale * (g - mean_g - xhat * mean_gx)
            else:
                gx = g * scale
        return gx, ggamma.astype(gamma.dtype), gbeta.astype(beta.dtype)

    return make_result(y.astype(dt, copy=False), (x, gamma, beta), _backward, "batchnorm3d")


# -- softmax and loss --------------------------------------------------------

def _log_softmax(z):
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_channel(logits):
    """Softmax across axis 1, shifted by the per-voxel maximum."""
    z = as_tensor(logits)
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def _backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return make_result(p.astype(z.dtype, copy=False), (z,), _backward, "softmax")


def weighted_cross_entropy(logits, target, class_weights, voxel_mask=None):
    """Class-weighted voxel-wise cross-entropy of ``softmax_channel(logits)``.

    ``loss = -sum_v w[t_v] * log(max(p_{t_v}(v), 1e-12)) / sum_v w[t_v]`` over
    voxels ``v`` selected by ``voxel_mask`` (all voxels when omitted).
    """
    z = as_tensor(logits)
    target = np.asarray(target)
    n, k = z.shape[:2]
    if target.shape != (n,) + z.shape[2:]:
        raise ValueError(f"target shape {target.shape} does not match logits {z.shape}")
    weights = np.asarray(class_weights, dtype=np.float64)
    if weights.shape != (k,):
        raise ValueError(f"{k} class weights expected, got {weights.shape}")
    if target.min() < 0 or target.max() >= k:
        raise ValueError("target labels outside the class range")
    mask = np.ones(target.shape, bool) if voxel_mask is None else np.asarray(voxel_mask, bool)
    if mask.shape != target.shape:
        raise ValueError(f"mask shape {mask.shape} does not match target {target.shape}")
    if not mask.any():
        raise ValueError("voxel mask is empty")

    logp = _log_softmax(z.data.astype(np.float64))
    t = target.astype(np.intp)[:, None]
    logp_t = np.take_along_axis(logp, t, axis=1)[:, 0]
    applied = weights[target] * mask
    norm = applied.sum()
    if norm <= 0:
        raise ValueError("class weights sum to zero over the masked voxels")
    clamped = logp_t < math.log(LOG_CLAMP)
    loss = -(applied * np.maximum(logp_t, math.log(LOG_CLAMP))).sum() / norm

    def _backward(g):
        coeff = np.where(clamped, 0.0, applied / norm)[:, None]
        grad = np.exp(logp)
        np.put_along_axis(grad, t, np.take_along_axis(grad, t, axis=1) - 1.0, axis=1)
        grad *= coeff * float(g)
        return (grad.astype(z.dtype),)

    return make_result(np.asarray(loss, dtype=z.dtype), (z,), _backward, "weighted_cross_entropy")


def inverse_frequency_weights(label_arrays, n_classes=5, lo=0.1, hi=10.0, masks=None):
    """``w_c = N_total / (K * N_c)`` over the given label arrays, clamped to ``[lo, hi]``."""
    counts = np.zeros(n_classes, np.float64)
    for i, labels in enumerate(label_arrays):
        labels = np.asarray(labels)
        if masks is not None:
            labels = labels[np.asarray(masks[i], bool)]
        counts += np.bincount(labels.ravel(), minlength=n_classes)[:n_classes]
    total = counts.sum()
    with np.errstate(divide="ignore"):
        w = np.where(counts > 0, total / (n_classes * np.maximum(counts, 1)), hi)
    return np.clip(w, lo, hi)

"""Numpy layers with hand-written backward passes.

Activations are kept channels-last (``[N, H, W, C]``) internally so that
the im2col matrices need no transposes; weights are stored as
``[out, in, k, k]``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def same_pad(k: int) -> tuple[int, int]:
    """Padding before/after so a stride-1 ``k``-tap convolution keeps size."""
    before = (k - 1) // 2
    return before, k - 1 - before


def _im2col(x, k, pad):
    """``[n, h, w, c]`` -> ``[n*h*w, k*k*c]`` patches, column order ``(ky, kx, c)``."""
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), pad, pad, (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # [n, h, w, c, k, k]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, k * k * c)


# samples per im2col block; keeps the patch matrix small enough to stay fast
_CHUNK_PIXELS = 1 << 15


def _chunks(n, h, w):
    step = max(1, _CHUNK_PIXELS // (h * w))
    return range(0, n, step), step


# Wide inputs are cheaper as k*k shifted matrix products than as one im2col
# product, since the patch matrix grows with k*k*c.
_SHIFT_MIN_CHANNELS = 16


def _correlate(x, wmat, k, pad):
    """Same-size correlation of ``x`` with a ``[k*k*c, o]`` weight matrix."""
    n, h, w, c = x.shape
    o = wmat.shape[1]
    dtype = np.result_type(x, wmat)
    if c >= _SHIFT_MIN_CHANNELS:
        xp = np.pad(x, ((0, 0), pad, pad, (0, 0)))
        wk = wmat.reshape(k, k, c, o)
        out = np.zeros((n, h, w, o), dtype=dtype)
        for ky in range(k):
            for kx in range(k):
                out += xp[:, ky : ky + h, kx : kx + w, :] @ wk[ky, kx]
        return out
    out = np.empty((n, h, w, o), dtype=dtype)
    starts, step = _chunks(n, h, w)
    for s in starts:
        blk = x[s : s + step]
        out[s : s + step] = (_im2col(blk, k, pad) @ wmat).reshape(blk.shape[:3] + (-1,))
    return out


def _weight_grad(x, dout, k, pad):
    """``[k*k*c, o]`` gradient of the correlation weights."""
    n, h, w, c = x.shape
    o = dout.shape[-1]
    dtype = np.result_type(dout, x)
    if c >= _SHIFT_MIN_CHANNELS:
        xp = np.pad(x, ((0, 0), pad, pad, (0, 0)))
        dw = np.zeros((k, k, c, o), dtype=dtype)
        for s in range(n):
            d2 = dout[s].reshape(-1, o)
            for ky in range(k):
                for kx in range(k):
                    patch = np.ascontiguousarray(xp[s, ky : ky + h, kx : kx + w, :])
                    dw[ky, kx] += patch.reshape(-1, c).T @ d2
        return dw.reshape(k * k * c, o)
    dw = np.zeros((k * k * c, o), dtype=dtype)
    starts, step = _chunks(n, h, w)
    for s in starts:
        cols = _im2col(x[s : s + step], k, pad)
        dw += cols.T @ dout[s : s + step].reshape(-1, o)
    return dw


def conv_forward(x, weight, bias):
    """Cross-correlation with same padding; ``x`` is ``[N, H, W, C]``."""
    o, c, k, _ = weight.shape
    wmat = weight.transpose(2, 3, 1, 0).reshape(k * k * c, o)
    out = _correlate(x, wmat, k, same_pad(k))
    out += bias
    return out


def conv_backward(dout, x, weight):
    """Gradients ``(dx, dweight, dbias)`` of ``conv_forward``.

    The input gradient is the correlation of ``dout`` with the spatially
    flipped, channel-transposed kernel, padded the opposite way round.
    """
    o, c, k, _ = weight.shape
    n, h, w, _ = x.shape
    p0, p1 = same_pad(k)
    dw = _weight_grad(x, dout, k, (p0, p1)).reshape(k, k, c, o).transpose(3, 2, 0, 1)
    db = dout.sum(axis=(0, 1, 2))
    flipped = weight[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(k * k * o, c)
    dx = _correlate(dout, flipped, k, (p1, p0))
    return dx, np.ascontiguousarray(dw), db


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(dout, y):
    return dout * (y > 0)


def maxpool_forward(x):
    """2x2 max-pool, stride 2. Returns the output and the argmax index per block."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max-pool needs even spatial dims, got {(h, w)}")
    blocks = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(n, h // 2, w // 2, c, 4)
    # ties go to the first maximal element
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool_backward(dout, idx):
    n, h2, w2, c = dout.shape
    blocks = np.zeros((n, h2, w2, c, 4), dtype=dout.dtype)
    np.put_along_axis(blocks, idx[..., None], dout[..., None], axis=-1)
    blocks = blocks.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return blocks.reshape(n, 2 * h2, 2 * w2, c)


def upsample_forward(x):
    """Nearest-neighbour 2x upsampling."""
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample_backward(dout):
    n, h, w, c = dout.shape
    return dout.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def epe_loss(pred, target, mask=None, eps=1e-8):
    """Mean smoothed endpoint error and its gradient w.r.t. ``pred``.

    ``pred`` and ``target`` are ``[N, H, W, 2]``. Each sample contributes the
    mean of ``sqrt(|pred - target|^2 + eps^2)`` over its (masked) pixels and
    the loss is the mean over samples.
    """
    diff = pred - target
    dist = np.sqrt(np.sum(diff * diff, axis=-1) + eps * eps)
    n = dist.shape[0]
    if mask is None:
        weight = np.full(dist.shape, 1.0 / dist.size, dtype=pred.dtype)
    else:
        m = np.asarray(mask, dtype=pred.dtype)
        per = m.reshape(n, -1).sum(axis=1)
        if np.any(per == 0):
            raise ValueError("empty loss mask")
        weight = m / (n * per[:, None, None])
    loss = float(np.sum(weight * dist))
    grad = (weight / dist)[..., None] * diff
    return loss, grad.astype(pred.dtype, copy=False)

"""Conv / activation / resampling primitives with hand-written backward passes.

Activations are kept channels-last, ``(batch, h, w, channels)``, so that the
im2col matrix product lands directly in the output layout. Weights use the
usual ``(out, in, k, k)`` order.
"""

import numpy as np

from .. import kernels

LEAK = 0.1


def _wmat(w):
    out_ch, in_ch, k, _ = w.shape
    # patch columns are ordered (i, j, c)
    return w.transpose(0, 2, 3, 1).reshape(out_ch, k * k * in_ch)


def conv2d(x, w, b, stride=1):
    """Zero-padded 'same' convolution (cross-correlation) with optional stride.

    Returns the output and the cache needed by :func:`conv2d_backward`.
    """
    out_ch, in_ch, k, _ = w.shape
    if x.shape[-1] != in_ch:
        raise ValueError(f"conv expects {in_ch} input channels, got {x.shape[-1]}")
    x = np.ascontiguousarray(x, dtype=np.float32)
    cols = kernels.im2col(x, k, stride)
    bsz, h, wd, _ = x.shape
    ho = (h - 1) // stride + 1
    wo = (wd - 1) // stride + 1
    y = cols @ _wmat(w).T
    y += b
    return y.reshape(bsz, ho, wo, out_ch), (cols, x.shape, stride)


def conv2d_backward(dy, cache, w):
    cols, x_shape, stride = cache
    out_ch, in_ch, k, _ = w.shape
    d2 = np.ascontiguousarray(dy, dtype=np.float32).reshape(-1, out_ch)
    dw = (d2.T @ cols).reshape(out_ch, k, k, in_ch).transpose(0, 3, 1, 2)
    db = d2.sum(axis=0)
    dcols = d2 @ _wmat(w)
    dx = kernels.col2im(dcols, *x_shape, k, stride)
    return dx, np.ascontiguousarray(dw), db


def leaky_relu(x):
    return np.where(x > 0, x, x * np.asarray(LEAK, dtype=x.dtype))


def leaky_relu_backward(dy, x):
    return np.where(x > 0, dy, dy * np.asarray(LEAK, dtype=dy.dtype))


def upsample2(x):
    """Nearest-neighbour x2 upsampling of a channels-last batch."""
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample2_backward(dy):
    b, h, w, c = dy.shape
    return dy.reshape(b, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def concat(parts):
    return np.concatenate(parts, axis=-1)


def split(dy, widths):
    out, start = [], 0
    for wdt in widths:
        out.append(dy[..., start : start + wdt])
        start += wdt
    return out

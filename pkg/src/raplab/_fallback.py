"""Pure-numpy versions of the routines in ``_kernels.pyx``.

Operation order mirrors the compiled code exactly so the two back ends agree
bit for bit; keep them in sync.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_SCAN_CHUNK_ELEMS = 1 << 22
# a step is "bad" once any value is NaN or too large to record as float32
_F32_MAX = float(np.finfo(np.float32).max)


def _recordable(a):
    return bool((np.abs(a) <= _F32_MAX).all())


def scan_scores(xs, q, out, lo, hi):
    d = xs.shape[1]
    if q.shape[0] != d:
        raise ValueError("query length does not match database row length")
    rows = max(1, _SCAN_CHUNK_ELEMS // max(d, 1))
    for a in range(lo, hi, rows):
        b = min(hi, a + rows)
        diff = np.subtract(xs[a:b], q, dtype=np.float32).astype(np.float64)
        sq = diff * diff
        # add.accumulate is strictly sequential, matching the C loop
        acc = np.add.accumulate(sq, axis=1)[:, -1]
        out[a:b] = acc / float(d)


def _lap(a):
    n = np.roll(a, 1, axis=0)
    s = np.roll(a, -1, axis=0)
    w = np.roll(a, 1, axis=1)
    e = np.roll(a, -1, axis=1)
    return (((n + s) + w) + e) - 4.0 * a


def gray_scott_run(u0, v0, du, dv, feed, kill, dt, n_steps, record_every):
    h, w = u0.shape
    n_rec = n_steps // record_every + 1
    frames = np.zeros((n_rec, 2, h, w), dtype=np.float32)
    u = np.array(u0, dtype=np.float64)
    v = np.array(v0, dtype=np.float64)
    frames[0, 0] = u
    frames[0, 1] = v
    fk = feed + kill
    for s in range(1, n_steps + 1):
        uvv = (u * v) * v
        un = u + dt * (((du * _lap(u)) - uvv) + (feed * (1.0 - u)))
        vn = v + dt * (((dv * _lap(v)) + uvv) - (fk * v))
        u, v = un, vn
        if not (_recordable(u) and _recordable(v)):
            return frames, s
        if s % record_every == 0:
            frames[s // record_every, 0] = u
            frames[s // record_every, 1] = v
    return frames, -1


def advection_diffusion_run(u0, vx, vy, kappa, dt, n_steps, record_every):
    h, w = u0.shape
    n_rec = n_steps // record_every + 1
    frames = np.zeros((n_rec, 1, h, w), dtype=np.float32)
    u = np.array(u0, dtype=np.float64)
    frames[0, 0] = u
    for s in range(1, n_steps + 1):
        if vx >= 0:
            ax = vx * (u - np.roll(u, 1, axis=1))
        else:
            ax = vx * (np.roll(u, -1, axis=1) - u)
        if vy >= 0:
            ay = vy * (u - np.roll(u, 1, axis=0))
        else:
            ay = vy * (np.roll(u, -1, axis=0) - u)
        u = u + dt * ((kappa * _lap(u)) - (ax + ay))
        if not _recordable(u):
            return frames, s
        if s % record_every == 0:
            frames[s // record_every, 0] = u
    return frames, -1


def im2col(x, k, stride):
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    bsz, ho, wo, ch = win.shape[:4]
    # column order (i, j, c)
    win = win.transpose(0, 1, 2, 4, 5, 3)
    return np.ascontiguousarray(win, dtype=np.float32).reshape(bsz * ho * wo, k * k * ch)


def col2im(cols, bsz, h, w, ch, k, stride):
    pad = k // 2
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    dcols = cols.reshape(bsz, ho, wo, k, k, ch)
    dxp = np.zeros((bsz, h + 2 * pad, w + 2 * pad, ch), dtype=np.float32)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i, j, :]
    return np.ascontiguousarray(dxp[:, pad : pad + h, pad : pad + w, :])

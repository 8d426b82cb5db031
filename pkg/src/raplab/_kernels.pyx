# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops. Every routine here has a numpy twin in ``_fallback.py``
that performs the same floating-point operations in the same order, so both
back ends return bit-identical results."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()

# a step is "bad" once any value is NaN or too large to record as float32
cdef double F32_MAX = 3.4028234663852886e38


cdef inline bint _recordable(double x) noexcept nogil:
    return fabs(x) <= F32_MAX


def scan_scores(const float[:, ::1] xs, const float[::1] q, double[::1] out,
                Py_ssize_t lo, Py_ssize_t hi):
    """Mean squared difference of rows ``lo:hi`` of ``xs`` against ``q``.

    The difference is taken in float32 and squared/accumulated left to right
    in float64.
    """
    cdef Py_ssize_t i, j, d = xs.shape[1]
    cdef float diff
    cdef double acc, dd
    if q.shape[0] != d:
        raise ValueError("query length does not match database row length")
    with nogil:
        for i in range(lo, hi):
            acc = 0.0
            for j in range(d):
                diff = xs[i, j] - q[j]
                dd = <double>diff
                acc = acc + dd * dd
            out[i] = acc / <double>d


cdef inline double _lap(double[:, ::1] a, Py_ssize_t i, Py_ssize_t j,
                        Py_ssize_t h, Py_ssize_t w) noexcept nogil:
    cdef Py_ssize_t im = i - 1 if i > 0 else h - 1
    cdef Py_ssize_t ip = i + 1 if i < h - 1 else 0
    cdef Py_ssize_t jm = j - 1 if j > 0 else w - 1
    cdef Py_ssize_t jp = j + 1 if j < w - 1 else 0
    return (((a[im, j] + a[ip, j]) + a[i, jm]) + a[i, jp]) - 4.0 * a[i, j]


def gray_scott_run(double[:, ::1] u0, double[:, ::1] v0, double du, double dv,
                   double feed, double kill, double dt, Py_ssize_t n_steps,
                   Py_ssize_t record_every):
    """Explicit Euler Gray-Scott on a periodic grid.

    Returns ``(frames, bad_step)`` where ``frames`` is float32 of shape
    ``(n_steps // record_every + 1, 2, h, w)`` and ``bad_step`` is the first
    step producing a value that is NaN or beyond float32 range, or -1.
    """
    cdef Py_ssize_t h = u0.shape[0], w = u0.shape[1]
    cdef Py_ssize_t n_rec = n_steps // record_every + 1
    frames_arr = np.zeros((n_rec, 2, h, w), dtype=np.float32)
    cdef float[:, :, :, ::1] frames = frames_arr
    cdef double[:, ::1] u = np.array(u0, dtype=np.float64, copy=True)
    cdef double[:, ::1] v = np.array(v0, dtype=np.float64, copy=True)
    cdef double[:, ::1] un = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] vn = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] tmp
    cdef Py_ssize_t s, i, j, r = 0
    cdef Py_ssize_t bad = -1
    cdef double uu, vv, uvv, fk = feed + kill
    with nogil:
        for i in range(h):
            for j in range(w):
                frames[0, 0, i, j] = <float>u[i, j]
                frames[0, 1, i, j] = <float>v[i, j]
        for s in range(1, n_steps + 1):
            for i in range(h):
                for j in range(w):
                    uu = u[i, j]
                    vv = v[i, j]
                    uvv = (uu * vv) * vv
                    un[i, j] = uu + dt * (((du * _lap(u, i, j, h, w)) - uvv) + (feed * (1.0 - uu)))
                    vn[i, j] = vv + dt * (((dv * _lap(v, i, j, h, w)) + uvv) - (fk * vv))
                    if bad < 0 and not (_recordable(un[i, j]) and _recordable(vn[i, j])):
                        bad = s
            tmp = u
            u = un
            un = tmp
            tmp = v
            v = vn
            vn = tmp
            if bad >= 0:
                break
            if s % record_every == 0:
                r = s // record_every
                for i in range(h):
                    for j in range(w):
                        frames[r, 0, i, j] = <float>u[i, j]
                        frames[r, 1, i, j] = <float>v[i, j]
    return frames_arr, bad


def advection_diffusion_run(double[:, ::1] u0, double vx, double vy, double kappa,
                            double dt, Py_ssize_t n_steps, Py_ssize_t record_every):
    """Upwind advection plus 5-point diffusion on a periodic grid, explicit Euler."""
    cdef Py_ssize_t h = u0.shape[0], w = u0.shape[1]
    cdef Py_ssize_t n_rec = n_steps // record_every + 1
    frames_arr = np.zeros((n_rec, 1, h, w), dtype=np.float32)
    cdef float[:, :, :, ::1] frames = frames_arr
    cdef double[:, ::1] u = np.array(u0, dtype=np.float64, copy=True)
    cdef double[:, ::1] un = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] tmp
    cdef Py_ssize_t s, i, j, im, ip, jm, jp
    cdef Py_ssize_t bad = -1
    cdef double uu, ax, ay
    with nogil:
        for i in range(h):
            for j in range(w):
                frames[0, 0, i, j] = <float>u[i, j]
        for s in range(1, n_steps + 1):
            for i in range(h):
                im = i - 1 if i > 0 else h - 1
                ip = i + 1 if i < h - 1 else 0
                for j in range(w):
                    jm = j - 1 if j > 0 else w - 1
                    jp = j + 1 if j < w - 1 else 0
                    uu = u[i, j]
                    if vx >= 0:
                        ax = vx * (uu - u[i, jm])
                    else:
                        ax = vx * (u[i, jp] - uu)
                    if vy >= 0:
                        ay = vy * (uu - u[im, j])
                    else:
                        ay = vy * (u[ip, j] - uu)
                    un[i, j] = uu + dt * ((kappa * _lap(u, i, j, h, w)) - (ax + ay))
                    if bad < 0 and not _recordable(un[i, j]):
                        bad = s
            tmp = u
            u = un
            un = tmp
            if bad >= 0:
                break
            if s % record_every == 0:
                for i in range(h):
                    for j in range(w):
                        frames[s // record_every, 0, i, j] = <float>u[i, j]
    return frames_arr, bad


def im2col(const float[:, :, :, ::1] x, Py_ssize_t k, Py_ssize_t stride):
    """Channels-last zero-padded ('same') patch matrix.

    Row ``(b, oy, ox)``, column ``(i, j, c)`` holds ``x[b, oy*stride+i-p, ox*stride+j-p, c]``.
    """
    cdef Py_ssize_t bsz = x.shape[0], h = x.shape[1], w = x.shape[2], ch = x.shape[3]
    cdef Py_ssize_t pad = k // 2
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    out_arr = np.empty((bsz * ho * wo, k * k * ch), dtype=np.float32)
    cdef float[:, ::1] out = out_arr
    cdef Py_ssize_t b, oy, ox, c, i, j, yy, xx, row, col
    with nogil:
        for b in range(bsz):
            for oy in range(ho):
                for ox in range(wo):
                    row = (b * ho + oy) * wo + ox
                    col = 0
                    for i in range(k):
                        yy = oy * stride + i - pad
                        for j in range(k):
                            xx = ox * stride + j - pad
                            if 0 <= yy < h and 0 <= xx < w:
                                for c in range(ch):
                                    out[row, col + c] = x[b, yy, xx, c]
                            else:
                                for c in range(ch):
                                    out[row, col + c] = 0.0
                            col = col + ch
    return out_arr


def col2im(const float[:, ::1] cols, Py_ssize_t bsz, Py_ssize_t h, Py_ssize_t w,
           Py_ssize_t ch, Py_ssize_t k, Py_ssize_t stride):
    """Adjoint of :func:`im2col`: scatter-add patch gradients back onto the input grid.

    Taps are accumulated in (i, j) order into a zero buffer, as the numpy twin does.
    """
    cdef Py_ssize_t pad = k // 2
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    out_arr = np.zeros((bsz, h, w, ch), dtype=np.float32)
    cdef float[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, oy, ox, c, i, j, yy, xx, row, col
    with nogil:
        for i in range(k):
            for j in range(k):
                col = (i * k + j) * ch
                for b in range(bsz):
                    for oy in range(ho):
                        yy = oy * stride + i - pad
                        if yy < 0 or yy >= h:
                            continue
                        for ox in range(wo):
                            xx = ox * stride + j - pad
                            if xx < 0 or xx >= w:
                                continue
                            row = (b * ho + oy) * wo + ox
                            for c in range(ch):
                                out[b, yy, xx, c] = out[b, yy, xx, c] + cols[row, col + c]
    return out_arr

# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: convolution patch gather/scatter and the exact EDT.

Accumulation order in ``col2im`` matches the numpy fallback so both
backends produce bit-identical results.
"""

import numpy as np

from libc.math cimport INFINITY

ctypedef fused real_t:
    float
    double


cdef inline Py_ssize_t _ceil_div(Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    # C division truncates; keep both operands non-negative
    if a >= 0:
        return (a + b - 1) // b
    return -((-a) // b)


cdef inline void _valid_range(Py_ssize_t kj, Py_ssize_t pad, Py_ssize_t stride, Py_ssize_t w,
                              Py_ssize_t wo, Py_ssize_t* lo, Py_ssize_t* hi) noexcept nogil:
    # output columns oj whose input column oj*stride + kj - pad lies in [0, w)
    lo[0] = _ceil_div(pad - kj, stride)
    if lo[0] < 0:
        lo[0] = 0
    hi[0] = _ceil_div(w + pad - kj, stride)
    if hi[0] > wo:
        hi[0] = wo
    if hi[0] < lo[0]:
        hi[0] = lo[0]


def _im2col_impl(const real_t[:, :, :, ::1] x, double[:, ::1] cols,
                 int k, int stride, int pad, int ho, int wo):
    cdef Py_ssize_t n_batch = x.shape[0], chans = x.shape[1]
    cdef Py_ssize_t h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t n, c, oi, oj, ki, kj, row, base, ii, off, lo, hi
    with nogil:
        for c in range(chans):
            for ki in range(k):
                for kj in range(k):
                    row = (c * k + ki) * k + kj
                    _valid_range(kj, pad, stride, w, wo, &lo, &hi)
                    off = kj - pad
                    for n in range(n_batch):
                        for oi in range(ho):
                            base = (n * ho + oi) * wo
                            ii = oi * stride + ki - pad
                            if ii < 0 or ii >= h:
                                for oj in range(wo):
                                    cols[row, base + oj] = 0.0
                                continue
                            for oj in range(lo):
                                cols[row, base + oj] = 0.0
                            for oj in range(lo, hi):
                                cols[row, base + oj] = x[n, c, ii, oj * stride + off]
                            for oj in range(hi, wo):
                                cols[row, base + oj] = 0.0


def im2col(x, int k, int stride, int pad):
    """Patch matrix of shape (C*k*k, N*Ho*Wo), float64."""
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    cols = np.empty((c * k * k, n * ho * wo), dtype=np.float64)
    if x.dtype != np.float32:
        x = x.astype(np.float64, copy=False)
    _im2col_impl(x, cols, k, stride, pad, ho, wo)
    return cols


def col2im(cols, tuple x_shape, int k, int stride, int pad):
    """Adjoint of ``im2col``: scatter-add a (C*k*k, N*Ho*Wo) matrix back to [N,C,H,W]."""
    cdef double[:, ::1] cv = np.ascontiguousarray(cols, dtype=np.float64)
    cdef Py_ssize_t n_batch = x_shape[0], chans = x_shape[1]
    cdef Py_ssize_t h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    out = np.zeros((n_batch, chans, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] o = out
    cdef Py_ssize_t n, c, oi, oj, ki, kj, row, base, ii, off, lo, hi
    with nogil:
        for ki in range(k):
            for kj in range(k):
                _valid_range(kj, pad, stride, w, wo, &lo, &hi)
                off = kj - pad
                for c in range(chans):
                    row = (c * k + ki) * k + kj
                    for n in range(n_batch):
                        for oi in range(ho):
                            ii = oi * stride + ki - pad
                            if ii < 0 or ii >= h:
                                continue
                            base = (n * ho + oi) * wo
                            for oj in range(lo, hi):
                                o[n, c, ii, oj * stride + off] += cv[row, base + oj]
    return out


cdef inline double _intersect(double* f, Py_ssize_t step, double s2,
                              Py_ssize_t q, Py_ssize_t r) noexcept nogil:
    return ((f[q * step] + s2 * q * q) - (f[r * step] + s2 * r * r)) / (2.0 * s2 * (q - r))


cdef void _envelope_1d(double* f, Py_ssize_t n, Py_ssize_t step, double s2,
                       double* d, Py_ssize_t* v, double* z) noexcept nogil:
    # Lower envelope of parabolas f[q] + s2 * (p - q)^2, in place along a strided line.
    cdef Py_ssize_t q, kk = 0, p
    cdef double sq, val
    cdef bint found = False
    for q in range(n):
        if f[q * step] == INFINITY:
            continue
        if not found:
            v[0] = q
            z[0] = -INFINITY
            z[1] = INFINITY
            found = True
            continue
        sq = _intersect(f, step, s2, q, v[kk])
        while sq <= z[kk]:
            kk -= 1
            sq = _intersect(f, step, s2, q, v[kk])
        kk += 1
        v[kk] = q
        z[kk] = sq
        z[kk + 1] = INFINITY
    if not found:
        return
    kk = 0
    for p in range(n):
        while z[kk + 1] < p:
            kk += 1
        val = <double>(p - v[kk])
        d[p] = f[v[kk] * step] + s2 * (val * val)
    for p in range(n):
        f[p * step] = d[p]


def edt_sq(mask, spacing):
    """Squared Euclidean distance (in spacing units) to the nearest True voxel."""
    m = np.ascontiguousarray(mask, dtype=bool)
    if m.ndim != 3:
        raise ValueError("edt_sq expects a 3D mask")
    out = np.where(m, 0.0, np.inf)
    cdef double[:, :, ::1] f = out
    cdef Py_ssize_t nz = f.shape[0], ny = f.shape[1], nx = f.shape[2]
    cdef Py_ssize_t longest = max(nz, ny, nx)
    cdef double[::1] dbuf = np.empty(longest, dtype=np.float64)
    cdef double[::1] zbuf = np.empty(longest + 1, dtype=np.float64)
    cdef Py_ssize_t[::1] vbuf = np.empty(longest, dtype=np.intp)
    cdef double sz = spacing[0], sy = spacing[1], sx = spacing[2]
    cdef Py_ssize_t a, b
    with nogil:
        for a in range(nz):
            for b in range(ny):
                _envelope_1d(&f[a, b, 0], nx, 1, sx * sx, &dbuf[0], &vbuf[0], &zbuf[0])
        for a in range(nz):
            for b in range(nx):
                _envelope_1d(&f[a, 0, b], ny, nx, sy * sy, &dbuf[0], &vbuf[0], &zbuf[0])
        for a in range(ny):
            for b in range(nx):
                _envelope_1d(&f[0, a, b], nz, ny * nx, sz * sz, &dbuf[0], &vbuf[0], &zbuf[0])
    return out

"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, k, stride, pad):
    """Patch matrix of shape (C*k*k, N*Ho*Wo), float64."""
    n, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * ho * wo)
    return cols.astype(np.float64)


def col2im(cols, x_shape, k, stride, pad):
    n, c, h, w = x_shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    patches = np.asarray(cols, dtype=np.float64).reshape(c, k, k, n, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += patches[:, ki, kj].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out[:, :, pad:pad + h, pad:pad + w])


def _min_plus_axis(f, axis, s2):
    # f[..., p] <- min_q f[..., q] + s2 * (p - q)^2, by brute force over q
    f = np.moveaxis(f, axis, -1)
    n = f.shape[-1]
    idx = np.arange(n, dtype=np.float64)
    diff = idx[:, None] - idx[None, :]
    cand = f[..., None, :] + s2 * (diff * diff)
    return np.moveaxis(cand.min(axis=-1), -1, axis)


def edt_sq(mask, spacing):
    """Squared Euclidean distance (in spacing units) to the nearest True voxel."""
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 3:
        raise ValueError("edt_sq expects a 3D mask")
    f = np.where(m, 0.0, np.inf)
    for axis in (2, 1, 0):
        f = _min_plus_axis(f, axis, float(spacing[axis]) ** 2)
    return np.ascontiguousarray(f)

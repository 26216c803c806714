"""Pure numpy im2col / col2im kernels (fallback for the compiled extension).

Column layout: ``cols[n, o0, .., o_{k-1}, c, k0, .., k_{k-1}]`` flattened to
``(N * prod(out), C * prod(kernel))``; inputs are already padded.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _out_extent(size, k, s):
    return (size - k) // s + 1


def im2col2d(x, kh, kw, sh, sw):
    n, c, h, w = x.shape
    oh, ow = _out_extent(h, kh, sh), _out_extent(w, kw, sw)
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :oh, :ow]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)


def col2im2d(cols, n, c, h, w, kh, kw, sh, sw):
    oh, ow = _out_extent(h, kh, sh), _out_extent(w, kw, sw)
    cols = cols.reshape(n, oh, ow, c, kh, kw)
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


def im2col3d(x, kd, kh, kw, sd, sh, sw):
    n, c, d, h, w = x.shape
    od, oh, ow = _out_extent(d, kd, sd), _out_extent(h, kh, sh), _out_extent(w, kw, sw)
    win = sliding_window_view(x, (kd, kh, kw), axis=(2, 3, 4))
    win = win[:, :, ::sd, ::sh, ::sw][:, :, :od, :oh, :ow]
    win = win.transpose(0, 2, 3, 4, 1, 5, 6, 7)
    return np.ascontiguousarray(win).reshape(n * od * oh * ow, c * kd * kh * kw)


def col2im3d(cols, n, c, d, h, w, kd, kh, kw, sd, sh, sw):
    od, oh, ow = _out_extent(d, kd, sd), _out_extent(h, kh, sh), _out_extent(w, kw, sw)
    cols = cols.reshape(n, od, oh, ow, c, kd, kh, kw)
    out = np.zeros((n, c, d, h, w), dtype=cols.dtype)
    for a in range(kd):
        for i in range(kh):
            for j in range(kw):
                out[:, :, a:a + sd * od:sd, i:i + sh * oh:sh, j:j + sw * ow:sw] += (
                    cols[:, :, :, :, :, a, i, j].transpose(0, 4, 1, 2, 3)
                )
    return out

"""Convolution lowering kernels, compiled when available.

The Cython extension ``_ckernels`` is used if it was built; otherwise the
numpy implementation in ``_pykernels`` is used. Set ``SLICE25D_PURE_PYTHON=1``
to force the fallback.
"""
import os

import numpy as np

from . import _pykernels

try:
    if os.environ.get("SLICE25D_PURE_PYTHON"):
        raise ImportError("pure-python kernels requested")
    from . import _ckernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"


def get_backend(name=None):
    """Return the kernel module for ``name`` ('cython' or 'python'); default is the active one."""
    if name is None:
        return _impl
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


def im2col2d(x, kh, kw, sh, sw):
    return _impl.im2col2d(np.ascontiguousarray(x), kh, kw, sh, sw)


def col2im2d(cols, shape, kh, kw, sh, sw):
    n, c, h, w = shape
    return _impl.col2im2d(np.ascontiguousarray(cols), n, c, h, w, kh, kw, sh, sw)


def im2col3d(x, kd, kh, kw, sd, sh, sw):
    return _impl.im2col3d(np.ascontiguousarray(x), kd, kh, kw, sd, sh, sw)


def col2im3d(cols, shape, kd, kh, kw, sd, sh, sw):
    n, c, d, h, w = shape
    return _impl.col2im3d(np.ascontiguousarray(cols), n, c, d, h, w, kd, kh, kw, sd, sh, sw)

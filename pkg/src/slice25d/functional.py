"""Differentiable neural-network primitives built on :mod:`slice25d.tensor`."""
import numpy as np

from . import kernels
from .tensor import Tensor, log_softmax, make_result, no_grad, sqrt


def _tuple(v, n):
    if isinstance(v, (tuple, list)):
        if len(v) != n:
            raise ValueError(f"expected {n} values, got {v}")
        return tuple(int(i) for i in v)
    return (int(v),) * n


def _out_extents(spatial, kernel, stride, padding):
    out = tuple((n + 2 * p - k) // s + 1 for n, k, s, p in zip(spatial, kernel, stride, padding))
    if any(o <= 0 for o in out):
        raise ValueError(
            f"non-positive output extent {out} for input {spatial}, kernel {kernel}, "
            f"stride {stride}, padding {padding}"
        )
    return out


def _conv(x, weight, bias, stride, padding, nd):
    if x.ndim != nd + 2:
        raise ValueError(f"conv{nd}d expects a rank-{nd + 2} input, got shape {x.shape}")
    n, c = x.shape[:2]
    o, wc = weight.shape[:2]
    if c != wc:
        raise ValueError(f"conv{nd}d: input has {c} channels, weight expects {wc}")
    kernel = weight.shape[2:]
    stride = _tuple(stride, nd)
    padding = _tuple(padding, nd)
    if any(p < 0 for p in padding):
        raise ValueError(f"negative padding {padding}")
    out_sp = _out_extents(x.shape[2:], kernel, stride, padding)

    widths = ((0, 0), (0, 0)) + tuple((p, p) for p in padding)
    xp = np.pad(x.data, widths) if any(padding) else x.data
    if nd == 2:
        cols = kernels.im2col2d(xp, *kernel, *stride)
    else:
        cols = kernels.im2col3d(xp, *kernel, *stride)
    w2 = weight.data.reshape(o, -1)
    out = cols @ w2.T
    if bias is not None:
        out += bias.data
    perm = (0, nd + 1) + tuple(range(1, nd + 1))
    out = np.ascontiguousarray(out.reshape((n,) + out_sp + (o,)).transpose(perm))
    inv = (0,) + tuple(range(2, nd + 2)) + (1,)
    crop = (slice(None), slice(None)) + tuple(slice(p, p + s) for p, s in zip(padding, x.shape[2:]))

    def bw(g):
        g2 = g.transpose(inv).reshape(-1, o)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = g2 @ w2
            if nd == 2:
                gxp = kernels.col2im2d(dcols, xp.shape, *kernel, *stride)
            else:
                gxp = kernels.col2im3d(dcols, xp.shape, *kernel, *stride)
            gx = np.ascontiguousarray(gxp[crop])
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, bw, f"conv{nd}d")


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2D convolution (cross-correlation) of ``[N, C, H, W]`` with ``[O, C, kh, kw]``."""
    return _conv(x, weight, bias, stride, padding, 2)


def conv3d(x, weight, bias=None, stride=1, padding=0):
    """3D convolution of ``[N, C, D, H, W]`` with ``[O, C, kd, kh, kw]``."""
    return _conv(x, weight, bias, stride, padding, 3)


def max_pool(x, kernel_size, stride=None, padding=0):
    """Max pooling over the trailing 2 or 3 spatial axes; padding never wins."""
    nd = x.ndim - 2
    if nd not in (2, 3):
        raise ValueError(f"max_pool expects rank 4 or 5, got {x.shape}")
    kernel = _tuple(kernel_size, nd)
    stride = _tuple(kernel_size if stride is None else stride, nd)
    padding = _tuple(padding, nd)
    out_sp = _out_extents(x.shape[2:], kernel, stride, padding)
    n, c = x.shape[:2]
    flat = x.data.reshape((n * c, 1) + x.shape[2:])
    widths = ((0, 0), (0, 0)) + tuple((p, p) for p in padding)
    xp = np.pad(flat, widths, constant_values=-np.inf) if any(padding) else flat
    if nd == 2:
        cols = kernels.im2col2d(xp, *kernel, *stride)
    else:
        cols = kernels.im2col3d(xp, *kernel, *stride)
    idx = cols.argmax(axis=1)
    rows = np.arange(cols.shape[0])
    out = cols[rows, idx].reshape((n, c) + out_sp)
    crop = (slice(None), slice(None)) + tuple(slice(p, p + s) for p, s in zip(padding, x.shape[2:]))

    def bw(g):
        dcols = np.zeros_like(cols)
        dcols[rows, idx] = g.reshape(-1)
        if nd == 2:
            gxp = kernels.col2im2d(dcols, xp.shape, *kernel, *stride)
        else:
            gxp = kernels.col2im3d(dcols, xp.shape, *kernel, *stride)
        return (np.ascontiguousarray(gxp[crop]).reshape(x.shape),)

    return make_result(out, (x,), bw, "max_pool")


def global_avg_pool(x):
    """Mean over all spatial axes: ``[N, C, ...] -> [N, C]``."""
    return x.mean(axis=tuple(range(2, x.ndim)))


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k}): {labels.tolist()}")
    logp = log_softmax(logits, axis=1)
    picked = logp[np.arange(b), labels]
    return -picked.mean()


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Normalize over every axis except the channel axis 1.

    In training mode batch statistics are used and the running buffers
    (plain numpy arrays) are updated in place with unbiased variance.
    """
    if x.shape[0] == 0:
        raise ValueError("batch_norm on an empty batch")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    if training:
        mean = x.mean(axis=axes, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=axes, keepdims=True)
        count = x.size // x.shape[1]
        with no_grad():
            unbiased = var.data.reshape(-1) * (count / max(count - 1, 1))
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean.data.reshape(-1)
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
        xhat = centered / sqrt(var + eps)
    else:
        mean = Tensor(running_mean.reshape(bshape).astype(x.dtype))
        inv = Tensor((1.0 / np.sqrt(running_var + eps)).reshape(bshape).astype(x.dtype))
        xhat = (x - mean) * inv
    return xhat * gamma.reshape(bshape) + beta.reshape(bshape)


def layer_norm(x, gamma, beta, eps=1e-5):
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / sqrt(var + eps) * gamma + beta

"""Parameterized layers: convolutions (2D, 3D, ACS), normalization, linear,
multihead attention and an LSTM cell."""
import math

import numpy as np

from . import functional as F
from .tensor import Tensor, concat, get_default_dtype, matmul, sigmoid, softmax, tanh


class Parameter(Tensor):
    """A trainable leaf tensor."""

    def __init__(self, data, dtype=None):
        super().__init__(np.array(data, dtype=dtype or get_default_dtype()), requires_grad=True)


class Module:
    """Container of parameters, buffers and child modules.

    Attribute order defines parameter order, which keeps checkpoints stable.
    """

    training = True

    def __init__(self):
        self._buffers = {}

    def register_buffer(self, name, value):
        self._buffers[name] = value

    def named_children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, value in self._buffers.items():
            yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self):
        yield self
        for _, child in self.named_children():
            yield from child.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        """Cast all parameters and buffers in place."""
        for m in self.modules():
            for name, value in vars(m).items():
                if isinstance(value, Parameter):
                    value.data = value.data.astype(dtype)
                    value.grad = None
            for name, buf in list(m._buffers.items()):
                m._buffers[name] = buf.astype(dtype)
        return self

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _rng(rng):
    return rng if rng is not None else np.random.default_rng(0)


def kaiming_uniform(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def orthogonal(rng, n):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


class Linear(Module):
    def __init__(self, in_features, out_features, bias=True, rng=None):
        super().__init__()
        rng = _rng(rng)
        self.weight = Parameter(kaiming_uniform(rng, (out_features, in_features), in_features))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x):
        out = matmul(x, self.weight.T)
        return out if self.bias is None else out + self.bias


class Conv2d(Module):
    """``parameter_count == c_out * c_in * k**2 (+ c_out with bias)``."""

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, bias=True, rng=None):
        super().__init__()
        if kernel_size < 1 or padding < 0 or stride < 1:
            raise ValueError(f"invalid conv geometry k={kernel_size} s={stride} p={padding}")
        rng = _rng(rng)
        k = kernel_size
        fan_in = in_channels * k * k
        self.weight = Parameter(kaiming_uniform(rng, (out_channels, in_channels, k, k), fan_in))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Conv3d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, bias=True, rng=None):
        super().__init__()
        if kernel_size < 1 or padding < 0 or stride < 1:
            raise ValueError(f"invalid conv geometry k={kernel_size} s={stride} p={padding}")
        rng = _rng(rng)
        k = kernel_size
        fan_in = in_channels * k ** 3
        self.weight = Parameter(kaiming_uniform(rng, (out_channels, in_channels, k, k, k), fan_in))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return F.conv3d(x, self.weight, self.bias, self.stride, self.padding)


def acs_split(out_channels):
    """Partition output channels over (axial, coronal, sagittal), remainders first."""
    base, rem = divmod(out_channels, 3)
    return tuple(base + (1 if i < rem else 0) for i in range(3))


class ACSConv3d(Module):
    """3D convolution from one bank of 2D kernels applied along all three axes.

    The first ``n_axial`` output channels convolve (h, w) planes, the next
    ``n_coronal`` convolve (d, w) planes and the last ``n_sagittal`` (d, h)
    planes. The parameter count equals that of the matching :class:`Conv2d`.
    """

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, bias=True,
                 axis_split=None, rng=None):
        super().__init__()
        if kernel_size < 1 or padding < 0 or stride < 1:
            raise ValueError(f"invalid conv geometry k={kernel_size} s={stride} p={padding}")
        split = tuple(axis_split) if axis_split is not None else acs_split(out_channels)
        if len(split) != 3 or sum(split) != out_channels or min(split) < 0:
            raise ValueError(f"axis_split {split} does not partition {out_channels} channels")
        rng = _rng(rng)
        k = kernel_size
        fan_in = in_channels * k * k
        self.weight = Parameter(kaiming_uniform(rng, (out_channels, in_channels, k, k), fan_in))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None
        self.stride, self.padding = stride, padding
        self.axis_split = split

    def forward(self, x):
        o, c, k, _ = self.weight.shape
        p = self.padding
        kernel_shapes = ((1, k, k), (k, 1, k), (k, k, 1))
        paddings = ((0, p, p), (p, 0, p), (p, p, 0))
        outs = []
        start = 0
        for n, kshape, pad in zip(self.axis_split, kernel_shapes, paddings):
            if n == 0:
                continue
            w = self.weight[start:start + n].reshape((n, c) + kshape)
            b = None if self.bias is None else self.bias[start:start + n]
            outs.append(F.conv3d(x, w, b, self.stride, pad))
            start += n
        shapes = {t.shape[2:] for t in outs}
        if len(shapes) > 1:
            raise ValueError(
                f"ACS axis groups disagree on output shape {sorted(shapes)}; "
                "use padding == (kernel_size - 1) // 2 with odd kernels"
            )
        return outs[0] if len(outs) == 1 else concat(outs, axis=1)


class BatchNorm(Module):
    """Batch normalization over axis 1 for inputs of any rank >= 2."""

    def __init__(self, num_features, momentum=0.1, eps=1e-5):
        super().__init__()
        self.weight = Parameter(np.ones(num_features))
        self.bias = Parameter(np.zeros(num_features))
        dtype = get_default_dtype()
        self.register_buffer("running_mean", np.zeros(num_features, dtype=dtype))
        self.register_buffer("running_var", np.ones(num_features, dtype=dtype))
        self.momentum, self.eps = momentum, eps

    def forward(self, x):
        if x.shape[1] != self.weight.shape[0]:
            raise ValueError(f"batch_norm: {x.shape[1]} channels, layer has {self.weight.shape[0]}")
        return F.batch_norm(x, self.weight, self.bias, self._buffers["running_mean"],
                            self._buffers["running_var"], self.training, self.momentum, self.eps)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x):
        return F.layer_norm(x, self.weight, self.bias, self.eps)


class MultiheadAttention(Module):
    """Scaled dot-product attention with ``n_heads`` heads and no masking or dropout.

    ``forward`` returns ``(output [b, n_q, d], weights [b, n_heads, n_q, n_k])``.
    """

    def __init__(self, d_model, n_heads, rng=None):
        super().__init__()
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        rng = _rng(rng)
        self.d_model, self.n_heads = d_model, n_heads
        self.q_proj = Linear(d_model, d_model, rng=rng)
        self.k_proj = Linear(d_model, d_model, rng=rng)
        self.v_proj = Linear(d_model, d_model, rng=rng)
        self.out_proj = Linear(d_model, d_model, rng=rng)

    def _heads(self, x):
        b, n, _ = x.shape
        return x.reshape(b, n, self.n_heads, self.d_model // self.n_heads).transpose(0, 2, 1, 3)

    def forward(self, query, key, value):
        for name, t in (("query", query), ("key", key), ("value", value)):
            if t.ndim != 3 or t.shape[-1] != self.d_model:
                raise ValueError(f"{name} shape {t.shape} incompatible with d_model={self.d_model}")
        if key.shape[1] < 1 or key.shape[:2] != value.shape[:2]:
            raise ValueError(f"key {key.shape} and value {value.shape} must share a non-empty length")
        b, n_q, _ = query.shape
        q = self._heads(self.q_proj(query))
        k = self._heads(self.k_proj(key))
        v = self._heads(self.v_proj(value))
        scale = 1.0 / math.sqrt(self.d_model // self.n_heads)
        weights = softmax(matmul(q, k.transpose(0, 1, 3, 2)) * scale, axis=-1)
        ctx = matmul(weights, v).transpose(0, 2, 1, 3).reshape(b, n_q, self.d_model)
        return self.out_proj(ctx), weights


class LSTMCell(Module):
    """Single LSTM step with gate order (input, forget, cell, output)."""

    def __init__(self, input_size, hidden_size, rng=None):
        super().__init__()
        rng = _rng(rng)
        self.hidden_size = hidden_size
        self.weight_ih = Parameter(kaiming_uniform(rng, (4 * hidden_size, input_size), input_size))
        self.weight_hh = Parameter(np.concatenate([orthogonal(rng, hidden_size) for _ in range(4)]))
        self.bias = Parameter(np.zeros(4 * hidden_size))

    def forward(self, x, state=None):
        b = x.shape[0]
        hs = self.hidden_size
        if state is None:
            zeros = Tensor(np.zeros((b, hs), dtype=x.dtype))
            state = (zeros, zeros)
        h, c = state
        gates = matmul(x, self.weight_ih.T) + matmul(h, self.weight_hh.T) + self.bias
        i = sigmoid(gates[:, :hs])
        f = sigmoid(gates[:, hs:2 * hs])
        g = tanh(gates[:, 2 * hs:3 * hs])
        o = sigmoid(gates[:, 3 * hs:])
        c = f * c + i * g
        h = o * tanh(c)
        return h, c


class MaxPool(Module):
    def __init__(self, kernel_size, stride=None, padding=0):
        super().__init__()
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding

    def forward(self, x):
        return F.max_pool(x, self.kernel_size, self.stride, self.padding)

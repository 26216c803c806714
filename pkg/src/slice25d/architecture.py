"""Model composition: slice decomposition, 2D/3D/ACS backbones, reduction heads.

A ``slice2p5d`` model cuts a ``[b, c, d, h, w]`` volume into ``d`` axial,
``h`` coronal and ``w`` sagittal planes, encodes every plane with one 2D
backbone followed by global average pooling, reduces the ``d + h + w`` slice
features to one vector and classifies it. ``conv3d`` and ``acs`` models run a
volumetric backbone instead.
"""
from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .errors import BadMagicError, DimensionOverflowError, FormatError, TruncatedFileError
from .layers import (
    ACSConv3d,
    BatchNorm,
    Conv2d,
    Conv3d,
    LayerNorm,
    Linear,
    LSTMCell,
    MaxPool,
    Module,
    MultiheadAttention,
)
from .tensor import Tensor, concat, relu

AXES = ("axial", "coronal", "sagittal")
VARIANTS = ("slice2p5d", "conv3d", "acs")
BACKBONES = ("tiny_cnn", "resnet18_shape")
REDUCTIONS = ("attention_pool", "average", "max", "lstm", "transformer")


@dataclass
class ModelSpec:
    variant: str = "slice2p5d"
    backbone: str = "tiny_cnn"
    reduction: str = "attention_pool"
    n_heads: int = 8
    n_classes: int = 2
    in_channels: int = 1
    widths: tuple = (8, 16, 32)
    kernel_size: int = 3
    stride: int = 2
    batchnorm: bool = True
    activation: bool = True
    conv_bias: bool | None = None
    feature_dim: int | None = None

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; expected one of {BACKBONES}")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"unknown reduction {self.reduction!r}; expected one of {REDUCTIONS}")
        if self.n_classes < 1 or self.in_channels < 1 or self.n_heads < 1:
            raise ValueError("n_classes, in_channels and n_heads must be positive")
        if self.backbone == "tiny_cnn" and not self.widths:
            raise ValueError("tiny_cnn needs at least one stage width")
        derived = 512 if self.backbone == "resnet18_shape" else self.widths[-1]
        if self.feature_dim is None:
            self.feature_dim = derived
        elif self.feature_dim != derived:
            raise ValueError(f"feature_dim {self.feature_dim} does not match backbone output {derived}")
        if self.variant == "slice2p5d" and self.reduction in ("attention_pool", "transformer"):
            if self.feature_dim % self.n_heads:
                raise ValueError(f"n_heads={self.n_heads} does not divide feature_dim={self.feature_dim}")

    @property
    def has_attention_map(self):
        return self.variant == "slice2p5d" and self.reduction == "attention_pool"

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelSpec keys: {sorted(unknown)}")
        return cls(**d)


def resnet18_shape_builder(variant, reduction="attention_pool", n_classes=2, in_channels=1, n_heads=8):
    """ResNet-18 topology (4 stages x 2 basic blocks, widths 64..512) for ``variant``."""
    return ModelSpec(variant=variant, backbone="resnet18_shape", reduction=reduction,
                     n_heads=n_heads, n_classes=n_classes, in_channels=in_channels,
                     widths=(64, 128, 256, 512))


# -- backbones -------------------------------------------------------------

def make_conv(kind, c_in, c_out, k, stride=1, padding=0, bias=True, rng=None):
    if kind == "2d":
        return Conv2d(c_in, c_out, k, stride, padding, bias, rng=rng)
    if kind == "3d":
        return Conv3d(c_in, c_out, k, stride, padding, bias, rng=rng)
    if kind == "acs":
        return ACSConv3d(c_in, c_out, k, stride, padding, bias, rng=rng)
    raise ValueError(f"unknown conv kind {kind!r}")


class ConvStage(Module):
    def __init__(self, kind, c_in, c_out, k, stride, bn, act, bias, rng):
        super().__init__()
        self.conv = make_conv(kind, c_in, c_out, k, stride, (k - 1) // 2, bias, rng)
        self.bn = BatchNorm(c_out) if bn else None
        self.act = act

    def forward(self, x):
        x = self.conv(x)
        if self.bn is not None:
            x = self.bn(x)
        return relu(x) if self.act else x


class TinyCNN(Module):
    """Stack of conv(stride) -> batchnorm -> ReLU stages."""

    def __init__(self, kind, in_channels, widths, kernel_size=3, stride=2, batchnorm=True,
                 activation=True, bias=None, rng=None):
        super().__init__()
        bias = not batchnorm if bias is None else bias
        chans = (in_channels,) + tuple(widths)
        self.stages = [
            ConvStage(kind, chans[i], chans[i + 1], kernel_size, stride, batchnorm, activation, bias, rng)
            for i in range(len(widths))
        ]
        self.layer_names = tuple(f"stages.{i}" for i in range(len(widths)))
        self.out_channels = chans[-1]

    def forward_features(self, x, capture=None):
        captured = {}
        for name, stage in zip(self.layer_names, self.stages):
            x = stage(x)
            if capture and name in capture:
                captured[name] = x
        return x, captured


class BasicBlock(Module):
    def __init__(self, kind, c_in, c_out, stride, rng):
        super().__init__()
        self.conv1 = make_conv(kind, c_in, c_out, 3, stride, 1, False, rng)
        self.bn1 = BatchNorm(c_out)
        self.conv2 = make_conv(kind, c_out, c_out, 3, 1, 1, False, rng)
        self.bn2 = BatchNorm(c_out)
        if stride != 1 or c_in != c_out:
            self.down_conv = make_conv(kind, c_in, c_out, 1, stride, 0, False, rng)
            self.down_bn = BatchNorm(c_out)
        else:
            self.down_conv = self.down_bn = None

    def forward(self, x):
        out = relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        short = x if self.down_conv is None else self.down_bn(self.down_conv(x))
        return relu(out + short)


class ResNet18(Module):
    def __init__(self, kind, in_channels, rng=None):
        super().__init__()
        self.stem_conv = make_conv(kind, in_channels, 64, 7, 2, 3, False, rng)
        self.stem_bn = BatchNorm(64)
        self.stem_pool = MaxPool(3, 2, 1)
        widths = (64, 128, 256, 512)
        c_in = 64
        self.layer1 = [BasicBlock(kind, c_in, 64, 1, rng), BasicBlock(kind, 64, 64, 1, rng)]
        self.layer2 = [BasicBlock(kind, 64, 128, 2, rng), BasicBlock(kind, 128, 128, 1, rng)]
        self.layer3 = [BasicBlock(kind, 128, 256, 2, rng), BasicBlock(kind, 256, 256, 1, rng)]
        self.layer4 = [BasicBlock(kind, 256, 512, 2, rng), BasicBlock(kind, 512, 512, 1, rng)]
        self.widths = widths
        self.layer_names = ("stem", "layer1", "layer2", "layer3", "layer4")
        self.out_channels = 512

    def forward_features(self, x, capture=None):
        captured = {}
        x = self.stem_pool(relu(self.stem_bn(self.stem_conv(x))))
        if capture and "stem" in capture:
            captured["stem"] = x
        for name in self.layer_names[1:]:
            for block in getattr(self, name):
                x = block(x)
            if capture and name in capture:
                captured[name] = x
        return x, captured


def build_backbone(spec, rng):
    kind = {"slice2p5d": "2d", "conv3d": "3d", "acs": "acs"}[spec.variant]
    if spec.backbone == "resnet18_shape":
        return ResNet18(kind, spec.in_channels, rng=rng)
    return TinyCNN(kind, spec.in_channels, spec.widths, spec.kernel_size, spec.stride,
                   spec.batchnorm, spec.activation, spec.conv_bias, rng=rng)


# -- slices ----------------------------------------------------------------

@dataclass
class SliceSet:
    """Slice features ``[b, n_slices, feature_dim]`` with per-slice axis and position."""

    features: Tensor
    axis_index: np.ndarray
    slice_position: np.ndarray


@dataclass
class AttentionMap:
    """Per-slice attention weights, head-averaged and per head.

    Weight arrays carry a leading batch axis unless the map was taken for a
    single sample with :meth:`sample`.
    """

    per_slice_weight: np.ndarray
    per_head_weight: np.ndarray
    axis_index: np.ndarray
    slice_position: np.ndarray
    extents: tuple = field(default=())

    @property
    def n_heads(self):
        return self.per_head_weight.shape[-2]

    @property
    def n_slices(self):
        return self.per_slice_weight.shape[-1]

    def sample(self, i):
        return AttentionMap(self.per_slice_weight[i], self.per_head_weight[i],
                            self.axis_index, self.slice_position, self.extents)

    def axis_weights(self, axis):
        """Head-averaged weights of one axis (name or index), ordered by position."""
        a = AXES.index(axis) if isinstance(axis, str) else axis
        return self.per_slice_weight[..., self.axis_index == a]


def decompose_slices(volume):
    """Cut ``[b, c, d, h, w]`` into axial, coronal and sagittal slice stacks.

    Returns ``(stacks, axis_index, slice_position)`` where ``stacks`` holds
    ``[b, d, c, h, w]``, ``[b, h, c, d, w]`` and ``[b, w, c, d, h]`` tensors.
    """
    if volume.ndim != 5:
        raise ValueError(f"expected a [b, c, d, h, w] volume, got shape {volume.shape}")
    b, c, d, h, w = volume.shape
    if min(d, h, w) < 1:
        raise ValueError(f"volume has a zero-extent axis: {volume.shape}")
    stacks = [
        volume.transpose(0, 2, 1, 3, 4),
        volume.transpose(0, 3, 1, 2, 4),
        volume.transpose(0, 4, 1, 2, 3),
    ]
    axis_index = np.repeat(np.arange(3), (d, h, w))
    slice_position = np.concatenate([np.arange(d), np.arange(h), np.arange(w)])
    return stacks, axis_index, slice_position


def extract_features(backbone, stacks, axis_index, slice_position):
    """Encode every slice with ``backbone`` + global average pooling.

    Stacks with identical in-plane shape share one backbone call (and hence
    one set of batch-norm statistics in training mode).
    """
    b = stacks[0].shape[0]
    flat = [s.reshape((b * s.shape[1],) + s.shape[2:]) for s in stacks]
    groups = {}
    for i, s in enumerate(flat):
        groups.setdefault(s.shape[1:], []).append(i)
    pooled = [None] * len(flat)
    for members in groups.values():
        batch = flat[members[0]] if len(members) == 1 else concat([flat[i] for i in members], axis=0)
        fmap, _ = backbone.forward_features(batch)
        feats = F.global_avg_pool(fmap)
        start = 0
        for i in members:
            n = flat[i].shape[0]
            pooled[i] = feats if len(members) == 1 else feats[start:start + n]
            start += n
    per_axis = [p.reshape(b, stacks[i].shape[1], -1) for i, p in enumerate(pooled)]
    features = per_axis[0] if len(per_axis) == 1 else concat(per_axis, axis=1)
    return SliceSet(features, axis_index, slice_position)


# -- reduction heads -------------------------------------------------------

class AttentionPool(Module):
    """Multihead attention queried by the mean slice feature; keys = values = slices."""

    def __init__(self, dim, n_heads, rng=None):
        super().__init__()
        self.attn = MultiheadAttention(dim, n_heads, rng=rng)

    def forward(self, feats):
        query = feats.mean(axis=1, keepdims=True)
        out, weights = self.attn(query, feats, feats)
        return out.reshape(out.shape[0], out.shape[2]), weights


class AveragePool(Module):
    def forward(self, feats):
        return feats.mean(axis=1), None


class MaxPoolHead(Module):
    def forward(self, feats):
        return feats.max(axis=1), None


class LSTMHead(Module):
    """Final hidden state after reading slices in canonical order."""

    def __init__(self, dim, rng=None):
        super().__init__()
        self.cell = LSTMCell(dim, dim, rng=rng)

    def forward(self, feats):
        state = None
        for t in range(feats.shape[1]):
            state = self.cell(feats[:, t, :], state)
        return state[0], None


class TransformerHead(Module):
    """One post-norm encoder block (MLP ratio 2), then the token mean."""

    def __init__(self, dim, n_heads, rng=None):
        super().__init__()
        self.attn = MultiheadAttention(dim, n_heads, rng=rng)
        self.norm1 = LayerNorm(dim)
        self.fc1 = Linear(dim, 2 * dim, rng=rng)
        self.fc2 = Linear(2 * dim, dim, rng=rng)
        self.norm2 = LayerNorm(dim)

    def forward(self, feats):
        attn, _ = self.attn(feats, feats, feats)
        x = self.norm1(feats + attn)
        x = self.norm2(x + self.fc2(relu(self.fc1(x))))
        return x.mean(axis=1), None


def build_reduction(spec, rng):
    dim = spec.feature_dim
    if spec.reduction == "attention_pool":
        return AttentionPool(dim, spec.n_heads, rng=rng)
    if spec.reduction == "average":
        return AveragePool()
    if spec.reduction == "max":
        return MaxPoolHead()
    if spec.reduction == "lstm":
        return LSTMHead(dim, rng=rng)
    return TransformerHead(dim, spec.n_heads, rng=rng)


def reduce_average(s):
    return s.features.mean(axis=1)


def reduce_max(s):
    return s.features.max(axis=1)


def reduce_lstm(head, s):
    return head(s.features)[0]


def reduce_transformer(head, s):
    return head(s.features)[0]


def attention_pool(head, s, extents=()):
    """Pool a :class:`SliceSet`; returns ``(pooled [b, dim], AttentionMap)``."""
    pooled, weights = head(s.features)
    per_head = weights.data[:, :, 0, :]
    amap = AttentionMap(per_head.mean(axis=1), per_head, s.axis_index, s.slice_position, extents)
    return pooled, amap


# -- model -----------------------------------------------------------------

class Model(Module):
    def __init__(self, spec, seed=0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.spec = spec
        self.backbone = build_backbone(spec, rng)
        self.reduction = build_reduction(spec, rng) if spec.variant == "slice2p5d" else None
        self.classifier = Linear(spec.feature_dim, spec.n_classes, rng=rng)

    def backbone_parameters(self):
        return self.backbone.parameters()

    def head_parameters(self):
        head = [] if self.reduction is None else self.reduction.parameters()
        return head + self.classifier.parameters()

    @property
    def layer_names(self):
        return self.backbone.layer_names

    def features(self, volume, capture=None):
        """Pooled volume feature ``[b, feature_dim]`` plus attention map and captures."""
        spec = self.spec
        if volume.ndim != 5 or volume.shape[1] != spec.in_channels:
            raise ValueError(f"expected [b, {spec.in_channels}, d, h, w] input, got {volume.shape}")
        if spec.variant == "slice2p5d":
            stacks, axis_index, positions = decompose_slices(volume)
            s = extract_features(self.backbone, stacks, axis_index, positions)
            if spec.reduction == "attention_pool":
                pooled, amap = attention_pool(self.reduction, s, tuple(volume.shape[2:]))
                return pooled, amap, {}
            pooled, _ = self.reduction(s.features)
            return pooled, None, {}
        fmap, captured = self.backbone.forward_features(volume, capture)
        return F.global_avg_pool(fmap), None, captured

    def forward(self, volume):
        """Return ``(logits [b, n_classes], AttentionMap or None)``."""
        pooled, amap, _ = self.features(volume)
        return self.classifier(pooled), amap


def build_model(spec, seed=0):
    return Model(spec, seed)


def count_parameters(model):
    """Number of trainable scalars; batch-norm running statistics are excluded."""
    return int(sum(p.size for p in model.parameters()))


# -- checkpoints -----------------------------------------------------------

CHECKPOINT_MAGIC = b"SPM1"
CHECKPOINT_VERSION = 1


def save_checkpoint(model, path):
    """Write the SPM1 checkpoint: spec JSON then every parameter and buffer as float32."""
    spec_json = json.dumps(model.spec.to_dict(), sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION),
             struct.pack("<I", len(spec_json)), spec_json]
    entries = list(model.named_parameters()) + [(n, Tensor(b)) for n, b in model.named_buffers()]
    for name, t in entries:
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def _take(buf, offset, n, what):
    if offset + n > len(buf):
        raise TruncatedFileError(f"file ends inside {what}: need {n} bytes, {len(buf) - offset} left", offset)
    return buf[offset:offset + n], offset + n


def read_checkpoint(path):
    """Parse an SPM1 file into ``(ModelSpec, {name: float32 array})``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, off = _take(buf, 0, 4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(f"bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC!r}", 0)
    raw, off = _take(buf, off, 2, "version")
    (version,) = struct.unpack("<H", raw)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", off - 2)
    raw, off = _take(buf, off, 4, "spec length")
    (n,) = struct.unpack("<I", raw)
    raw, off = _take(buf, off, n, "spec JSON")
    try:
        spec = ModelSpec.from_dict(json.loads(raw.decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"invalid spec block: {exc}", off - n) from None
    tensors = {}
    while off < len(buf):
        raw, off = _take(buf, off, 2, "name length")
        (n,) = struct.unpack("<H", raw)
        raw, off = _take(buf, off, n, "tensor name")
        name = raw.decode("utf-8")
        raw, off = _take(buf, off, 4, "rank")
        (rank,) = struct.unpack("<I", raw)
        if rank > 8:
            raise DimensionOverflowError(f"tensor {name!r} has rank {rank}", off - 4)
        raw, off = _take(buf, off, 4 * rank, "dims")
        dims = struct.unpack(f"<{rank}I", raw)
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        if count * 4 > len(buf):
            raise DimensionOverflowError(f"tensor {name!r} declares {count} elements", off - 4 * rank)
        raw, off = _take(buf, off, 4 * count, f"data of {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    return spec, tensors


def load_checkpoint(path):
    """Rebuild a model from an SPM1 checkpoint (in eval mode)."""
    spec, tensors = read_checkpoint(path)
    model = Model(spec)
    for name, p in model.named_parameters():
        if name not in tensors:
            raise FormatError(f"checkpoint lacks parameter {name!r}", -1)
        if tensors[name].shape != p.shape:
            raise FormatError(f"shape mismatch for {name!r}: {tensors[name].shape} vs {p.shape}", -1)
        p.data = tensors[name].copy()
    for m_prefix, m in _buffer_owners(model):
        for bname in list(m._buffers):
            full = m_prefix + bname
            if full not in tensors:
                raise FormatError(f"checkpoint lacks buffer {full!r}", -1)
            m._buffers[bname] = tensors[full].copy()
    return model.eval()


def _buffer_owners(module, prefix=""):
    yield prefix, module
    for name, child in module.named_children():
        yield from _buffer_owners(child, f"{prefix}{name}.")

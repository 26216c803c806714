"""Slice-attention extraction/export, HiResCam attributions, localization scores."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from .architecture import AXES
from .tensor import Tensor, backward, no_grad


class UnsupportedReductionError(ValueError):
    pass


def _batched(volume, dtype):
    arr = volume.data if isinstance(volume, Tensor) else np.asarray(volume)
    single = arr.ndim == 4
    if single:
        arr = arr[None]
    return Tensor(arr.astype(dtype, copy=False)), single


def extract_attention(model, volume):
    """Eval-mode attention map of a ``[c, d, h, w]`` (or batched) volume."""
    if not model.spec.has_attention_map:
        raise UnsupportedReductionError(
            f"model uses variant={model.spec.variant!r}, reduction={model.spec.reduction!r}; "
            "attention maps need slice2p5d + attention_pool"
        )
    model.eval()
    x, single = _batched(volume, model.classifier.weight.dtype)
    with no_grad():
        _, amap = model(x)
    return amap.sample(0) if single else amap


@dataclass
class AttributionVolume:
    values: np.ndarray
    upsampled: np.ndarray
    layer: str
    target_class: int


def _upsample_nearest(values, shape):
    idx = [np.minimum((np.arange(n) * m) // n, m - 1) for n, m in zip(shape, values.shape)]
    return values[np.ix_(*idx)]


def hirescam(model, volume, target_class, layer=None, clamp=False):
    """HiResCam map: sum over channels of activation * d(score_c)/d(activation).

    ``layer`` defaults to the last convolutional stage of the volumetric
    backbone. The map is signed unless ``clamp`` applies ReLU.
    """
    if model.spec.variant not in ("conv3d", "acs"):
        raise UnsupportedReductionError("HiResCam needs a volumetric (conv3d or acs) model")
    names = model.layer_names
    layer = names[-1] if layer is None else layer
    if layer not in names:
        raise KeyError(f"unknown layer {layer!r}; available: {names}")
    if not 0 <= target_class < model.spec.n_classes:
        raise ValueError(f"target_class {target_class} out of range")
    model.eval()
    x, _ = _batched(volume, model.classifier.weight.dtype)
    if x.shape[0] != 1:
        raise ValueError("hirescam takes a single volume")
    params = model.parameters()
    flags = [p.requires_grad for p in params]
    # a private graph from the input so the activation is on the tape
    x.requires_grad = True
    try:
        pooled, _, captured = model.features(x, capture={layer})
        act = captured[layer].retain_grad()
        score = model.classifier(pooled)[0, target_class]
        backward(score)
        grad = act.grad if act.grad is not None else np.zeros_like(act.data)
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f
            p.grad = None
    values = (act.data[0] * grad[0]).sum(axis=0)
    if clamp:
        values = np.maximum(values, 0)
    upsampled = _upsample_nearest(values, x.shape[2:])
    return AttributionVolume(values, upsampled, layer, int(target_class))


@dataclass
class LocalizationScore:
    top_k: int
    hit_rate: float
    attention_mass_on_signal: float


def localization_score(amap, signal_slices, k):
    """How much of a single-sample attention map lands on ground-truth slices."""
    signal = {(int(a), int(p)) for a, p in signal_slices}
    if not signal:
        raise ValueError("empty signal slice set")
    w = np.asarray(amap.per_slice_weight)
    if w.ndim != 1:
        raise ValueError("localization_score takes a single-sample attention map")
    if not 1 <= k <= w.size:
        raise ValueError(f"k={k} must be in [1, {w.size}]")
    keys = list(zip(amap.axis_index.tolist(), amap.slice_position.tolist()))
    on_signal = np.array([key in signal for key in keys])
    top = np.argsort(-w, kind="stable")[:k]
    return LocalizationScore(k, float(on_signal[top].mean()), float(w[on_signal].sum()))


def _pgm(path, image):
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.astype(np.uint8).tobytes())


def _normalize_rows(rows):
    peak = rows.max(axis=1, keepdims=True)
    peak[peak <= 0] = 1.0
    return np.rint(rows / peak * 255.0)


def export_attention(amap, path_prefix):
    """Write ``<prefix>.csv``, ``<prefix>_<axis>.pgm`` per axis and ``<prefix>.json``.

    PGM rows are the heads followed by the head average, each scaled so its
    maximum is 255. Returns the written paths.
    """
    if np.asarray(amap.per_slice_weight).ndim != 1:
        raise ValueError("export_attention takes a single-sample attention map")
    parent = os.path.dirname(os.path.abspath(path_prefix))
    os.makedirs(parent, exist_ok=True)
    written = []
    heads = amap.per_head_weight
    csv_path = f"{path_prefix}.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["axis", "position", "weight"] + [f"head_{h}" for h in range(heads.shape[0])])
        for i in range(amap.n_slices):
            writer.writerow([AXES[amap.axis_index[i]], int(amap.slice_position[i]),
                             repr(float(amap.per_slice_weight[i]))]
                            + [repr(float(v)) for v in heads[:, i]])
    written.append(csv_path)

    summary = {"n_slices": int(amap.n_slices), "n_heads": int(heads.shape[0]), "axes": {}}
    for a, name in enumerate(AXES):
        sel = amap.axis_index == a
        if not sel.any():
            continue
        rows = np.vstack([heads[:, sel], amap.per_slice_weight[sel][None]])
        pgm_path = f"{path_prefix}_{name}.pgm"
        _pgm(pgm_path, _normalize_rows(rows))
        written.append(pgm_path)
        weights = amap.per_slice_weight[sel]
        positions = amap.slice_position[sel]
        order = np.argsort(-weights, kind="stable")[:5]
        peak = weights.max()
        summary["axes"][name] = {
            "top5": [{"position": int(positions[j]), "weight": float(weights[j])} for j in order],
            "total_weight": float(weights.sum()),
            "normalized": [float(w / peak) if peak > 0 else 0.0 for w in weights],
        }
    json_path = f"{path_prefix}.json"
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    written.append(json_path)
    return written

import csv
import json

import numpy as np
import pytest

from slice25d.architecture import AttentionMap, Model, ModelSpec
from slice25d.interpret import (
    UnsupportedReductionError,
    export_attention,
    extract_attention,
    hirescam,
    localization_score,
)
from slice25d.tensor import Tensor


def linear_model(shape, w0, u, variant="conv3d"):
    """One bias-free 1x1x1 conv, GAP and a classifier whose weight is scaled by the voxel count.

    Then d score_c / d A = u_c / N * N = u_c and A * grad = w0 * u_c * x.
    """
    spec = ModelSpec(variant=variant, widths=(1,), kernel_size=1, stride=1, batchnorm=False,
                     activation=False, conv_bias=False, n_heads=1)
    model = Model(spec).astype(np.float64)
    model.backbone.stages[0].conv.weight.data[:] = w0
    model.classifier.weight.data[:] = np.asarray(u, dtype=np.float64).reshape(2, 1) * np.prod(shape)
    model.classifier.bias.data[:] = 0.3
    return model


@pytest.mark.parametrize("variant", ["conv3d", "acs"])
def test_hirescam_linear_model_closed_form(variant, rng):
    shape = (5, 6, 4)
    model = linear_model(shape, 0.7, [1.5, -2.0], variant)
    x = rng.standard_normal((1,) + shape)
    for c, u in enumerate([1.5, -2.0]):
        att = hirescam(model, x, c)
        np.testing.assert_allclose(att.values, 0.7 * u * x[0], atol=1e-6)
        assert att.upsampled.shape == shape
        assert att.layer == "stages.0" and att.target_class == c


def test_hirescam_clamp_and_zero_input(rng):
    model = linear_model((4, 4, 4), 1.0, [1.0, 1.0])
    x = rng.standard_normal((1, 4, 4, 4))
    att = hirescam(model, x, 0, clamp=True)
    assert att.values.min() >= 0
    assert np.all(hirescam(model, np.zeros((1, 4, 4, 4)), 1).values == 0)


def test_hirescam_shapes_and_errors(rng):
    spec = ModelSpec(variant="conv3d", widths=(4, 6))
    model = Model(spec)
    x = rng.random((1, 8, 8, 8)).astype(np.float32)
    att = hirescam(model, x, 1)
    assert att.values.shape == (2, 2, 2)
    assert att.upsampled.shape == (8, 8, 8)
    assert np.array_equal(att.upsampled[:4, :4, :4], np.full((4, 4, 4), att.values[0, 0, 0]))
    assert hirescam(model, x, 1, layer="stages.0").values.shape == (4, 4, 4)
    with pytest.raises(KeyError):
        hirescam(model, x, 1, layer="stages.9")
    with pytest.raises(UnsupportedReductionError):
        hirescam(Model(ModelSpec(widths=(4,), n_heads=2)), x, 0)
    # parameters keep their flags and carry no stray gradients
    assert all(p.requires_grad and p.grad is None for p in model.parameters())


def test_extract_attention_contract(rng):
    model = Model(ModelSpec(widths=(4, 8), n_heads=2))
    x = rng.random((1, 6, 7, 8)).astype(np.float32)
    a = extract_attention(model, x)
    b = extract_attention(model, x)
    assert a.per_slice_weight.shape == (21,)
    assert a.per_slice_weight.tobytes() == b.per_slice_weight.tobytes()
    np.testing.assert_allclose(a.per_slice_weight.sum(), 1.0, atol=1e-6)
    # same weights as a forward with gradients enabled
    _, amap = model.eval()(Tensor(x[None]))
    np.testing.assert_array_equal(amap.per_slice_weight[0], a.per_slice_weight)
    assert a.axis_weights("coronal").shape == (7,)
    const = extract_attention(model, np.full((1, 6, 6, 6), 0.4, np.float32))
    np.testing.assert_allclose(const.per_slice_weight, 1 / 18, atol=1e-6)
    with pytest.raises(UnsupportedReductionError):
        extract_attention(Model(ModelSpec(widths=(4,), reduction="average")), x)


def _map(weights, heads=None):
    w = np.asarray(weights, dtype=np.float64)
    n = len(w)
    heads = np.vstack([w, w]) if heads is None else heads
    axis = np.repeat(np.arange(3), [n // 3, n // 3, n - 2 * (n // 3)])
    pos = np.concatenate([np.arange(n // 3), np.arange(n // 3), np.arange(n - 2 * (n // 3))])
    return AttentionMap(w, heads, axis, pos, (n // 3, n // 3, n - 2 * (n // 3)))


def test_localization_score_examples():
    w = np.zeros(9)
    w[4] = 1.0  # coronal position 1
    s = localization_score(_map(w), [(1, 1), (0, 0)], 1)
    assert s.hit_rate == 1.0 and s.attention_mass_on_signal == pytest.approx(1.0)
    uniform = _map(np.full(12, 1 / 12))
    s = localization_score(uniform, [(0, 1), (0, 2), (2, 0)], 3)
    assert s.attention_mass_on_signal == pytest.approx(3 / 12)
    with pytest.raises(ValueError):
        localization_score(uniform, [(0, 1)], 13)
    with pytest.raises(ValueError):
        localization_score(uniform, [], 1)


def _read_pgm(path):
    raw = open(path, "rb").read()
    magic, dims, maxval, rest = raw.split(b"\n", 3)
    w, h = map(int, dims.split())
    assert magic == b"P5" and maxval == b"255"
    return np.frombuffer(rest, np.uint8).reshape(h, w)


def test_export_attention_files(tmp_path, rng):
    heads = rng.dirichlet(np.ones(12), size=3)
    amap = _map(heads.mean(axis=0), heads)
    paths = export_attention(amap, str(tmp_path / "out" / "att"))
    assert sorted(p.rsplit(".", 1)[1] for p in paths) == ["csv", "json", "pgm", "pgm", "pgm"]
    rows = list(csv.reader(open(tmp_path / "out" / "att.csv")))
    assert rows[0] == ["axis", "position", "weight", "head_0", "head_1", "head_2"]
    assert len(rows) == 13
    img = _read_pgm(tmp_path / "out" / "att_axial.pgm")
    assert img.shape == (4, 4)
    axial = amap.per_slice_weight[:4]
    assert img[-1, np.argmax(axial)] == 255
    summary = json.load(open(tmp_path / "out" / "att.json"))
    weights = {(r[0], int(r[1])): float(r[2]) for r in rows[1:]}
    for axis, info in summary["axes"].items():
        ranked = sorted(((w, p) for (a, p), w in weights.items() if a == axis), key=lambda t: -t[0])
        assert [t["position"] for t in info["top5"]] == [p for _, p in ranked[:5]]
        assert max(info["normalized"]) == 1.0

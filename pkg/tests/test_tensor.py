import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from slice25d.tensor import (
    Tensor,
    TapeError,
    backward,
    concat,
    elementwise,
    grad_check,
    matmul,
    no_grad,
    reduce,
    softmax,
)

from oracles import central_difference, matmul_loops

SHAPES = [(3,), (2, 4), (2, 3, 2)]


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def test_add_and_relu_examples():
    assert elementwise("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data.tolist() == [4.0, 6.0]
    assert elementwise("relu", Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4,\)"):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros(4))


def test_mul_backward_matches_finite_differences(rng):
    a0, b0 = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
    a, b = leaf(a0), leaf(b0)
    backward((a * b).sum())
    num = central_difference(lambda x: float((x * b0).sum()), a0)
    np.testing.assert_allclose(a.grad, num, rtol=1e-8, atol=1e-9)
    np.testing.assert_array_equal(a.grad, b0)


@pytest.mark.parametrize("kind", ["add", "sub", "mul", "div"])
@pytest.mark.parametrize("shape", SHAPES)
def test_binary_ops_grad_check(kind, shape, rng):
    a = leaf(rng.uniform(0.5, 2.0, shape))
    b = leaf(rng.uniform(0.5, 2.0, shape))
    w = rng.standard_normal(shape)
    assert grad_check(lambda: (elementwise(kind, a, b) * w).sum(), [a, b]) < 1e-4


@pytest.mark.parametrize("kind", ["relu", "exp", "log", "neg", "sigmoid", "tanh", "sqrt"])
@pytest.mark.parametrize("shape", SHAPES)
def test_unary_ops_grad_check(kind, shape, rng):
    x0 = rng.uniform(0.2, 2.0, shape) * rng.choice([-1, 1], shape)
    if kind in ("log", "sqrt"):
        x0 = np.abs(x0)
    x = leaf(x0)
    w = rng.standard_normal(shape)
    assert grad_check(lambda: (elementwise(kind, x) * w).sum(), [x]) < 1e-4


def test_broadcast_backward_sums_over_expanded_axes(rng):
    a = leaf(rng.standard_normal((4, 3)))
    b = leaf(rng.standard_normal((1, 3)))
    s = leaf(2.0)
    assert grad_check(lambda: ((a + b) * s).sum(), [a, b, s]) < 1e-4


def test_matmul_examples():
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert matmul(Tensor(np.eye(2)), m).data.tolist() == [[1.0, 2.0], [3.0, 4.0]]
    assert matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_equals_triple_loop(rng):
    a, b = rng.uniform(-1, 1, (4, 5)), rng.uniform(-1, 1, (5, 3))
    np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, matmul_loops(a, b), atol=1e-6)


def test_matmul_errors():
    with pytest.raises(ValueError, match="inner"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


@pytest.mark.parametrize("shapes", [((3, 4), (4, 2)), ((2, 3, 4), (1, 4, 5)), ((2, 2, 3, 2), (2, 2, 2, 3))])
def test_matmul_grad_check(shapes, rng):
    a, b = leaf(rng.standard_normal(shapes[0])), leaf(rng.standard_normal(shapes[1]))
    w = rng.standard_normal(np.broadcast_shapes(shapes[0][:-2], shapes[1][:-2]) + (shapes[0][-2], shapes[1][-1]))
    assert grad_check(lambda: (matmul(a, b) * w).sum(), [a, b]) < 1e-4


def test_softmax_examples():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(softmax(Tensor([np.log(2.0), 0.0])).data, [2 / 3, 1 / 3], atol=1e-7)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
                  elements=st.floats(-30, 30)),
       st.floats(-100, 100))
def test_softmax_sums_to_one_and_is_shift_invariant(x, c):
    out = softmax(Tensor(x), axis=-1).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(softmax(Tensor(x + c), axis=-1).data, out, atol=1e-9)


@pytest.mark.parametrize("shape,axis", [((5,), 0), ((3, 4), 1), ((2, 3, 4), 0)])
def test_softmax_grad_check(shape, axis, rng):
    x = leaf(rng.standard_normal(shape))
    w = rng.standard_normal(shape)
    assert grad_check(lambda: (softmax(x, axis) * w).sum(), [x]) < 1e-4


def test_reduce_examples():
    assert reduce("mean", Tensor([1.0, 2.0, 3.0])).item() == 2.0
    x = leaf([1.0, 3.0, 2.0])
    out = reduce("max", x)
    assert out.item() == 3.0
    backward(out)
    assert x.grad.tolist() == [0.0, 1.0, 0.0]


def test_max_backward_ties_go_to_first_index():
    x = leaf([[2.0, 5.0, 5.0], [4.0, 4.0, 1.0]])
    backward(reduce("max", x, axis=1).sum())
    assert x.grad.tolist() == [[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]


def test_sum_backward_matches_finite_differences(rng):
    x0 = rng.standard_normal((2, 4))
    w = rng.standard_normal(2)
    x = leaf(x0)
    backward((reduce("sum", x, axis=1) * w).sum())
    num = central_difference(lambda v: float((v.sum(axis=1) * w).sum()), x0)
    np.testing.assert_allclose(x.grad, num, rtol=1e-7)


@pytest.mark.parametrize("kind", ["sum", "mean", "max"])
@pytest.mark.parametrize("shape,axis", [((4,), 0), ((3, 5), 1), ((2, 3, 4), (0, 2))])
def test_reduce_grad_check(kind, shape, axis, rng):
    x = leaf(rng.standard_normal(shape))
    out_shape = np.asarray(reduce(kind, Tensor(x.data), axis).data).shape
    w = rng.standard_normal(out_shape)
    assert grad_check(lambda: (reduce(kind, x, axis) * w).sum(), [x]) < 1e-4


def test_reduce_empty_axis():
    with pytest.raises(ValueError, match="empty"):
        reduce("mean", Tensor(np.zeros((2, 0))), axis=1)


def test_linear_loss_grad_is_input(rng):
    x = rng.standard_normal(5)
    w = leaf(rng.standard_normal(5))
    backward((w * x).sum())
    np.testing.assert_array_equal(w.grad, x)


def test_two_layer_mlp_matches_finite_differences(rng):
    x = rng.standard_normal((4, 3))
    w1 = leaf(rng.standard_normal((3, 5)))
    w2 = leaf(rng.standard_normal((5, 2)))

    def loss():
        return (matmul(matmul(Tensor(x), w1).relu(), w2) ** 2).sum()

    assert grad_check(loss, [w1, w2]) < 1e-4


def test_reused_tensor_accumulates_gradient(rng):
    x0 = rng.standard_normal(4)
    x = leaf(x0)
    backward((x * x + x * 3.0).sum())
    np.testing.assert_allclose(x.grad, central_difference(lambda v: float((v * v + 3 * v).sum()), x0), rtol=1e-7)


def test_backward_contract_errors():
    x = leaf([1.0, 2.0])
    with pytest.raises(ValueError, match="scalar"):
        backward(x * 2.0)
    with pytest.raises(TapeError, match="no active tape"):
        backward(Tensor(1.0))
    loss = (x * 2.0).sum()
    backward(loss)
    with pytest.raises(TapeError, match="consumed"):
        backward(loss)


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.node_id is None


def test_tape_nodes_are_topologically_ordered():
    x = leaf([1.0])
    y = x * 2.0
    z = y + x
    assert z.node_id > y.node_id


def test_grad_check_square():
    x = leaf(3.0)
    assert grad_check(lambda: x * x, [x]) < 1e-8


def test_concat_and_getitem_grad_check(rng):
    a, b = leaf(rng.standard_normal((2, 3))), leaf(rng.standard_normal((2, 2)))
    w = rng.standard_normal((2, 5))
    assert grad_check(lambda: (concat([a, b], axis=1) * w).sum(), [a, b]) < 1e-4
    assert grad_check(lambda: (a[:, 1:] * w[:, :2]).sum() + (a[np.array([0, 0]), 2]).sum(), [a]) < 1e-4


def test_float32_is_preserved():
    x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    assert ((x * 2.0 + 1.0) / 3.0).dtype == np.float32
    assert softmax(x).dtype == np.float32

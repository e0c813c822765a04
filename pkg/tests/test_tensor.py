import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dropattention import tensor as T
from dropattention.tensor import ShapeError, Tape, Tensor

from helpers import central_diff, check_grads, param, rel_err


def test_matmul_identity_and_arithmetic():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(a, np.eye(2)).data, a.data)
    np.testing.assert_array_equal(T.matmul(a, Tensor([[5.0, 6.0], [7.0, 8.0]])).data, [[19, 22], [43, 50]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_grad_matches_finite_differences(rng):
    for _ in range(5):
        a, b = param(rng, 3, 3), param(rng, 3, 3)
        assert check_grads(lambda: T.sum(T.matmul(a, b)), [a, b]) < 1e-4


def test_batched_matmul_broadcast_grad(rng):
    a, b = param(rng, 2, 3, 4), param(rng, 4, 5)
    assert check_grads(lambda: T.sum(T.square(T.matmul(a, b))), [a, b]) < 1e-4


@pytest.mark.parametrize("row, expected", [
    ([0.0, 0.0], [0.5, 0.5]),
    ([0.0, math.log(2.0)], [1 / 3, 2 / 3]),
    # high-precision evaluation: e^i / sum e^j
    ([1.0, 2.0, 3.0], [0.0900305731704, 0.244728471055, 0.665240955775]),
])
def test_softmax_values(row, expected):
    np.testing.assert_allclose(T.softmax_rows(Tensor([row])).data[0], expected, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-30, 30)), st.floats(-50, 50))
def test_softmax_rows_stochastic_and_shift_invariant(x, c):
    y = T.softmax_rows(Tensor(x)).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(T.softmax_rows(Tensor(x + c)).data, y, atol=1e-6)


def test_softmax_mask_gives_zero_weight():
    y = T.softmax_rows(Tensor([[1.0, 2.0, 3.0]]), mask=np.array([True, True, False])).data
    assert y[0, 2] == 0.0
    np.testing.assert_allclose(y[0, :2].sum(), 1.0, atol=1e-7)


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(3)), Tensor(np.zeros(3))
    np.testing.assert_allclose(T.layer_norm(Tensor([[4.0, 4.0, 4.0]]), one, zero).data, 0.0)
    np.testing.assert_allclose(
        T.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12).data,
        [[1.0, -1.0]], atol=1e-6)
    np.testing.assert_allclose(
        T.layer_norm(Tensor([[2.0, 4.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-5).data,
        [[-1.0, 1.0]], atol=1e-3)


def test_cross_entropy_examples():
    assert T.cross_entropy(Tensor([[0.0, 0.0]]), np.array([0])).item() == pytest.approx(math.log(2))
    assert T.cross_entropy(Tensor([[30.0, -30.0]]), np.array([0])).item() == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_grad_is_softmax_minus_onehot(rng):
    z = param(rng, 4, 3)
    y = np.array([0, 2, 1, 2])
    with Tape() as tape:
        loss = T.cross_entropy(z, y)
    (g,) = tape.grad(loss, z)
    e = np.exp(z.data - z.data.max(1, keepdims=True))
    p = e / e.sum(1, keepdims=True)
    np.testing.assert_allclose(g.data, (p - np.eye(3)[y]) / 4, atol=1e-12)
    numeric = central_diff(lambda: T.cross_entropy(z, y).item(), z.data)
    assert rel_err(g.data, numeric) < 1e-4


def test_cross_entropy_rejects_bad_label():
    with pytest.raises(IndexError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_backward_sum_of_squares():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    with Tape() as tape:
        loss = T.sum(T.square(x))
    (g,) = tape.grad(loss, x)
    np.testing.assert_array_equal(g.data, 2 * x.data)


def test_unreachable_leaf_gets_zero_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        T.sum(y)  # recorded but not part of the root
        loss = T.sum(x)
    grads = tape.backward(loss)
    np.testing.assert_array_equal(grads[y.node_id].data, 0.0)
    np.testing.assert_array_equal(grads[x.node_id].data, 1.0)


def test_backward_rejects_non_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = T.scale(x, 2.0)
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(y)


def test_backward_is_deterministic(rng):
    a, b = param(rng, 4, 4), param(rng, 4, 4)
    with Tape() as tape:
        loss = T.sum(T.softmax_rows(T.matmul(a, b)) * a)
    g1 = tape.backward(loss)
    g2 = tape.backward(loss)
    for k in g1:
        assert g1[k].data.tobytes() == g2[k].data.tobytes()


def test_no_tape_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    y = T.scale(x, 3.0)
    assert not y.requires_grad


OPS = {
    "add": lambda a, b: T.add(a, b),
    "sub": lambda a, b: T.sub(a, b),
    "mul": lambda a, b: T.mul(a, b),
    "div": lambda a, b: T.div(a, T.add(T.square(b), 1.0)),
    "relu": lambda a, b: T.mul(T.relu(a), b),
    "softmax": lambda a, b: T.mul(T.softmax_rows(a), b),
    "layer_norm": lambda a, b: T.mul(T.layer_norm(a, T.take_row(b, 0), T.take_row(b, 1)), a),
    "concat_rows": lambda a, b: T.mul(T.concat_rows([a, b]), T.concat_rows([b, a])),
    "concat_cols": lambda a, b: T.mul(T.concat_cols([a, b]), T.concat_cols([b, a])),
    "max_pool": lambda a, b: T.mul(T.max_pool_rows(a), T.take_row(b, 0)),
    "mean_pool": lambda a, b: T.mul(T.mean_pool_rows(a, np.array([True, False, True, True])), T.take_row(b, 1)),
    "scale": lambda a, b: T.mul(T.scale(a, -2.5), b),
    "take_row": lambda a, b: T.mul(T.take_row(a, 2), T.take_row(b, 3)),
    "transpose": lambda a, b: T.matmul(T.transpose(a, (1, 0)), b),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    op = OPS[name]
    for _ in range(20):
        a, b = param(rng, 4, 4), param(rng, 4, 4)
        assert check_grads(lambda: T.sum(op(a, b)), [a, b]) < 1e-4


def test_embedding_lookup_grad(rng):
    table = param(rng, 6, 3)
    ids = np.array([[0, 2, 2], [5, 1, 0]])
    w = rng.normal(size=(2, 3, 3))
    assert check_grads(lambda: T.sum(T.mul(T.embedding_lookup(table, ids), w)), [table]) < 1e-4
    with pytest.raises(IndexError):
        T.embedding_lookup(table, np.array([6]))


def test_max_pool_respects_row_mask():
    x = Tensor([[1.0, 5.0], [3.0, 2.0], [9.0, 9.0]])
    np.testing.assert_array_equal(T.max_pool_rows(x, np.array([True, True, False])).data, [3.0, 5.0])


def test_float32_is_default():
    assert Tensor([1, 2]).dtype == np.float32
    assert T.add(Tensor(np.ones(2, np.float32)), np.ones(2, np.float64)).dtype == np.float32

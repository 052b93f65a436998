import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from emma import tensor as T
from emma.errors import ContractError, DimensionError
from emma.gradcheck import TOLERANCE, check, check_ops, max_error, rng_fixed

finite = st.floats(-10, 10, allow_nan=False, width=64)


def mat(rows, cols):
    return arrays(np.float64, (rows, cols), elements=finite)


def test_matmul_identity():
    out = T.matmul(T.Tensor(np.eye(2)), T.Tensor([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[3], [4]])


def test_matmul_hand_arithmetic():
    out = T.Tensor([[1.0, 2.0], [3.0, 4.0]]) @ T.Tensor([[5.0], [6.0]])
    np.testing.assert_array_equal(out.data, [[17], [39]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\[2, 3\].*\[2, 3\]"):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


@settings(max_examples=30, deadline=None)
@given(mat(3, 4), mat(4, 2))
def test_matmul_agrees_with_numpy(a, b):
    np.testing.assert_allclose(T.matmul(T.Tensor(a), T.Tensor(b)).data, a @ b, rtol=1e-12, atol=1e-9)


def test_concat_tokens_keeps_row_order():
    a = np.arange(8, dtype=np.float64).reshape(2, 4)
    b = 100 + np.arange(12, dtype=np.float64).reshape(3, 4)
    out = T.concat_tokens(T.Tensor(a), T.Tensor(b)).data
    assert out.shape == (5, 4)
    np.testing.assert_array_equal(out, np.vstack([a, b]))


def test_concat_tokens_large_shape():
    out = T.concat_tokens(T.Tensor(np.zeros((576, 1024))), T.Tensor(np.zeros((77, 1024))))
    assert out.shape == (653, 1024)


def test_concat_tokens_width_mismatch():
    with pytest.raises(DimensionError):
        T.concat_tokens(T.Tensor(np.zeros((2, 4))), T.Tensor(np.zeros((3, 5))))


def test_softmax_of_equal_logits_is_uniform():
    np.testing.assert_allclose(T.softmax_rows(T.Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3])


def test_softmax_masked_columns_get_zero():
    out = T.softmax_rows(T.Tensor([[1.0, 2.0, 3.0]]), np.array([[1, 0, 1]], dtype=bool)).data
    assert out[0, 1] == 0
    assert out.sum() == pytest.approx(1.0)


@settings(max_examples=30, deadline=None)
@given(mat(3, 5))
def test_softmax_rows_sum_to_one(x):
    out = T.softmax_rows(T.Tensor(x)).data
    np.testing.assert_allclose(out.sum(axis=1), 1.0, rtol=1e-12)
    assert np.all(out >= 0)


def test_mean_pool_of_ones():
    out = T.mean_pool_rows(T.Tensor(np.ones((3, 6))))
    assert out.shape == (1, 6)
    np.testing.assert_array_equal(out.data, np.ones((1, 6)))


def test_mean_pool_respects_mask():
    x = np.array([[[1.0, 2.0], [3.0, 4.0], [100.0, 100.0]]])
    out = T.mean_pool_rows(T.Tensor(x), np.array([[1, 1, 0]])).data
    np.testing.assert_allclose(out, [[2.0, 3.0]])


def test_layer_norm_standardizes_rows():
    x = np.random.default_rng(0).standard_normal((4, 16)) * 5 + 3
    out = T.layer_norm(T.Tensor(x)).data
    np.testing.assert_allclose(out.mean(axis=1), 0, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=1), 1, atol=1e-3)


def test_empty_tensor_rejected():
    with pytest.raises(DimensionError):
        T.Tensor(np.zeros((0, 3)))


def test_cross_entropy_uniform_is_log_c():
    loss = T.cross_entropy(T.Tensor(np.zeros((5, 4)), dtype=np.float64), np.array([0, 1, 2, 3, 0]))
    assert float(loss.data) == pytest.approx(math.log(4), abs=1e-12)


def test_cross_entropy_saturates():
    logits = np.zeros((2, 4))
    labels = np.array([1, 3])
    logits[np.arange(2), labels] = 20.0
    assert float(T.cross_entropy(T.Tensor(logits, dtype=np.float64), labels).data) < 1e-6


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        T.cross_entropy(T.Tensor(np.zeros((2, 4))), np.array([0, 4]))


def test_backward_matches_analytic_linear_form():
    x = np.array([1.0, -2.0, 3.0])
    w = T.Tensor(np.ones((2, 3)), requires_grad=True, dtype=np.float64)
    T.backward(T.sum(T.matmul(w, T.Tensor(x[:, None], dtype=np.float64))))
    np.testing.assert_array_equal(w.grad, np.broadcast_to(x, (2, 3)))


def test_backward_accumulates():
    w = T.Tensor([1.0, 2.0], requires_grad=True, dtype=np.float64)
    T.backward(T.sum(T.mul(w, w)))
    T.backward(T.sum(T.mul(w, w)))
    np.testing.assert_array_equal(w.grad, [4.0, 8.0])


def test_backward_rejects_non_scalar():
    w = T.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(T.scale(w, 2.0))


def test_backward_without_grad_path():
    with pytest.raises(ContractError):
        T.backward(T.sum(T.Tensor(np.ones(3))))


def test_unreachable_leaf_keeps_no_grad():
    a = T.Tensor(np.ones(2), requires_grad=True)
    b = T.Tensor(np.ones(2), requires_grad=True)
    T.backward(T.sum(a))
    assert b.grad is None
    np.testing.assert_array_equal(a.grad, [1, 1])


def test_shared_subexpression_gradients_add():
    x = T.Tensor([3.0], requires_grad=True, dtype=np.float64)
    y = T.mul(x, x)
    T.backward(T.sum(T.add(y, y)))
    np.testing.assert_allclose(x.grad, [12.0])


def test_tape_orders_parents_first():
    a = T.Tensor(np.ones((2, 2)), requires_grad=True)
    loss = T.sum(T.relu(T.matmul(a, a)))
    tape = T.Tape.from_loss(loss)
    assert [r.op for r in tape.records] == ["matmul", "relu", "sum"]
    for rec in tape.records:
        assert all(i is None or i < rec.output_id for i in rec.input_ids)


def test_constants_are_not_recorded():
    out = T.add(T.Tensor(np.ones(2)), T.Tensor(np.ones(2)))
    assert out.is_leaf and not out.requires_grad


def test_every_op_passes_gradcheck():
    errors = check_ops(seed=0)
    assert len(errors) >= 20
    bad = {k: v for k, v in errors.items() if not v < TOLERANCE}
    assert not bad


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_token_mix_gradcheck_random(seed):
    rng = rng_fixed(seed)
    x = T.Tensor(rng.standard_normal((2, 4, 3)), requires_grad=True, dtype=np.float64)
    w = T.Tensor(rng.standard_normal((4, 3)), requires_grad=True, dtype=np.float64)
    probe = T.Tensor(rng.standard_normal((2, 3, 3)), dtype=np.float64)
    assert max_error(check(lambda: T.sum(T.mul(T.token_mix(x, w), probe)), {"x": x, "w": w})) < TOLERANCE


def test_gradcheck_rejects_float32():
    p = T.Tensor(np.ones(2), requires_grad=True, dtype=np.float32)
    with pytest.raises(ContractError):
        check(lambda: T.sum(p), {"p": p})

"""Tests for tensors, the tape and the gradient checker"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from core.errors import NumericError, ShapeError
from core.tensor import (
    Tape,
    Tensor,
    add,
    backward,
    concat_last,
    concat_rows,
    grad_check,
    layer_norm,
    mask_columns,
    matmul,
    mean_all,
    mean_pool_masked,
    mul,
    relative_error,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax_rows,
    split_last,
    sub,
    sum_all,
    take_rows,
    tensor_new,
    transpose,
)

finite = st.floats(min_value=-50, max_value=50, allow_nan=False, allow_infinity=False)


class TestTensorBasics:
    def test_tensor_new_row_major(self):
        t = tensor_new([2, 3], [1, 2, 3, 4, 5, 6])
        assert t.shape == (2, 3)
        assert t.tolist() == [[1, 2, 3], [4, 5, 6]]

    def test_tensor_new_wrong_length(self):
        with pytest.raises(ShapeError, match="6 values but data has 5"):
            tensor_new([2, 3], [1, 2, 3, 4, 5])

    def test_zero_dimension_rejected(self):
        with pytest.raises(ShapeError):
            tensor_new([0, 3], [])

    def test_rank_three_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 2, 2)))

    def test_data_is_read_only(self):
        t = Tensor(np.ones((2, 2)))
        with pytest.raises(ValueError):
            t.data[0, 0] = 5.0

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_row_broadcast_add(self):
        out = add(Tensor(np.zeros((2, 3))), Tensor(np.array([1.0, 2.0, 3.0])))
        np.testing.assert_array_equal(out.data, [[1, 2, 3], [1, 2, 3]])

    def test_scale_rejects_tensor(self):
        with pytest.raises(ShapeError):
            scale(Tensor(np.ones(2)), Tensor(np.ones(2)))


class TestSoftmax:
    def test_uniform_row(self):
        out = softmax_rows(Tensor(np.zeros((1, 4))))
        np.testing.assert_allclose(out.data, 0.25, atol=1e-15)

    def test_masked_entries_are_exactly_zero(self):
        scores = Tensor(np.array([[1.0, 2.0, 3.0]]))
        out = softmax_rows(mask_columns(scores, [1, 0, 1]))
        assert out.data[0, 1] == 0.0
        assert math.isclose(out.data.sum(), 1.0, abs_tol=1e-12)

    def test_fully_masked_row(self):
        with pytest.raises(NumericError):
            softmax_rows(mask_columns(Tensor(np.ones((1, 2))), [0, 0]))

    def test_nan_rejected(self):
        with pytest.raises(NumericError):
            softmax_rows(Tensor(np.array([[np.nan, 1.0]])))

    @given(st.lists(finite, min_size=1, max_size=8), finite)
    def test_shift_invariance(self, row, shift):
        base = softmax_rows(Tensor(np.array([row])))
        shifted = softmax_rows(Tensor(np.array([row]) + shift))
        np.testing.assert_allclose(base.data, shifted.data, atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        out = softmax_rows(Tensor(rng.normal(scale=5.0, size=(1000, 7))))
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)
        assert (out.data >= 0).all()


class TestOps:
    def test_sigmoid_strictly_inside_unit_interval(self):
        out = sigmoid(Tensor(np.array([-30.0, 0.0, 30.0])))
        assert ((out.data > 0) & (out.data < 1)).all()
        assert out.data[1] == 0.5

    def test_layer_norm_zero_mean_unit_variance(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(3, 6)))
        out = layer_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6)))
        np.testing.assert_allclose(out.data.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.data.var(axis=1), 1.0, atol=1e-3)

    def test_split_then_concat_is_identity(self):
        x = Tensor(np.arange(12.0).reshape(2, 6))
        np.testing.assert_array_equal(concat_last(split_last(x, 3)).data, x.data)

    def test_take_rows_out_of_range(self):
        with pytest.raises(ShapeError):
            take_rows(Tensor(np.ones((3, 2))), [0, 3])

    def test_mean_pool_masked(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0], [100.0, 100.0]]))
        np.testing.assert_array_equal(mean_pool_masked(x, [1, 1, 0]).data, [2.0, 3.0])

    def test_mean_pool_needs_a_row(self):
        with pytest.raises(NumericError):
            mean_pool_masked(Tensor(np.ones((2, 2))), [0, 0])


class TestTape:
    def test_backward_of_product(self):
        tape = Tape()
        a = tape.variable(np.array([2.0]))
        b = tape.variable(np.array([3.0]))
        grads = backward(mul(a, b))
        assert grads[a.node_id][0] == 3.0
        assert grads[b.node_id][0] == 2.0

    def test_shared_input_accumulates(self):
        tape = Tape()
        x = tape.variable(np.array([1.5]))
        grads = tape.backward(add(mul(x, x), x))
        assert grads[x.node_id][0] == pytest.approx(4.0)

    def test_unreached_leaf_gets_zero(self):
        tape = Tape()
        x = tape.variable(np.ones(2))
        unused = tape.variable(np.ones((2, 2)))
        grads = tape.backward(sum_all(x))
        np.testing.assert_array_equal(grads[unused.node_id], np.zeros((2, 2)))

    def test_non_scalar_loss(self):
        tape = Tape()
        x = tape.variable(np.ones(2))
        with pytest.raises(ShapeError):
            tape.backward(add(x, 1.0))

    def test_untracked_ops_are_not_recorded(self):
        tape = Tape()
        x = tape.variable(np.ones(2))
        Tensor(np.ones(2)) + 1.0
        assert len(tape) == 1
        assert x.node_id == 0


class TestGradCheck:
    def test_quadratic(self):
        result = grad_check(lambda p: mul(p[0], p[0]), [np.array([3.0])], step=1e-3)
        assert result.max_error < 1e-8

    def test_constant_function(self):
        result = grad_check(lambda p: add(scale(sum_all(p[0]), 0.0), 7.0), [np.ones(3)])
        assert result.max_error < 1e-8

    def test_non_finite_output(self):
        with pytest.raises(NumericError):
            grad_check(lambda p: scale(sum_all(p[0]), math.inf), [np.ones(2)])

    def test_inputs_are_not_modified(self):
        arr = np.array([[0.5, -1.0]])
        grad_check(lambda p: sum_all(sigmoid(p[0])), [arr])
        np.testing.assert_array_equal(arr, [[0.5, -1.0]])

    def test_relative_error_floor(self):
        assert relative_error(0.0, 0.0) == 0.0
        assert relative_error(1e-12, 0.0) == pytest.approx(1e-4)

    @pytest.mark.parametrize(
        "build",
        [
            lambda p: sum_all(mul(matmul(p[0], p[1]), matmul(p[0], p[1]))),
            lambda p: sum_all(mul(softmax_rows(p[0]), tensor_new([2, 3], [1, 2, 3, 4, 5, 6]))),
            lambda p: sum_all(mul(layer_norm(p[0], reshape(p[1], (3,)), reshape(p[1], (3,))), p[0])),
            lambda p: mean_all(mul(sigmoid(p[0]), sub(p[0], 0.3))),
            lambda p: sum_all(mul(transpose(p[0]), transpose(p[0]))),
            lambda p: sum_all(mul(concat_rows([mean_pool_masked(p[0], [1, 0]), mean_pool_masked(p[0], [1, 1])]),
                                  concat_rows([mean_pool_masked(p[0], [0, 1]), mean_pool_masked(p[0], [1, 1])]))),
        ],
    )
    def test_ops_match_finite_differences(self, build):
        rng = np.random.default_rng(7)
        params = [rng.normal(size=(2, 3)), rng.normal(size=(3, 1))]
        result = grad_check(build, params)
        assert result.passed(1e-6), result

    def test_relu_away_from_kink(self):
        params = [np.array([[0.5, -0.7, 1.2], [-0.3, 0.9, -1.1]])]
        result = grad_check(lambda p: sum_all(mul(relu(p[0]), p[0])), params)
        assert result.passed(1e-6)

    def test_take_rows_with_repeats(self):
        result = grad_check(
            lambda p: sum_all(mul(take_rows(p[0], [0, 2, 0]), take_rows(p[0], [1, 1, 2]))),
            [np.random.default_rng(2).normal(size=(3, 2))],
        )
        assert result.passed(1e-6)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(min_value=-10, max_value=10), min_size=2, max_size=6))
    def test_softmax_input_gradient_sums_to_zero(self, row):
        tape = Tape()
        x = tape.variable(np.array([row]))
        weights = Tensor(np.linspace(-1.0, 2.0, len(row)).reshape(1, -1))
        grads = tape.backward(sum_all(mul(softmax_rows(x), weights)))
        assert abs(grads[x.node_id].sum()) < 1e-12

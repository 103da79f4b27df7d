import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from partialface import tensor as T
from partialface.tensor import NonFiniteError, ShapeError, Tensor, grad_check

from oracles import conv2d_loops, fc_loops, gap_loops, maxpool_loops, sigmoid_scalar

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


class TestTensor:
    def test_rejects_nan(self):
        with pytest.raises(NonFiniteError):
            Tensor([1.0, np.nan])

    def test_rejects_inf(self):
        with pytest.raises(NonFiniteError):
            Tensor(np.array([[np.inf]]))

    def test_double_precision(self):
        assert Tensor(np.arange(3, dtype=np.float32)).data.dtype == np.float64

    def test_shape_mismatch_names_op_and_shapes(self):
        with pytest.raises(ShapeError, match=r"add.*\(2, 3\).*\(4,\)"):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(4)))
        with pytest.raises(ShapeError, match="conv2d"):
            T.conv2d(Tensor(np.zeros((1, 4, 4, 2))), Tensor(np.zeros((3, 3, 3, 1))))
        with pytest.raises(ShapeError, match="fully_connected"):
            T.fully_connected(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    def test_backward_accumulates_shared_use(self):
        x = Tensor([2.0], requires_grad=True)
        y = T.sum(T.mul(x, x) + x)
        y.backward()
        assert x.grad[0] == pytest.approx(5.0)


class TestSigmoid:
    def test_symmetry_point(self):
        assert T.sigmoid(Tensor(0.0)).item() == 0.5

    def test_saturates_below_one(self):
        vals = T.sigmoid(Tensor([10.0, 30.0, 800.0])).data
        assert np.all(vals < 1.0)
        assert np.all(np.diff(vals) >= 0)
        assert vals[1] > 1 - 1e-12

    def test_strictly_positive_far_left(self):
        assert T.sigmoid(Tensor(-800.0)).item() > 0.0

    def test_matches_scalar_formula(self):
        out = T.sigmoid(Tensor([-1.0, 0.0, 1.0])).data
        ref = [sigmoid_scalar(v) for v in (-1.0, 0.0, 1.0)]
        np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)

    def test_derivative_at_zero(self):
        x = Tensor(np.zeros(1), requires_grad=True)
        T.sum(T.sigmoid(x)).backward()
        assert x.grad[0] == 0.25

    @given(arrays(np.float64, st.integers(1, 30), elements=finite))
    def test_open_interval_and_monotone(self, x):
        xs = np.sort(x)
        out = T.sigmoid(Tensor(xs)).data
        assert np.all(out > 0) and np.all(out < 1)
        assert np.all(np.diff(out) >= 0)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax(Tensor(np.full(7, 3.3))).data, 1 / 7, atol=1e-15)

    def test_closed_form(self):
        np.testing.assert_allclose(T.softmax(Tensor([math.log(2), 0.0])).data, [2 / 3, 1 / 3], atol=1e-15)

    def test_large_inputs(self):
        out = T.softmax(Tensor([1000.0, 0.0])).data
        assert out[0] == pytest.approx(1.0) and out[1] < 1e-300 + 1e-12

    @settings(max_examples=200)
    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
                  elements=st.floats(-1e4, 1e4, allow_nan=False)), st.sampled_from([0, 1, -1]))
    def test_sums_to_one(self, x, axis):
        out = T.softmax(Tensor(x), axis=axis).data
        assert np.all(out >= 0)
        assert np.max(np.abs(out.sum(axis=axis) - 1)) < 1e-12

    def test_gradient_of_sum_is_zero(self):
        x = Tensor(np.random.default_rng(0).normal(size=6))
        rep = grad_check(lambda: T.sum(T.softmax(x)), [x])
        np.testing.assert_allclose(x.grad, 0.0, atol=1e-15)
        assert rep.max_rel_error < 1e-4


class TestGlobalAveragePool:
    def test_all_ones(self):
        np.testing.assert_array_equal(T.global_average_pool(np.ones((20, 20, 3))).data, 1.0)

    def test_one_hot(self):
        A = np.zeros((20, 20, 2))
        A[4, 7, 1] = 400.0
        np.testing.assert_allclose(T.global_average_pool(A).data, [0.0, 1.0], atol=1e-15)

    def test_matches_loops(self):
        A = np.random.default_rng(1).normal(size=(4, 4, 3))
        np.testing.assert_allclose(T.global_average_pool(A).data, gap_loops(A), atol=1e-12)

    def test_rank_check(self):
        with pytest.raises(ShapeError):
            T.global_average_pool(np.ones(5))


class TestConvolution:
    def test_identity_1x1(self):
        x = np.random.default_rng(2).normal(size=(2, 5, 5, 3))
        k = np.eye(3).reshape(1, 1, 3, 3)
        np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(k)).data, x)

    @pytest.mark.parametrize("ksize,stride,padding", [(3, 1, 1), (3, 2, 1), (1, 2, 0), (5, 1, 2), (7, 2, 3), (2, 2, 0)])
    def test_matches_loops(self, ksize, stride, padding):
        rng = np.random.default_rng(ksize * 10 + stride)
        x = rng.normal(size=(2, 8, 8, 2))
        k = rng.normal(size=(ksize, ksize, 2, 3))
        out = T.conv2d(Tensor(x), Tensor(k), stride=stride, padding=padding).data
        np.testing.assert_allclose(out, conv2d_loops(x, k, stride, padding), rtol=0, atol=1e-12)

    def test_output_size(self):
        assert T.conv_output_size(64, 7, 2, 3) == 32
        assert T.conv_output_size(32, 3, 2, 1) == 16
        assert T.conv_output_size(160, 7, 2, 3) == 80

    @pytest.mark.parametrize("ksize,stride,padding", [(3, 1, 1), (3, 2, 1), (1, 2, 0)])
    def test_gradients(self, ksize, stride, padding):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(2, 5, 5, 2)))
        k = Tensor(rng.normal(size=(ksize, ksize, 2, 3)))
        w = rng.normal(size=T.conv2d(x, k, stride, padding).shape)
        rep = grad_check(lambda: T.sum(T.mul(T.conv2d(x, k, stride, padding), w)), {"x": x, "k": k})
        assert rep.max_rel_error < 1e-4, rep


class TestMaxPool:
    def test_constant(self):
        x = np.full((1, 6, 6, 2), 3.5)
        np.testing.assert_array_equal(T.maxpool2d(Tensor(x), 3, 2, 1).data, 3.5)

    @pytest.mark.parametrize("size,stride,padding", [(3, 2, 1), (2, 2, 0), (3, 1, 0)])
    def test_matches_loops(self, size, stride, padding):
        x = np.random.default_rng(size).normal(size=(2, 8, 8, 4))
        np.testing.assert_allclose(T.maxpool2d(Tensor(x), size, stride, padding).data,
                                   maxpool_loops(x, size, stride, padding), atol=1e-12)

    def test_gradient(self):
        x = Tensor(np.random.default_rng(4).normal(size=(1, 6, 6, 2)))
        w = np.random.default_rng(5).normal(size=(1, 3, 3, 2))
        rep = grad_check(lambda: T.sum(T.mul(T.maxpool2d(x, 3, 2, 1), w)), [x])
        assert rep.max_rel_error < 1e-4


class TestFullyConnected:
    def test_matches_loops(self):
        rng = np.random.default_rng(6)
        x, W, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)
        out = T.fully_connected(Tensor(x), Tensor(W), Tensor(b)).data
        np.testing.assert_allclose(out, fc_loops(x, W, b), atol=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(7)
        x, W, b = (Tensor(rng.normal(size=s)) for s in ((3, 4), (4, 2), (2,)))
        rep = grad_check(lambda: T.sum(T.sigmoid(T.fully_connected(x, W, b))), [x, W, b])
        assert rep.max_rel_error < 1e-4


class TestDropout:
    def test_eval_identity(self):
        x = Tensor(np.arange(10.0))
        assert T.dropout(x, 0.8, np.random.default_rng(0), train=False) is x

    def test_expectation(self):
        x = np.full(20000, 2.0)
        out = T.dropout(Tensor(x), 0.8, np.random.default_rng(1), train=True).data
        assert abs(out.mean() - 2.0) / 2.0 < 0.01
        kept = out[out != 0]
        np.testing.assert_allclose(kept, 2.0 / 0.8)

    def test_gradient_with_fixed_mask(self):
        x = Tensor(np.random.default_rng(2).normal(size=12))
        rep = grad_check(lambda: T.sum(T.sigmoid(T.dropout(x, 0.8, np.random.default_rng(9), True))), [x])
        assert rep.max_rel_error < 1e-4


class TestElementwiseGradients:
    @pytest.mark.parametrize("fn", [
        lambda a, b: T.sum(T.mul(T.add(a, b), a)),
        lambda a, b: T.sum(T.log_softmax(T.mul(a, b), axis=0)[1]),
        lambda a, b: T.sum(T.max(T.mul(a, b), axis=1)),
        lambda a, b: T.mean(T.exp(T.mul(a, 0.3)) - b),
        lambda a, b: T.sum(T.einsum("ij,ij->i", a, b)),
        lambda a, b: T.sum(T.transpose(T.reshape(T.relu(a), (3, 2)), (1, 0)) * T.reshape(b, (3, 2)).data.T),
        lambda a, b: T.sum(T.stack([a, b], axis=0)[1] * a),
    ])
    def test_grad_check(self, fn):
        rng = np.random.default_rng(8)
        a, b = Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(2, 3)))
        rep = grad_check(lambda: fn(a, b), {"a": a, "b": b})
        assert rep.max_rel_error < 1e-4, rep

    def test_max_ties_lowest_index(self):
        x = Tensor(np.array([[1.0, 3.0, 3.0]]), requires_grad=True)
        T.sum(T.max(x, axis=1)).backward()
        np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])


class TestGradCheck:
    def test_detects_wrong_gradient(self):
        x = Tensor(np.array([0.3, -0.2]))

        def bad():
            y = T.sum(T.mul(x, x))
            # corrupt the taped gradient by routing through a fake op
            return T._result(y.data, (x,), lambda g: (g * 3 * x.data,))

        assert grad_check(bad, [x]).max_rel_error > 0.1

    def test_nonpositive_h(self):
        with pytest.raises(ValueError):
            grad_check(lambda: Tensor(0.0), [], h=0.0)

    def test_nonfinite_probe(self):
        x = Tensor(np.array([1e-6]))
        with pytest.raises(NonFiniteError):
            grad_check(lambda: T.log(x), [x], h=1.0)

import numpy as np
import pytest

from partialface import tensor as T
from partialface.aggregate import AggregateParams, BottleneckParams, aggregate, global_pool_baseline
from partialface.attend import attentional_pool
from partialface.tensor import ShapeError, Tensor, grad_check

from oracles import aggregate_loops, baseline_loops


def params(rng, K, C, D):
    return AggregateParams(Tensor(rng.normal(size=(K, C, D))), Tensor(rng.normal(size=(K, D))))


class TestAggregate:
    def test_single_map(self):
        rng = np.random.default_rng(0)
        p = params(rng, 1, 3, 4)
        f_k, f = aggregate(rng.normal(size=(1, 3)), p)
        np.testing.assert_array_equal(f.data, f_k.data[0])

    def test_identical_features(self):
        rng = np.random.default_rng(1)
        W, b = rng.normal(size=(3, 4)), rng.normal(size=4)
        p = AggregateParams(Tensor(np.stack([W] * 3)), Tensor(np.stack([b] * 3)))
        v = np.stack([rng.normal(size=3)] * 3)
        f_k, f = aggregate(v, p)
        np.testing.assert_allclose(f.data, f_k.data[0], atol=1e-15)

    def test_matches_loops(self):
        rng = np.random.default_rng(2)
        p = params(rng, 3, 5, 4)
        v = rng.normal(size=(3, 5))
        f_k, f = aggregate(v, p)
        ref_fk, ref_f = aggregate_loops(v, p.weight.data, p.bias.data)
        np.testing.assert_allclose(f_k.data, ref_fk, atol=1e-12)
        np.testing.assert_allclose(f.data, ref_f, atol=1e-12)

    def test_weights_not_shared(self):
        p = AggregateParams.init(4, 6, 3, np.random.default_rng(3))
        assert p.weight.shape == (4, 6, 3)
        assert not np.allclose(p.weight.data[0], p.weight.data[1])

    def test_dimension_mismatch(self):
        p = params(np.random.default_rng(4), 3, 5, 4)
        with pytest.raises(ShapeError, match="aggregate"):
            aggregate(np.zeros((2, 5)), p)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(5)
        p = params(rng, 4, 3, 2)
        v = rng.normal(size=(4, 3))
        perm = [2, 0, 3, 1]
        q = AggregateParams(Tensor(p.weight.data[perm]), Tensor(p.bias.data[perm]))
        np.testing.assert_allclose(aggregate(v[perm], q)[1].data, aggregate(v, p)[1].data, atol=1e-12)

    def test_linear_in_each_descriptor(self):
        rng = np.random.default_rng(6)
        p = AggregateParams(Tensor(rng.normal(size=(2, 3, 2))), Tensor(np.zeros((2, 2))))
        v1, v2 = rng.normal(size=(2, 2, 3))
        lhs = aggregate(2.0 * v1 - 0.5 * v2, p)[1].data
        rhs = 2.0 * aggregate(v1, p)[1].data - 0.5 * aggregate(v2, p)[1].data
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_monolithic_oracle(self):
        """f = (1/K) sum_k (W_k . sum_ij F (.) A~_k + b_k) in one expression."""
        for seed in range(20):
            rng = np.random.default_rng(seed)
            K, C, D = rng.integers(1, 5), rng.integers(1, 5), rng.integers(1, 5)
            F, At = rng.normal(size=(4, 3, C)), rng.uniform(size=(4, 3, K))
            p = params(rng, K, C, D)
            _, f = aggregate(attentional_pool(F, At), p)
            mono = (np.einsum("ijc,ijk,kcd->d", F, At, p.weight.data) + p.bias.data.sum(0)) / K
            np.testing.assert_allclose(f.data, mono, atol=1e-12)

    def test_dropout_only_in_train(self):
        rng = np.random.default_rng(7)
        p = params(rng, 2, 3, 2)
        v = rng.normal(size=(2, 3))
        np.testing.assert_array_equal(aggregate(v, p, 0.8, rng, train=False)[1].data, aggregate(v, p)[1].data)
        assert not np.allclose(aggregate(v, p, 0.5, np.random.default_rng(1), train=True)[1].data,
                               aggregate(v, p)[1].data)

    def test_gradients(self):
        rng = np.random.default_rng(8)
        p = params(rng, 3, 4, 2)
        v = Tensor(rng.normal(size=(2, 3, 4)))
        w = rng.normal(size=(2, 3, 2))

        def probe():
            f_k, f = aggregate(v, p)
            return T.add(T.sum(T.mul(f_k, w)), T.sum(T.mul(f, f)))

        rep = grad_check(probe, {"W": p.weight, "b": p.bias, "v": v})
        assert rep.max_rel_error < 1e-4, rep


class TestGlobalPoolBaseline:
    def test_single_map(self):
        rng = np.random.default_rng(9)
        F, At = rng.normal(size=(4, 4, 3)), rng.uniform(size=(4, 4, 1))
        bn = BottleneckParams(Tensor(rng.normal(size=(3, 2))), Tensor(rng.normal(size=2)))
        direct = attentional_pool(F, At).data[0] @ bn.weight.data + bn.bias.data
        np.testing.assert_allclose(global_pool_baseline(F, At, bn).data, direct, atol=1e-12)

    def test_identical_maps(self):
        rng = np.random.default_rng(10)
        F, a = rng.normal(size=(4, 4, 3)), rng.uniform(size=(4, 4, 1))
        bn = BottleneckParams(Tensor(rng.normal(size=(3, 2))), Tensor(np.zeros(2)))
        np.testing.assert_allclose(global_pool_baseline(F, np.repeat(a, 4, axis=-1), bn).data,
                                   global_pool_baseline(F, a, bn).data, atol=1e-12)

    def test_matches_loops(self):
        rng = np.random.default_rng(11)
        F, At = rng.normal(size=(5, 4, 3)), rng.uniform(size=(5, 4, 3))
        bn = BottleneckParams(Tensor(rng.normal(size=(3, 2))), Tensor(rng.normal(size=2)))
        np.testing.assert_allclose(global_pool_baseline(F, At, bn).data,
                                   baseline_loops(F, At, bn.weight.data, bn.bias.data), atol=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(12)
        F, At = Tensor(rng.normal(size=(2, 3, 3, 4))), Tensor(rng.uniform(size=(2, 3, 3, 3)))
        bn = BottleneckParams(Tensor(rng.normal(size=(4, 2))), Tensor(rng.normal(size=2)))
        rep = grad_check(lambda: T.sum(T.sigmoid(global_pool_baseline(F, At, bn))),
                         {"F": F, "A": At, "W": bn.weight, "b": bn.bias})
        assert rep.max_rel_error < 1e-4, rep

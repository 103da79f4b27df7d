import numpy as np
import pytest

from partialface import tensor as T
from partialface.backbone import FULL_BACKBONE, TOY_BACKBONE, Backbone, BackboneConfig, build
from partialface.tensor import ShapeError, Tensor, grad_check

TINY = BackboneConfig(input_size=16, stem_channels=4, blocks_per_stage=(1, 1, 1),
                      stage_channels=(8, 8, 8), K=2)


def images(n, size, seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, size=(n, size, size, 3))


def jitter(params, rng):
    for name, p in params.items():
        if name.endswith((".scale", ".bias", ".b")):
            p.data += rng.normal(0.0, 0.1, size=p.shape)


class TestConfig:
    @pytest.mark.parametrize("size", [8, 64, 160, 224])
    def test_output_side(self, size):
        assert BackboneConfig(input_size=size).output_size == size // 8

    @pytest.mark.parametrize("size", [0, 12, 100, -8])
    def test_size_must_divide_by_eight(self, size):
        with pytest.raises(ValueError, match="multiple of 8"):
            BackboneConfig(input_size=size)

    def test_invalid_k(self):
        with pytest.raises(ValueError, match="K"):
            BackboneConfig(K=0)

    def test_toy_defaults(self):
        assert TOY_BACKBONE.input_size == 64
        assert TOY_BACKBONE.feature_channels == 128
        assert TOY_BACKBONE.K == 5


class TestForward:
    def test_full_scale_shapes(self):
        out = build(FULL_BACKBONE, rng_seed=0).forward(np.zeros((160, 160, 3)))
        assert out.F.shape == (20, 20, 1024)
        assert out.A.shape == (20, 20, 12)

    def test_toy_shapes(self):
        cfg = BackboneConfig(stage_channels=(32, 64, 64), K=4)
        out = build(cfg).forward(images(1, 64)[0])
        assert out.F.shape == (8, 8, 64)
        assert out.A.shape == (8, 8, 4)

    def test_batched_matches_single(self):
        bb = build(TINY, rng_seed=1)
        x = images(3, 16)
        batched = bb.forward(x)
        for n in range(3):
            single = bb.forward(x[n])
            np.testing.assert_allclose(batched.F.data[n], single.F.data, atol=1e-12)
            np.testing.assert_allclose(batched.A.data[n], single.A.data, atol=1e-12)

    def test_deterministic_build(self):
        a, b = build(TINY, rng_seed=5), build(TINY, rng_seed=5)
        assert a.params.keys() == b.params.keys()
        for k in a.params:
            np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
        assert not np.array_equal(build(TINY, 6).params["stem.conv.w"].data, a.params["stem.conv.w"].data)

    def test_attention_nonnegative(self):
        out = build(TOY_BACKBONE, rng_seed=2).forward(images(2, 64))
        assert np.all(out.A.data >= 0)
        assert np.all(np.isfinite(out.F.data))

    def test_wrong_input_size(self):
        with pytest.raises(ShapeError, match="expected images"):
            build(TINY).forward(np.zeros((2, 32, 32, 3)))

    def test_branches_have_separate_parameters(self):
        bb = build(TINY, rng_seed=3)
        f_names = {k[2:] for k in bb.params if k.startswith("f.")}
        a_names = {k[2:] for k in bb.params if k.startswith("a.")}
        assert f_names and f_names == a_names
        assert "att.conv.w" in bb.params and "att.conv.b" in bb.params
        assert bb.params["att.conv.w"].shape == (1, 1, 8, 2)

    def test_attention_branch_does_not_touch_features(self):
        bb = build(TINY, rng_seed=4)
        x = images(2, 16)
        before = bb.forward(x).F.data.copy()
        for k, p in bb.params.items():
            if k.startswith(("a.", "att.")):
                p.data[...] = np.random.default_rng(0).normal(size=p.shape)
        np.testing.assert_array_equal(bb.forward(x).F.data, before)

    def test_post_activation_variant(self):
        cfg = BackboneConfig(input_size=16, stem_channels=4, blocks_per_stage=(1, 1, 1),
                             stage_channels=(8, 8, 8), K=2, pre_activation=False)
        bb = build(cfg)
        assert "stem.norm.scale" in bb.params
        assert bb.forward(images(1, 16)).A.shape == (1, 2, 2, 2)


class TestGradients:
    @pytest.mark.parametrize("pre", [True, False])
    def test_full_backbone(self, pre):
        cfg = BackboneConfig(input_size=16, stem_channels=4, blocks_per_stage=(1, 1, 1),
                             stage_channels=(8, 8, 8), K=2, pre_activation=pre)
        bb = build(cfg, rng_seed=7)
        x = images(2, 16, seed=7)
        rng = np.random.default_rng(0)
        # zero biases put dead pixels exactly on a ReLU kink; probe a generic point instead
        jitter(bb.params, rng)
        wF, wA = rng.normal(size=(2, 2, 2, 8)), rng.normal(size=(2, 2, 2, 2))

        def probe():
            out = bb.forward(x)
            return T.add(T.sum(T.mul(out.F, wF)), T.sum(T.mul(out.A, wA)))

        entries = {k: rng.choice(p.data.size, size=min(4, p.data.size), replace=False)
                   for k, p in bb.params.items()}
        rep = grad_check(probe, bb.params, entries=entries)
        assert rep.max_rel_error < 1e-4, rep

    def test_input_gradient(self):
        bb = build(TINY, rng_seed=8)
        x = Tensor(images(1, 16, seed=8))
        rep = grad_check(lambda: T.sum(bb.forward(x).F), {"x": x},
                         entries={"x": np.arange(0, x.data.size, 37)})
        assert rep.max_rel_error < 1e-4, rep

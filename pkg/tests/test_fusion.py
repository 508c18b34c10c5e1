from dataclasses import replace

import numpy as np
import pytest

from transdepth import diffcore as dc
from transdepth.fusion import (build_cost_volume, depth_regression, forward_pipeline,
                               normalize_raw_depth, refine_depth)
from transdepth.geometry import CameraRig, DepthPlanes
from transdepth.networks import DepthModel, NetworkConfig

PLANES = DepthPlanes(0.3, 1.5, 8)


@pytest.fixture(scope="module")
def tiny_model():
    return DepthModel(NetworkConfig(base_channels=4, feature_channels=4, plane_count=8, seed=2))


class TestDepthRegression:
    def test_one_hot(self):
        planes = DepthPlanes(0.4, 0.6, 3)
        prob = np.zeros((3, 2, 2))
        prob[1] = 1.0
        np.testing.assert_allclose(depth_regression(prob, planes).data, 0.5, atol=1e-15)

    def test_uniform_pair(self):
        out = depth_regression(np.full((2, 1, 1), 0.5), DepthPlanes(0.4, 0.6, 2)).data
        assert out.item() == pytest.approx(0.5, abs=1e-15)

    def test_weighted(self):
        prob = np.array([0.2, 0.3, 0.5])[:, None, None]
        out = depth_regression(prob, DepthPlanes(0.4, 0.6, 3)).data
        assert out.item() == pytest.approx(0.53, abs=1e-12)

    def test_plane_count_mismatch(self):
        with pytest.raises(ValueError, match="planes"):
            depth_regression(np.full((4, 2, 2), 0.25), PLANES)

    def test_matches_scalar_dot_product(self, rng):
        planes = DepthPlanes(0.3, 1.5, 12)
        prob = rng.dirichlet(np.ones(12), (25, 40)).transpose(2, 0, 1)
        out = depth_regression(prob, planes).data
        worst = 0.0
        for i in range(25):
            for j in range(40):
                ref = sum(float(planes.depths[n]) * float(prob[n, i, j]) for n in range(12))
                worst = max(worst, abs(out[i, j] - ref))
        assert worst <= 1e-12

    def test_output_within_plane_range(self, rng):
        prob = rng.dirichlet(np.full(8, 0.1), (16, 16)).transpose(2, 0, 1)
        out = depth_regression(prob, PLANES).data
        assert out.min() >= PLANES.d_min - 1e-12 and out.max() <= PLANES.d_max + 1e-12


class TestCostVolume:
    def test_identical_slice_is_zero(self, rng):
        f = rng.normal(size=(3, 4, 5))
        vol = np.stack([f, f + 1.0], axis=1)
        cost = build_cost_volume(f, vol).data
        assert np.array_equal(cost[:, 0], np.zeros((3, 4, 5)))

    def test_hand_value(self):
        cost = build_cost_volume(np.ones((1, 1, 1)), np.full((1, 1, 1, 1), 3.0)).data
        assert cost.item() == 1.0

    def test_non_negative(self, rng):
        cost = build_cost_volume(rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 5, 3, 3))).data
        assert (cost >= 0).all()

    @pytest.mark.parametrize("src_shape", [(2, 5, 3, 4), (3, 5, 3, 3), (2, 3, 3)])
    def test_shape_mismatch(self, src_shape):
        with pytest.raises(ValueError):
            build_cost_volume(np.ones((2, 3, 3)), np.ones(src_shape))


class TestRefine:
    def test_full_multi_confidence(self, rng):
        dm, ds = rng.random((4, 4)), rng.random((4, 4))
        out = refine_depth(dm, ds, np.ones((4, 4)), np.zeros((4, 4))).data
        np.testing.assert_array_equal(out, dm)

    def test_symmetric(self):
        out = refine_depth(np.array([0.4]), np.array([0.6]), np.array([0.5]), np.array([0.5]))
        assert out.data.item() == pytest.approx(0.5, abs=1e-15)

    def test_hand_value(self):
        out = refine_depth(np.array([1.0]), np.array([0.5]), np.array([0.3]), np.array([0.7]))
        assert out.data.item() == pytest.approx(0.65, abs=1e-12)

    def test_matches_scalar_arithmetic(self, rng):
        dm, ds, cm = rng.random((10, 10)), rng.random((10, 10)), rng.random((10, 10))
        out = refine_depth(dm, ds, cm, 1 - cm).data
        for i in range(10):
            for j in range(10):
                ref = float(cm[i, j]) * float(dm[i, j]) + (1 - float(cm[i, j])) * float(ds[i, j])
                assert abs(out[i, j] - ref) <= 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            refine_depth(np.ones((2, 2)), np.ones((2, 2)), np.ones((2, 2)), np.ones((2, 3)))


def test_raw_depth_normalisation():
    raw = np.array([0.0, 0.3, 0.9, 1.5, 3.0, -1.0])
    np.testing.assert_allclose(normalize_raw_depth(raw, PLANES), [0, 0, 0.5, 1, 1, 0])


class TestPipeline:
    def test_shapes_and_bounds(self, tiny_model, small_corpus):
        out = forward_pipeline(small_corpus[0], tiny_model, PLANES)
        for d in (out.depth_single, out.depth_multi, out.depth_restored):
            assert d.shape == (32, 32)
            assert d.data.min() >= PLANES.d_min - 1e-12 and d.data.max() <= PLANES.d_max + 1e-12
        assert out.prob_single.shape == out.prob_multi.shape == (8, 8, 8)
        lo = np.minimum(out.depth_single.data, out.depth_multi.data)
        hi = np.maximum(out.depth_single.data, out.depth_multi.data)
        assert ((out.depth_restored.data >= lo - 1e-12) & (out.depth_restored.data <= hi + 1e-12)).all()
        np.testing.assert_allclose(out.conf_multi.data + out.conf_single.data, 1.0, atol=1e-12)

    def test_identity_rig_is_finite(self, tiny_model, small_corpus):
        s = small_corpus[1]
        degenerate = replace(s, rgb_src=s.rgb_ref.copy(), rig=CameraRig.identity(s.rig.ref_intrinsics))
        out = forward_pipeline(degenerate, tiny_model, PLANES)
        assert all(np.isfinite(t.data).all() for t in (out.depth_restored, out.prob_multi))

    def test_plane_count_mismatch(self, tiny_model, small_corpus):
        with pytest.raises(ValueError, match="planes"):
            forward_pipeline(small_corpus[0], tiny_model, DepthPlanes(0.3, 1.5, 12))

    def test_non_finite_stage_is_named(self, small_corpus, monkeypatch):
        model = DepthModel(NetworkConfig(base_channels=4, feature_channels=4, plane_count=8))
        monkeypatch.setattr(model, "spp", lambda img: dc.Tensor(np.full((4, 8, 8), np.nan)))
        with pytest.raises(FloatingPointError, match="spp_extractor"):
            forward_pipeline(small_corpus[0], model, PLANES)

    def test_gradients_reach_every_network(self, tiny_model, small_corpus):
        from transdepth.objectives import LossWeights, total_loss
        s = small_corpus[0]
        tiny_model.zero_grad()
        with dc.Tape() as tape:
            out = forward_pipeline(s, tiny_model, PLANES)
            terms = total_loss(out, s.gt_depth, s.mask, LossWeights(), s.rig.ref_intrinsics)
        dc.backward(tape, terms.total)
        for name, net in tiny_model.networks.items():
            assert any(np.abs(p.grad).max() > 0 for p in net.parameters()), name
        tiny_model.zero_grad()

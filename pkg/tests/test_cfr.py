"""Contributing feature region: Grad-CAM weights, CAM, upsampling, masks, region transforms."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cfrpatch import cfr, models
from cfrpatch import tensor as T
from cfrpatch.tensor import ContractError, DimensionError, Tensor


class TestGradCam:
    def test_weights_match_finite_differences(self, cnn_s, batch):
        img = batch[3]
        tr = models.forward_trace(cnn_s, img.pixels)
        lam = cfr.gradcam_weights(tr, img.label)
        a0 = tr.activations.data
        p = {k: Tensor(v) for k, v in cnn_s.params.items()}

        def logit(a):
            h = T.flatten(T.maxpool2d(Tensor(a), 2), batched=False)
            h = T.relu(T.linear(h, p["fc0.weight"], p["fc0.bias"]))
            return T.linear(h, p["fc1.weight"], p["fc1.bias"]).data[img.label]

        # Shifting all of map k by eps moves the logit by eps * (sum of its gradient).
        eps = 1e-6
        for k in range(0, a0.shape[0], 5):
            e = np.zeros_like(a0)
            e[k] = 1.0
            fd = (logit(a0 + eps * e) - logit(a0 - eps * e)) / (2 * eps)
            assert lam[k] == pytest.approx(fd / (a0.shape[1] * a0.shape[2]), abs=1e-6)

    def test_class_out_of_range(self, cnn_s, batch):
        tr = models.forward_trace(cnn_s, batch[0].pixels)
        with pytest.raises(ContractError):
            cfr.gradcam_weights(tr, 5)

    def test_activation_map_is_relu_of_weighted_sum(self):
        a = np.array([[[1.0, -1.0]], [[2.0, 0.5]]])
        cam = cfr.activation_map(np.array([1.0, -1.0]), a, 0)
        np.testing.assert_array_equal(cam.values, [[0.0, 0.0]])
        cam = cfr.activation_map(np.array([1.0, 0.5]), a, 0)
        np.testing.assert_array_equal(cam.values, [[2.0, 0.0]])

    def test_activation_map_weight_count(self):
        with pytest.raises(DimensionError):
            cfr.activation_map(np.ones(3), np.ones((2, 2, 2)), 0)


class TestUpsample:
    def test_corners_preserved_and_midpoints_interpolated(self):
        grid = np.array([[0.0, 2.0], [4.0, 6.0]])
        up = cfr.upsample(grid, 3, 3)
        np.testing.assert_allclose(up, [[0, 1, 2], [2, 3, 4], [4, 5, 6]])

    def test_identity_size(self):
        g = np.random.default_rng(0).random((4, 4))
        np.testing.assert_array_equal(cfr.upsample(g, 4, 4), g)

    def test_nearest(self):
        up = cfr.upsample(np.array([[1.0, 2.0], [3.0, 4.0]]), 4, 4, mode="nearest")
        np.testing.assert_array_equal(up[:2, :2], 1.0)
        np.testing.assert_array_equal(up[2:, 2:], 4.0)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            cfr.upsample(np.ones((2, 2)), 4, 4, mode="cubic")

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
                  elements=st.floats(0, 10, allow_nan=False)))
    def test_bilinear_stays_in_input_range(self, grid):
        up = cfr.upsample(grid, 16, 16)
        assert up.min() >= grid.min() - 1e-12 and up.max() <= grid.max() + 1e-12


class TestSoftMask:
    def test_threshold_and_normalisation(self):
        m = cfr.soft_mask(np.array([[1.0, 0.5], [0.1, 0.0]]), tau=0.2)
        np.testing.assert_allclose(m.weights, [[1 / 1.5, 0.5 / 1.5], [0, 0]])
        assert m.suprathreshold_count == 2

    def test_tau_zero_keeps_zero_cells_out(self):
        m = cfr.soft_mask(np.array([[1.0, 0.0]]), tau=0.0)
        # the zero cell passes the threshold but carries no weight
        assert m.suprathreshold_count == 2
        np.testing.assert_array_equal(cfr.hard_mask(m).bits, [[True, False]])

    def test_all_zero_is_empty(self):
        m = cfr.soft_mask(np.zeros((3, 3)), 0.2)
        assert m.empty and m.weights.sum() == 0

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            cfr.soft_mask(np.ones((2, 2)), 1.5)
        with pytest.raises(ValueError):
            cfr.soft_mask(-np.ones((2, 2)), 0.2)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, (5, 5), elements=st.floats(0, 100, allow_nan=False)),
           st.floats(0, 1), st.floats(0, 1))
    def test_sum_and_monotone_support(self, cam, t1, t2):
        lo, hi = sorted((t1, t2))
        a, b = cfr.soft_mask(cam, lo), cfr.soft_mask(cam, hi)
        if not a.empty:
            assert a.weights.sum() == pytest.approx(1.0, abs=1e-12)
        assert not np.any(b.support & ~a.support)


class TestRegionTransforms:
    def test_partition_and_complement(self):
        rng = np.random.default_rng(0)
        img = rng.random((3, 4, 4))
        hard = cfr.HardMask(rng.random((4, 4)) > 0.5)
        inside, outside = cfr.zero_outside_cfr(img, hard), cfr.zero_inside_cfr(img, hard)
        np.testing.assert_array_equal(inside + outside, img)
        assert np.all(inside[:, ~hard.bits] == 0) and np.all(outside[:, hard.bits] == 0)

    def test_mask_shape_checked(self):
        with pytest.raises(DimensionError):
            cfr.zero_outside_cfr(np.zeros((3, 4, 4)), cfr.HardMask(np.ones((3, 3), bool)))


class TestLocate:
    def test_region_shapes(self, cnn_s, batch):
        r = cfr.locate(cnn_s, batch[0].pixels, batch[0].label, 0.2)
        assert r.upsampled.shape == (16, 16) and r.cam.values.shape == (8, 8)
        assert r.mask.weights.sum() == pytest.approx(1.0)

    def test_empty_map_falls_back_to_uniform(self):
        m = models.build(models.zoo_spec("cnn-s"), 0)
        for k in m.params:
            if k.startswith("fc1"):
                m.params[k][:] = 0.0  # logits constant, so every Grad-CAM weight is 0
        r = cfr.locate(m, np.full((3, 16, 16), 0.5), 0, 0.2)
        assert r.fallback
        np.testing.assert_allclose(r.mask.weights, 1 / 256)

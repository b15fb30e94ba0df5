"""Tensor engine: forward values against numpy oracles, backward against finite differences."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cfrpatch import tensor as T
from cfrpatch.tensor import ContractError, DimensionError, Tensor, grad_check


def conv_oracle(x, w, b, stride, pad):
    """Direct loop cross-correlation."""
    c, h, wd = x.shape
    k = w.shape[-1]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((w.shape[0], oh, ow))
    for o in range(w.shape[0]):
        for i in range(oh):
            for j in range(ow):
                patch = xp[:, i * stride:i * stride + k, j * stride:j * stride + k]
                out[o, i, j] = np.sum(patch * w[o]) + b[o]
    return out


class TestForward:
    def test_elementwise_match_numpy(self):
        rng = np.random.default_rng(0)
        a, b = rng.random((3, 4)) + 0.5, rng.random((3, 4)) + 0.5
        ta, tb = Tensor(a), Tensor(b)
        np.testing.assert_array_equal((ta + tb).data, a + b)
        np.testing.assert_array_equal((ta - tb).data, a - b)
        np.testing.assert_array_equal((ta * tb).data, a * b)
        np.testing.assert_array_equal((ta / tb).data, a / b)
        np.testing.assert_allclose(T.power(ta, 1.5).data, a ** 1.5)
        np.testing.assert_allclose(T.log(ta).data, np.log(a))
        np.testing.assert_allclose(T.exp(ta).data, np.exp(a))

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_conv2d_matches_loop(self, stride, pad):
        rng = np.random.default_rng(stride * 10 + pad)
        x, w, b = rng.normal(size=(2, 7, 6)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
        np.testing.assert_allclose(got, conv_oracle(x, w, b, stride, pad), atol=1e-12)

    def test_conv2d_batched_equals_per_image(self):
        rng = np.random.default_rng(1)
        x, w, b = rng.normal(size=(4, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        batched = T.conv2d(Tensor(x), Tensor(w), Tensor(b), 1, 1).data
        single = np.stack([T.conv2d(Tensor(xi), Tensor(w), Tensor(b), 1, 1).data for xi in x])
        np.testing.assert_allclose(batched, single, atol=1e-12)

    def test_conv2d_channel_mismatch(self):
        with pytest.raises(DimensionError):
            T.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))

    def test_maxpool_values_and_first_argmax_tie(self):
        x = np.array([[[1.0, 1.0, 0.0, 2.0],
                       [0.0, 1.0, 2.0, 2.0]]])
        t = Tensor(x, requires_grad=True)
        out = T.maxpool2d(t, 2)
        np.testing.assert_array_equal(out.data, [[[1.0, 2.0]]])
        T.tsum(out).backward()
        np.testing.assert_array_equal(t.grad, [[[1.0, 0.0, 0.0, 1.0], [0.0, 0.0, 0.0, 0.0]]])

    def test_softmax_is_probability_and_stable(self):
        z = Tensor(np.array([1000.0, 1001.0, 999.0]))
        s = T.softmax(z).data
        assert s.sum() == pytest.approx(1.0, abs=1e-15)
        np.testing.assert_allclose(np.exp(T.log_softmax(z).data), s, rtol=1e-12)

    def test_cross_entropy_uniform_logits(self):
        assert T.cross_entropy(Tensor(np.zeros(4)), 1).item() == pytest.approx(np.log(4))

    def test_linear_shapes(self):
        w, b = Tensor(np.ones((3, 5))), Tensor(np.arange(3.0))
        assert T.linear(Tensor(np.ones(5)), w, b).shape == (3,)
        assert T.linear(Tensor(np.ones((2, 5))), w, b).shape == (2, 3)
        with pytest.raises(DimensionError):
            T.linear(Tensor(np.ones(4)), w, b)

    def test_l2_norm_345(self):
        assert T.l2_norm(Tensor(np.array([3.0, 4.0]))).item() == 5.0


class TestBackward:
    def test_non_scalar_root_rejected(self):
        t = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            (t * 2.0).backward()

    def test_shared_subexpression_accumulates(self):
        t = Tensor(np.array(3.0), requires_grad=True)
        y = t * t + t  # dy/dt = 2t + 1
        y.backward()
        assert t.grad == pytest.approx(7.0)

    def test_repeated_backward_does_not_accumulate(self):
        t = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        y = T.tsum(t * t)
        y.backward()
        first = t.grad.copy()
        y.backward()
        np.testing.assert_array_equal(t.grad, first)

    def test_broadcast_gradient_is_summed(self):
        a = Tensor(np.ones((3, 4)), requires_grad=True)
        b = Tensor(np.ones(4), requires_grad=True)
        T.tsum(a * b).backward()
        np.testing.assert_array_equal(b.grad, np.full(4, 3.0))

    def test_no_grad_leaf_has_no_grad(self):
        a, b = Tensor(np.ones(2)), Tensor(np.ones(2), requires_grad=True)
        T.tsum(a * b).backward()
        assert a.grad is None

    def test_maximum_floor_gradient(self):
        t = Tensor(np.array([0.5, -1.0]), requires_grad=True)
        T.tsum(T.maximum(t, 0.0)).backward()
        np.testing.assert_array_equal(t.grad, [1.0, 0.0])


finite = st.floats(-2.0, 2.0, allow_nan=False, allow_infinity=False)


class TestGradCheckProperties:
    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=finite))
    def test_smooth_composite(self, x):
        f = lambda t: T.tsum(T.exp(t * 0.5) * T.log(t * t + 1.0)) + T.l2_norm(t + 3.0)
        assert grad_check(f, x) < 1e-6

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from([(1, 0), (1, 1), (2, 1)]))
    def test_conv_input_and_weight(self, seed, sp):
        rng = np.random.default_rng(seed)
        stride, pad = sp
        x, w, b = rng.normal(size=(2, 5, 5)), rng.normal(size=(2, 2, 3, 3)), Tensor(rng.normal(size=2))
        out_shape = T.conv2d(Tensor(x), Tensor(w), b, stride, pad).shape
        r = Tensor(rng.normal(size=out_shape))
        assert grad_check(lambda t: T.tsum(T.conv2d(t, Tensor(w), b, stride, pad) * r), x) < 1e-6
        assert grad_check(lambda t: T.tsum(T.conv2d(Tensor(x), t, b, stride, pad) * r), w) < 1e-6

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 5))
    def test_log_softmax_cross_entropy(self, seed, n):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=n) * 3
        y = int(rng.integers(n))
        assert grad_check(lambda t: T.cross_entropy(t, y), z) < 1e-6


def test_numerical_grad_of_quadratic():
    g = T.numerical_grad(lambda t: T.tsum(t * t), np.array([1.0, -2.0]))
    np.testing.assert_allclose(g, [2.0, -4.0], atol=1e-8)

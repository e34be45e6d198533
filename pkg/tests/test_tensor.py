import numpy as np
import pytest

from mdnet import tensor as T
from mdnet.tensor import Tensor

from helpers import loop_conv2d, loop_max_pool, loop_mean_pool, \
    max_rel_error, numerical_gradient


class TestConv2d:
    def test_box_sum_geometry(self):
        x = Tensor(np.ones((1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        b = Tensor(np.zeros(1))
        y = T.conv2d(x, w, b, dilation=1, padding=1).data
        assert y[0, 1, 1] == 9.0
        for corner in [(0, 0), (0, 2), (2, 0), (2, 2)]:
            assert y[0][corner] == 4.0

    def test_dilated_delta_reads_flipped_kernel(self):
        img = np.zeros((1, 5, 5))
        img[0, 2, 2] = 1.0
        w = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
        y = T.conv2d(Tensor(img), Tensor(w), Tensor(np.zeros(1)),
                     dilation=2, padding=2).data
        assert y[0, 2, 2] == w[0, 0, 1, 1]
        assert y[0, 0, 0] == w[0, 0, 2, 2]

    def test_matches_nested_loop_reference(self, rng):
        x = rng.standard_normal((2, 8, 8))
        w = rng.standard_normal((4, 2, 3, 3))
        b = rng.standard_normal(4)
        got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), dilation=2, padding=2).data
        ref = loop_conv2d(x, w, b, dilation=2, padding=2)
        assert max_rel_error(got, ref) < 1e-12

    def test_batched_equals_per_image(self, rng):
        xb = rng.standard_normal((3, 2, 9, 7))
        w = rng.standard_normal((5, 2, 3, 3))
        b = rng.standard_normal(5)
        yb = T.conv2d(Tensor(xb), Tensor(w), Tensor(b), dilation=1, padding=1).data
        for i in range(3):
            yi = T.conv2d(Tensor(xb[i]), Tensor(w), Tensor(b),
                          dilation=1, padding=1).data
            np.testing.assert_allclose(yb[i], yi, atol=1e-13)

    def test_channel_mismatch_rejected(self, rng):
        x = Tensor(rng.standard_normal((3, 5, 5)))
        w = Tensor(rng.standard_normal((2, 4, 3, 3)))
        with pytest.raises(ValueError, match="channels"):
            T.conv2d(x, w, Tensor(np.zeros(2)), dilation=1, padding=1)

    def test_even_kernel_rejected(self, rng):
        x = Tensor(rng.standard_normal((1, 5, 5)))
        w = Tensor(rng.standard_normal((1, 1, 2, 2)))
        with pytest.raises(ValueError, match="odd"):
            T.conv2d(x, w, Tensor(np.zeros(1)))


class TestElementwise:
    def test_square_values(self):
        assert np.array_equal(T.square(Tensor([-2.0, 0.0, 3.0])).data, [4, 0, 9])

    def test_relu_values_and_gradient_mask(self):
        x = Tensor([-1.0, 2.0], requires_grad=True)
        y = T.relu(x)
        assert np.array_equal(y.data, [0, 2])
        T.backward(T.tsum(y))
        assert np.array_equal(x.grad, [0, 1])

    def test_sigmoid_range_and_saturation_safety(self):
        y = T.sigmoid(Tensor([-1000.0, 0.0, 1000.0])).data
        assert y[1] == 0.5
        assert np.all(np.isfinite(y))

    def test_incompatible_shapes_rejected(self):
        with pytest.raises(ValueError, match="incompatible"):
            T.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_composite_gradient_vs_finite_differences(self, rng):
        x0 = rng.standard_normal(6)

        def value(xd):
            x = Tensor(xd)
            y = T.mul(T.square(T.add(x, 0.5)), T.relu(T.sub(x, 0.1)))
            return T.tmean(T.add(y, T.sigmoid(x))).item()

        x = Tensor(x0, requires_grad=True)
        y = T.mul(T.square(T.add(x, 0.5)), T.relu(T.sub(x, 0.1)))
        T.backward(T.tmean(T.add(y, T.sigmoid(x))))
        assert max_rel_error(x.grad, numerical_gradient(value, x0)) < 1e-6


class TestPooling:
    def test_max_pool_delta(self):
        d = np.zeros((5, 5))
        d[2, 2] = 1.0
        out = T.max_pool_same(Tensor(d), 3).data
        expected = np.zeros((5, 5))
        expected[1:4, 1:4] = 1.0
        assert np.array_equal(out, expected)

    def test_mean_pool_corner_clipping(self):
        out = T.mean_pool_same(Tensor(np.ones((4, 4))), 3).data
        assert out[0, 0] == 1.0

    def test_mean_pool_matches_loop_exactly(self, rng):
        x = rng.standard_normal((9, 9))
        got = T.mean_pool_same(Tensor(x), 5).data
        ref = loop_mean_pool(x, 5)
        assert np.array_equal(got, ref)

    @pytest.mark.parametrize("shape,win", [((5, 7), 3), ((16, 16), 5),
                                           ((11, 4), 7), ((16, 9), 9)])
    def test_pooling_equals_loop_on_small_shapes(self, shape, win, rng):
        x = rng.standard_normal(shape)
        assert np.array_equal(T.mean_pool_same(Tensor(x), win).data,
                              loop_mean_pool(x, win))
        ref_max, _ = loop_max_pool(x, win)
        assert np.array_equal(T.max_pool_same(Tensor(x), win).data, ref_max)

    def test_max_pool_tie_routing_row_major(self):
        # quantized values force plateaus; gradient must land on the
        # row-major-first argmax of each window
        rng = np.random.default_rng(7)
        x = np.round(rng.random((8, 9)), 1)
        t = Tensor(x, requires_grad=True)
        out = T.max_pool_same(t, 5)
        g = rng.random((8, 9))
        T.backward(T.tsum(T.mul(out, Tensor(g))))
        _, arg = loop_max_pool(x, 5)
        ref = np.zeros_like(x)
        for (i, j), (ai, aj) in arg.items():
            ref[ai, aj] += g[i, j]
        assert np.array_equal(t.grad, ref)

    def test_window_larger_than_map_rejected(self):
        with pytest.raises(ValueError, match="too large"):
            T.max_pool_same(Tensor(np.zeros((4, 4))), 17)

    def test_even_window_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            T.mean_pool_same(Tensor(np.zeros((5, 5))), 4)


class TestNormalizeAndGather:
    def test_l2_normalize_pixel(self):
        v = Tensor(np.array([3.0, 4.0]).reshape(2, 1, 1))
        out = T.l2_normalize_channels(v).data
        np.testing.assert_allclose(out.ravel(), [0.6, 0.8], atol=1e-10)

    def test_l2_normalize_zero_vector_guarded(self):
        v = Tensor(np.zeros((4, 2, 2)), requires_grad=True)
        out = T.l2_normalize_channels(v)
        assert np.array_equal(out.data, np.zeros((4, 2, 2)))
        T.backward(T.tsum(out))
        assert np.all(np.isfinite(v.grad))

    def test_l2_normalize_gradient_vs_finite_differences(self, rng):
        x0 = rng.standard_normal((8, 4, 4))

        def value(xd):
            return T.tmean(T.mul(T.l2_normalize_channels(Tensor(xd)),
                                 Tensor(weights))).item()

        weights = rng.standard_normal((8, 4, 4))
        x = Tensor(x0, requires_grad=True)
        T.backward(T.tmean(T.mul(T.l2_normalize_channels(x), Tensor(weights))))
        assert max_rel_error(x.grad, numerical_gradient(value, x0)) < 1e-5

    def test_gather_pixels_and_rows_scatter_gradients(self, rng):
        vol = Tensor(rng.standard_normal((3, 5, 5)), requires_grad=True)
        ys, xs = np.array([0, 4, 4]), np.array([0, 4, 0])
        rows = T.gather_pixels(vol, ys, xs)
        assert rows.data.shape == (3, 3)
        picked = T.gather_rows(rows, np.array([2, 2]))
        T.backward(T.tsum(picked))
        assert vol.grad[:, 4, 0].sum() == 2 * 3  # row 2 taken twice
        assert vol.grad[:, 0, 0].sum() == 0

    def test_gather_bilinear_interpolates_and_backpropagates(self):
        img = Tensor(np.array([[0.0, 1.0], [2.0, 3.0]]), requires_grad=True)
        out = T.gather_bilinear(img, np.array([0.5]), np.array([0.5]))
        assert out.data[0] == pytest.approx(1.5)
        T.backward(T.tsum(out))
        assert np.allclose(img.grad, 0.25)


class TestBackward:
    def test_sum_of_squares(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        T.backward(T.tsum(T.square(x)))
        assert np.array_equal(x.grad, [2, 4])

    def test_mean_gradient(self):
        x = Tensor(np.zeros(4), requires_grad=True)
        T.backward(T.tmean(x))
        assert np.array_equal(x.grad, [0.25] * 4)

    def test_accumulation_without_reset(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        T.backward(T.tsum(T.square(x)))
        T.backward(T.tsum(T.square(x)))
        assert np.array_equal(x.grad, [4, 8])

    def test_non_scalar_rejected(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            T.backward(T.square(x))

    def test_shared_subexpression_accumulates(self):
        a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        s = T.add(a, a)
        T.backward(T.tsum(T.mul(s, s)))
        assert np.allclose(a.grad, 8 * a.data)


class TestDetach:
    def test_product_rule_with_severed_branch(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        y = T.mul(x.detach(), x)
        T.backward(y)
        assert x.grad == 3.0

    def test_detach_preserves_values(self, rng):
        x = Tensor(rng.standard_normal(5), requires_grad=True)
        d = x.detach()
        assert np.array_equal(d.data, x.data)
        assert not d.requires_grad and d._node is None


# randomized gradient sweep: every differentiable op, 64-bit, h=1e-5
def _op_cases():
    cases = []
    for seed in range(10):
        cases.extend([
            ("add", seed), ("sub", seed), ("mul", seed), ("square", seed),
            ("relu", seed), ("sigmoid", seed), ("mean_pool", seed),
            ("max_pool", seed), ("l2norm", seed), ("conv", seed),
        ])
    return cases


@pytest.mark.parametrize("op,seed", _op_cases())
def test_randomized_gradient_sweep(op, seed):
    rng = np.random.default_rng(seed * 977 + 13)
    if op in ("add", "sub", "mul"):
        a0 = rng.standard_normal((3, 4))
        b0 = rng.standard_normal((3, 4))
        fn = getattr(T, op)

        def value(ad):
            return T.tsum(T.mul(fn(Tensor(ad), Tensor(b0)), Tensor(w))).item()

        w = rng.standard_normal((3, 4))
        a = Tensor(a0, requires_grad=True)
        T.backward(T.tsum(T.mul(fn(a, Tensor(b0)), Tensor(w))))
        grad, x0 = a.grad, a0
    elif op in ("square", "relu", "sigmoid"):
        x0 = rng.standard_normal(12) + 0.05  # nudge off the relu kink
        fn = getattr(T, "square" if op == "square" else op)

        def value(xd):
            return T.tsum(T.mul(fn(Tensor(xd)), Tensor(w))).item()

        w = rng.standard_normal(12)
        x = Tensor(x0, requires_grad=True)
        T.backward(T.tsum(T.mul(fn(x), Tensor(w))))
        grad = x.grad
    elif op in ("mean_pool", "max_pool"):
        x0 = rng.standard_normal((6, 7))
        fn = T.mean_pool_same if op == "mean_pool" else T.max_pool_same

        def value(xd):
            return T.tsum(T.mul(fn(Tensor(xd), 3), Tensor(w))).item()

        w = rng.standard_normal((6, 7))
        x = Tensor(x0, requires_grad=True)
        T.backward(T.tsum(T.mul(fn(x, 3), Tensor(w))))
        grad = x.grad
    elif op == "l2norm":
        x0 = rng.standard_normal((4, 3, 3))

        def value(xd):
            return T.tsum(T.mul(T.l2_normalize_channels(Tensor(xd)), Tensor(w))).item()

        w = rng.standard_normal((4, 3, 3))
        x = Tensor(x0, requires_grad=True)
        T.backward(T.tsum(T.mul(T.l2_normalize_channels(x), Tensor(w))))
        grad = x.grad
    else:  # conv
        x0 = rng.standard_normal((2, 6, 6))
        wgt = rng.standard_normal((3, 2, 3, 3)) * 0.5
        bias = rng.standard_normal(3) * 0.1

        def value(xd):
            y = T.conv2d(Tensor(xd), Tensor(wgt), Tensor(bias), dilation=2, padding=2)
            return T.tsum(T.mul(y, Tensor(w))).item()

        w = rng.standard_normal((3, 6, 6))
        x = Tensor(x0, requires_grad=True)
        T.backward(T.tsum(T.mul(
            T.conv2d(x, Tensor(wgt), Tensor(bias), dilation=2, padding=2), Tensor(w))))
        grad = x.grad
    numeric = numerical_gradient(value, x0, h=1e-5)
    assert max_rel_error(grad, numeric) < 1e-5


def test_deterministic_execution(rng):
    x = rng.standard_normal((3, 10, 10))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)

    def run():
        xt = Tensor(x, requires_grad=True)
        y = T.l2_normalize_channels(T.relu(T.conv2d(
            xt, Tensor(w, requires_grad=True), Tensor(b), dilation=1, padding=1)))
        loss = T.tmean(T.square(y))
        T.backward(loss)
        return loss.item(), xt.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert l1 == l2
    assert np.array_equal(g1, g2)

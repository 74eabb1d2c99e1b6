import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ehdr import ops
from ehdr.gradcheck import check_gradients
from ehdr.nn import init_conv
from ehdr.ops import ConvParams, ShapeError
from ehdr.tensor import Tensor, concat, log, no_grad, shadow64, split, stack, transpose


def naive_conv(x, w, b, stride, pad):
    """Quintuple loop reference for cross-correlation."""
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for i in range(n):
        for o in range(co):
            for y in range(ho):
                for x_ in range(wo):
                    acc = b[o] if b is not None else 0.0
                    for ci in range(c):
                        for dy in range(kh):
                            for dx in range(kw):
                                acc += w[o, ci, dy, dx] * xp[i, ci, y * stride + dy, x_ * stride + dx]
                    out[i, o, y, x_] = acc
    return out


def params(w, b=None, stride=1, pad=1):
    return ConvParams(Tensor(w, requires_grad=True), None if b is None else Tensor(b, requires_grad=True), stride, pad)


class TestTensorBasics:
    def test_sum_gradient_is_ones(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_reuse_accumulates(self, rng):
        x = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        y = x * 1.0
        (y + y).sum().backward()
        np.testing.assert_allclose(x.grad, 2.0)

    def test_non_scalar_backward_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            (x * 2.0).backward()

    def test_second_backward_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = (x * x).sum()
        loss.backward()
        with pytest.raises(RuntimeError):
            loss.backward()

    def test_non_finite_forward_is_an_error(self):
        x = Tensor(np.zeros(2), requires_grad=True)
        with pytest.raises(FloatingPointError):
            log(x)

    def test_default_dtype_and_shadow(self):
        assert Tensor([1.0, 2.0]).dtype == np.float32
        with shadow64():
            assert Tensor([1.0, 2.0]).dtype == np.float64
        assert Tensor([1.0, 2.0]).dtype == np.float32
        # floating arrays keep their precision
        assert Tensor(np.ones(2)).dtype == np.float64

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            y = x * 3.0
        assert not y.requires_grad

    def test_grad_shape_matches(self, rng):
        x = Tensor(rng.standard_normal((2, 5)), requires_grad=True)
        y = Tensor(rng.standard_normal((5,)), requires_grad=True)
        ((x * y) / (y * y + 1.0)).mean().backward()
        assert x.grad.shape == x.shape and y.grad.shape == y.shape

    def test_structural_ops_gradients(self, rng):
        with shadow64():
            a = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
            b = Tensor(rng.standard_normal((2, 2, 4)), requires_grad=True)
            r = rng.standard_normal((3, 4, 5, 2))

            def obj():
                c = concat([a, b], axis=1)
                p, q = split(c, [2, 3], axis=1)
                s = stack([p, p * q[:, :2]], axis=0)
                return (transpose(s, (1, 3, 2, 0)).reshape(2, 4, 4) * Tensor(r[:2, :, :4, 0])).sum()

            assert check_gradients("structural", obj, [a, b]).passed


class TestActivations:
    @pytest.mark.parametrize(
        "fn, x, expected",
        [
            (ops.relu, -1.0, 0.0),
            (ops.relu, 2.0, 2.0),
            (ops.sigmoid, 0.0, 0.5),
            (lambda t: ops.leaky_relu(t, 0.1), -2.0, -0.2),
            (ops.leaky_relu, -2.0, -0.2),
            (ops.tanh, 0.0, 0.0),
        ],
    )
    def test_spot_values(self, fn, x, expected):
        out = fn(Tensor(np.array([x])))
        assert out.data[0] == pytest.approx(expected, abs=1e-7)

    def test_sigmoid_is_stable_for_large_inputs(self):
        out = ops.sigmoid(Tensor(np.array([-1000.0, 1000.0])))
        np.testing.assert_array_equal(out.data, [0.0, 1.0])


class TestConv2d:
    def test_ones_center_is_nine(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        out = ops.conv2d(x, params(np.ones((1, 1, 3, 3)), np.zeros(1)))
        assert out.data[0, 0, 1, 1] == 9.0

    def test_zero_weights_give_bias(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 6, 6)))
        out = ops.conv2d(x, params(np.zeros((4, 3, 3, 3)), np.array([1.0, -2.0, 0.5, 3.0])))
        np.testing.assert_array_equal(out.data, np.broadcast_to(np.array([1.0, -2.0, 0.5, 3.0])[None, :, None, None], out.shape))

    def test_ramp_matches_loop(self):
        x = np.arange(25, dtype=np.float64).reshape(1, 1, 5, 5) / 25.0
        w = np.random.default_rng(7).standard_normal((1, 1, 3, 3))
        with shadow64():
            out = ops.conv2d(Tensor(x), params(w, np.zeros(1)))
        np.testing.assert_allclose(out.data, naive_conv(x, w, np.zeros(1), 1, 1), atol=1e-6)

    @pytest.mark.parametrize("n, c, h, w, co, k, stride, pad", [
        (1, 1, 5, 5, 1, 3, 1, 1),
        (2, 3, 7, 6, 4, 3, 1, 1),
        (2, 3, 8, 8, 2, 3, 2, 1),
        (1, 2, 6, 9, 3, 1, 1, 0),
        (1, 2, 9, 7, 2, 5, 2, 2),
        (3, 1, 4, 4, 2, 3, 1, 0),
    ])
    def test_matches_quintuple_loop(self, rng, n, c, h, w, co, k, stride, pad):
        x = rng.standard_normal((n, c, h, w)).astype(np.float32)
        wt = rng.standard_normal((co, c, k, k)).astype(np.float32)
        b = rng.standard_normal(co).astype(np.float32)
        out = ops.conv2d(Tensor(x), params(wt, b, stride, pad))
        ref = naive_conv(x.astype(np.float64), wt.astype(np.float64), b, stride, pad)
        assert out.shape == ref.shape
        assert np.abs(out.data - ref).max() < 1e-5

    def test_output_size_formula(self):
        for h, k, s, p in [(64, 3, 2, 1), (7, 3, 2, 0), (5, 5, 1, 2)]:
            assert ops.conv_output_size(h, k, s, p) == (h + 2 * p - k) // s + 1

    def test_channel_mismatch_reports_both_shapes(self):
        x = Tensor(np.ones((1, 2, 5, 5)))
        with pytest.raises(ShapeError) as exc:
            ops.conv2d(x, params(np.ones((1, 3, 3, 3))))
        assert "(1, 2, 5, 5)" in str(exc.value) and "(1, 3, 3, 3)" in str(exc.value)

    def test_too_small_input_rejected(self):
        with pytest.raises(ShapeError):
            ops.conv2d(Tensor(np.ones((1, 1, 2, 2))), params(np.ones((1, 1, 5, 5)), pad=0))

    def test_linearity(self, rng):
        x = rng.standard_normal((1, 3, 8, 8)).astype(np.float32)
        y = rng.standard_normal((1, 3, 8, 8)).astype(np.float32)
        p = params(rng.standard_normal((2, 3, 3, 3)).astype(np.float32))
        a, b = 0.7, -1.3
        lhs = ops.conv2d(Tensor(a * x + b * y), p).data
        rhs = a * ops.conv2d(Tensor(x), p).data + b * ops.conv2d(Tensor(y), p).data
        assert np.abs(lhs - rhs).max() < 1e-5

    def test_deterministic(self, rng):
        x = rng.standard_normal((2, 3, 16, 16)).astype(np.float32)
        p1 = init_conv(np.random.default_rng(3), 3, 5)
        p2 = init_conv(np.random.default_rng(3), 3, 5)
        a = ops.conv2d(Tensor(x), p1).data
        b = ops.conv2d(Tensor(x), p2).data
        assert a.tobytes() == b.tobytes()


class TestConvGradients:
    def test_weight_grad_fd_eps_1e3_shadow(self, rng):
        with shadow64():
            x = Tensor(rng.standard_normal((2, 2, 5, 5)))
            p = params(rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3))
            res = check_gradients("conv w", lambda: ops.conv2d(x, p).sum(), [p.weight, p.bias], eps=1e-3)
        assert res.rel_error < 1e-4

    def test_input_grad_fd_32bit(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 5, 5)).astype(np.float32), requires_grad=True)
        p = params(rng.standard_normal((2, 2, 3, 3)).astype(np.float32))
        r = Tensor(rng.standard_normal((1, 2, 5, 5)).astype(np.float32))
        res = check_gradients("conv x f32", lambda: (ops.conv2d(x, p) * r).sum(), [x], eps=1e-2, tol=1e-2)
        assert res.passed

    @settings(max_examples=15, deadline=None)
    @given(st.integers(1, 2), st.integers(1, 3), st.integers(3, 7), st.integers(1, 2), st.integers(0, 1))
    def test_grad_shadow_random_shapes(self, n, c, size, stride, pad):
        r = np.random.default_rng(n * 100 + c * 10 + size)
        with shadow64():
            x = Tensor(r.standard_normal((n, c, size, size)), requires_grad=True)
            p = params(r.standard_normal((2, c, 3, 3)), r.standard_normal(2), stride, pad)
            out_shape = ops.conv2d(x, p).shape
            w = Tensor(r.standard_normal(out_shape))
            res = check_gradients("conv", lambda: (ops.conv2d(x, p) * w).sum(), [x, p.weight, p.bias])
        assert res.rel_error < 1e-4


class TestBilinearSample:
    patch = np.array([[1.0, 2.0], [3.0, 4.0]])

    def test_integer_pixel(self):
        assert ops.bilinear_sample(self.patch, 1, 0) == 2.0

    def test_center_of_patch(self):
        assert ops.bilinear_sample(self.patch, 0.5, 0.5) == pytest.approx(2.5)

    def test_far_outside_is_zero(self):
        assert ops.bilinear_sample(self.patch, -10, -10) == 0.0

    def test_partially_outside_blends_with_zero(self):
        # half a pixel left of column 0 on row 0: 0.5 * 0 + 0.5 * 1
        assert ops.bilinear_sample(self.patch, -0.5, 0.0) == pytest.approx(0.5)

    def test_batched_tensor_indexing(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        assert ops.bilinear_sample(Tensor(x), 2, 3, channel=1, batch=1) == pytest.approx(x[1, 1, 3, 2], abs=1e-6)


class TestUpsample:
    def test_constant_stays_constant(self):
        out = ops.upsample_bilinear(Tensor(np.full((1, 2, 3, 5), 2.5)), 2)
        assert out.shape == (1, 2, 6, 10)
        np.testing.assert_allclose(out.data, 2.5, rtol=1e-6)

    def test_half_pixel_centres(self):
        x = Tensor(np.array([[[[0.0, 4.0]]]]))
        out = ops.upsample_bilinear(x, 2).data[0, 0, 0]
        np.testing.assert_allclose(out, [0.0, 1.0, 3.0, 4.0])

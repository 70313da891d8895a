"""Tensor-core ops against independent oracles and finite differences."""

import numpy as np
import pytest

from facefit.errors import GradientCheckError, ShapeError
from facefit.tensor_ops import (Tensor4, concat_channels, conv2d, elementwise,
                                fully_connected, global_average_pool, gradcheck,
                                interpolate, pointwise_conv, relu, split_channels)


def conv2d_loop_oracle(x, k, stride=1, dilation=1, groups=1, padding=0):
    """Direct nested-loop cross-correlation, independent of the im2col path."""
    n, cin, h, w = x.shape
    cout, cg, kh, kw = k.shape
    hout = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wout = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    xp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + w] = x
    out = np.zeros((n, cout, hout, wout))
    cog = cout // groups
    for b in range(n):
        for o in range(cout):
            g = o // cog
            for oh in range(hout):
                for ow in range(wout):
                    acc = 0.0
                    for c in range(cg):
                        for i in range(kh):
                            for j in range(kw):
                                acc += (xp[b, g * cg + c, oh * stride + i * dilation,
                                           ow * stride + j * dilation] * k[o, c, i, j])
                    out[b, o, oh, ow] = acc
    return out


def bilinear_oracle(x, th, tw):
    """Closed-form align-corners=false bilinear resampling, scalar loops."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, th, tw))
    for oy in range(th):
        sy = (oy + 0.5) * h / th - 0.5
        y0 = int(np.floor(sy))
        fy = sy - y0
        y0c, y1c = min(max(y0, 0), h - 1), min(max(y0 + 1, 0), h - 1)
        for ox in range(tw):
            sx = (ox + 0.5) * w / tw - 0.5
            x0 = int(np.floor(sx))
            fx = sx - x0
            x0c, x1c = min(max(x0, 0), w - 1), min(max(x0 + 1, 0), w - 1)
            out[:, :, oy, ox] = ((1 - fy) * ((1 - fx) * x[:, :, y0c, x0c] + fx * x[:, :, y0c, x1c])
                                 + fy * ((1 - fx) * x[:, :, y1c, x0c] + fx * x[:, :, y1c, x1c]))
    return out


def _as_grad_fn(op, *args, **kw):
    def f(*arrays):
        out, rec = op(*[Tensor4(a) for a in arrays], *args, **kw)
        return out.data, lambda g: rec.backward(g)
    return f


class TestConv2d:
    def test_ones_kernel_sums(self):
        out, _ = conv2d(Tensor4(np.ones((1, 1, 3, 3))), Tensor4(np.ones((1, 1, 3, 3))))
        assert out.data.shape == (1, 1, 1, 1)
        assert out.data.ravel()[0] == 9.0

    def test_depthwise_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 2, 4, 4))
        k = np.zeros((2, 1, 3, 3))
        k[:, 0, 1, 1] = 1.0
        out, _ = conv2d(Tensor4(x), Tensor4(k), groups=2, padding=1)
        assert np.array_equal(out.data, x)

    def test_dilated_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 4, 8, 8))
        k = rng.standard_normal((4, 4, 3, 3))
        out, _ = conv2d(Tensor4(x), Tensor4(k), dilation=2, padding=2)
        assert np.abs(out.data - conv2d_loop_oracle(x, k, dilation=2, padding=2)).max() < 1e-12

    @pytest.mark.parametrize("stride,dilation,groups,padding", [
        (1, 1, 1, 0), (2, 1, 1, 1), (1, 2, 2, 2), (2, 3, 4, 3),
    ])
    def test_matches_loop_oracle(self, stride, dilation, groups, padding):
        rng = np.random.default_rng(hash((stride, dilation, groups)) % 2**32)
        x = rng.standard_normal((2, 4, 9, 9))
        k = rng.standard_normal((8, 4 // groups, 3, 3))
        out, _ = conv2d(Tensor4(x), Tensor4(k), stride=stride, dilation=dilation,
                        groups=groups, padding=padding)
        expect = conv2d_loop_oracle(x, k, stride, dilation, groups, padding)
        assert np.abs(out.data - expect).max() < 1e-12

    def test_depthwise_equals_per_channel_correlation(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 3, 6, 6))
        k = rng.standard_normal((3, 1, 3, 3))
        out, _ = conv2d(Tensor4(x), Tensor4(k), groups=3, padding=1)
        expect = conv2d_loop_oracle(x, k, groups=3, padding=1)
        assert np.abs(out.data - expect).max() < 1e-12

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        err = gradcheck(_as_grad_fn(conv2d, stride=2, dilation=2, groups=2, padding=2),
                        [rng.standard_normal((1, 4, 7, 7)), rng.standard_normal((6, 2, 3, 3))])
        assert err < 1e-6

    def test_shape_errors(self):
        x = Tensor4(np.ones((1, 3, 4, 4)))
        with pytest.raises(ShapeError):
            conv2d(x, Tensor4(np.ones((2, 2, 3, 3))))          # channel mismatch
        with pytest.raises(ShapeError):
            conv2d(x, Tensor4(np.ones((2, 3, 3, 3))), groups=2)  # indivisible groups
        with pytest.raises(ShapeError):
            conv2d(x, Tensor4(np.ones((2, 3, 6, 6))))           # zero-sized output

    def test_determinism(self):
        rng = np.random.default_rng(4)
        x, k = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((2, 2, 3, 3))
        a, _ = conv2d(Tensor4(x), Tensor4(k), padding=1)
        b, _ = conv2d(Tensor4(x), Tensor4(k), padding=1)
        assert np.array_equal(a.data, b.data)


class TestPointwise:
    def test_channel_sum_weights(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((1, 2, 2, 2))
        out, _ = pointwise_conv(Tensor4(x), Tensor4(np.ones((1, 2, 1, 1))))
        assert np.allclose(out.data[0, 0], x[0].sum(axis=0), atol=1e-15)

    def test_identity_map(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((1, 4, 3, 3))
        out, _ = pointwise_conv(Tensor4(x), Tensor4(np.eye(4).reshape(4, 4, 1, 1)))
        assert np.array_equal(out.data, x)

    def test_matches_per_pixel_matvec(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((1, 6, 4, 4))
        k = rng.standard_normal((3, 6, 1, 1))
        out, _ = pointwise_conv(Tensor4(x), Tensor4(k))
        w = k[:, :, 0, 0]
        for r in range(4):
            for c in range(4):
                assert np.abs(out.data[0, :, r, c] - w @ x[0, :, r, c]).max() < 1e-12

    def test_rejects_spatial_kernel(self):
        with pytest.raises(ShapeError):
            pointwise_conv(Tensor4(np.ones((1, 2, 3, 3))), Tensor4(np.ones((2, 2, 3, 3))))


class TestInterpolate:
    @pytest.mark.parametrize("mode", ["nearest", "bilinear"])
    def test_constant_field(self, mode):
        out, _ = interpolate(Tensor4(np.full((1, 1, 2, 2), 2.5)), 4, 4, mode)
        assert np.all(out.data == 2.5)

    @pytest.mark.parametrize("mode", ["nearest", "bilinear"])
    def test_identity_size(self, mode):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((1, 2, 3, 5))
        out, _ = interpolate(Tensor4(x), 3, 5, mode)
        assert np.array_equal(out.data, x)

    def test_bilinear_2x2_to_4x4_closed_form(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        out, _ = interpolate(Tensor4(x), 4, 4, "bilinear")
        assert np.abs(out.data - bilinear_oracle(x, 4, 4)).max() < 1e-12

    @pytest.mark.parametrize("th,tw", [(5, 7), (2, 2), (8, 3)])
    def test_bilinear_matches_oracle(self, th, tw):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((2, 3, 4, 4))
        out, _ = interpolate(Tensor4(x), th, tw, "bilinear")
        assert np.abs(out.data - bilinear_oracle(x, th, tw)).max() < 1e-12

    def test_bilinear_backward(self):
        rng = np.random.default_rng(10)
        err = gradcheck(_as_grad_fn(interpolate, 6, 5, "bilinear"),
                        [rng.standard_normal((1, 2, 3, 4))])
        assert err < 1e-6


class TestElementwiseAndFriends:
    def test_relu_definition(self):
        out, _ = relu(Tensor4(np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3)))
        assert np.array_equal(out.data.ravel(), [0.0, 0.0, 2.0])

    def test_split_concat_roundtrip_exact(self):
        rng = np.random.default_rng(11)
        a = Tensor4(rng.standard_normal((2, 3, 4, 4)))
        b = Tensor4(rng.standard_normal((2, 3, 4, 4)))
        cat, _ = concat_channels([a, b])
        pa, pb = split_channels(cat, 2)[0]
        assert np.array_equal(pa.data, a.data)
        assert np.array_equal(pb.data, b.data)

    def test_add_backward_passes_gradient_to_both(self):
        rng = np.random.default_rng(12)
        a, b = rng.standard_normal((1, 2, 3, 3)), rng.standard_normal((1, 2, 3, 3))
        _, rec = elementwise(Tensor4(a), Tensor4(b), "add")
        g = rng.standard_normal((1, 2, 3, 3))
        ga, gb = rec.backward(g)
        assert np.array_equal(ga, g) and np.array_equal(gb, g)
        err = gradcheck(_as_grad_fn(elementwise, "add"), [a, b])
        assert err < 1e-6

    def test_no_broadcasting(self):
        with pytest.raises(ShapeError):
            elementwise(Tensor4(np.ones((1, 2, 3, 3))), Tensor4(np.ones((1, 2, 1, 1))), "add")

    def test_indivisible_split_rejected(self):
        with pytest.raises(ShapeError):
            split_channels(Tensor4(np.ones((1, 5, 2, 2))), 2)


class TestFullyConnectedAndPool:
    def test_zero_weights_yield_bias(self):
        bias = np.array([0.5, -1.5, 2.0])
        out, _ = fully_connected(np.ones(7), np.zeros((3, 7)), bias)
        assert np.array_equal(out, bias)

    def test_pool_of_constant(self):
        out, _ = global_average_pool(Tensor4(np.full((2, 3, 5, 5), 1.25)))
        assert np.all(out == 1.25)

    def test_random_layer_matches_matvec(self):
        rng = np.random.default_rng(13)
        x, w, b = rng.standard_normal(16), rng.standard_normal((8, 16)), rng.standard_normal(8)
        out, _ = fully_connected(x, w, b)
        assert np.abs(out - (w @ x + b)).max() < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            fully_connected(np.ones(3), np.ones((2, 4)), np.ones(2))


class TestGradcheck:
    def test_linear_op_is_exact(self):
        rng = np.random.default_rng(14)
        err = gradcheck(_as_grad_fn(elementwise, "add"),
                        [rng.standard_normal((1, 1, 2, 2)), rng.standard_normal((1, 1, 2, 2))])
        assert err < 1e-9

    def test_conv_passes(self):
        rng = np.random.default_rng(15)
        err = gradcheck(_as_grad_fn(conv2d, padding=1),
                        [rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((2, 2, 3, 3))])
        assert err < 1e-6

    def test_relu_away_from_kink(self):
        rng = np.random.default_rng(16)
        x = rng.standard_normal((1, 2, 4, 4))
        x[np.abs(x) < 0.1] = -0.7
        assert gradcheck(_as_grad_fn(relu), [x]) < 1e-6

    def test_bad_eps_rejected(self):
        with pytest.raises(GradientCheckError):
            gradcheck(_as_grad_fn(relu), [np.ones((1, 1, 1, 1))], eps=0.0)


class TestTensor4Invariants:
    def test_rejects_nonfinite(self):
        with pytest.raises(ShapeError):
            Tensor4(np.array([np.nan]).reshape(1, 1, 1, 1))

    def test_rejects_wrong_rank(self):
        with pytest.raises(ShapeError):
            Tensor4(np.ones((2, 2)))

    def test_ops_preserve_finiteness(self):
        rng = np.random.default_rng(17)
        x = Tensor4(rng.standard_normal((1, 2, 6, 6)) * 100)
        k = Tensor4(rng.standard_normal((4, 2, 3, 3)) * 100)
        out, _ = conv2d(x, k, padding=1)
        assert np.all(np.isfinite(out.data))

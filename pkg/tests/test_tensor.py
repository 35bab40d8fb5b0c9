import numpy as np
import pytest

from qsr import tensor
from qsr.tensor import Parameter, Tape, Tensor

from conftest import grad_check, naive_conv2d, rel_err


def t(arr):
    return Tensor(np.asarray(arr, np.float32))


class TestConv2d:
    def test_scalar_scaling_1x1(self):
        x = t([[[[1, 2], [3, 4]]]])
        w = t([[[[2.0]]]])
        y = tensor.conv2d(x, w)
        assert np.array_equal(y.data, [[[[2, 4], [6, 8]]]])

    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = t(rng.standard_normal((2, 3, 5, 7)))
        w = np.zeros((3, 3, 3, 3), np.float32)
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        y = tensor.conv2d(x, t(w))
        assert np.array_equal(y.data, x.data)

    def test_all_ones_2x2_with_3x3_kernel(self):
        x = t(np.ones((1, 1, 2, 2)))
        w = t(np.ones((1, 1, 3, 3)))
        y = tensor.conv2d(x, w)
        # hand summation: each output sees all four inputs under zero padding
        assert np.array_equal(y.data, np.full((1, 1, 2, 2), 4.0, np.float32))

    def test_channel_mismatch_error_names_dims(self):
        with pytest.raises(ValueError, match="2 channels.*expects 3"):
            tensor.conv2d(t(np.zeros((1, 2, 4, 4))), t(np.zeros((1, 3, 3, 3))))

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd square"):
            tensor.conv2d(t(np.zeros((1, 1, 4, 4))), t(np.zeros((1, 1, 2, 2))))

    def test_linearity(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 2, 6, 6)).astype(np.float32)
        y = rng.standard_normal((1, 2, 6, 6)).astype(np.float32)
        w = t(rng.standard_normal((3, 2, 3, 3)))
        lhs = tensor.conv2d(t(2.5 * x - 1.5 * y), w).data
        rhs = 2.5 * tensor.conv2d(t(x), w).data - 1.5 * tensor.conv2d(t(y), w).data
        assert rel_err(lhs, rhs) < 1e-5


class TestConv2dBackward:
    def test_identity_kernel_grad_input_ones(self):
        x = np.random.default_rng(2).standard_normal((1, 1, 4, 4)).astype(np.float32)
        w = np.zeros((1, 1, 3, 3), np.float32)
        w[0, 0, 1, 1] = 1.0
        gx, _ = tensor.conv2d_backward(np.ones((1, 1, 4, 4), np.float32), x, w)
        assert np.array_equal(gx, np.ones_like(gx))

    def test_zero_grad_out(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
        w = rng.standard_normal((2, 2, 3, 3)).astype(np.float32)
        gx, gw = tensor.conv2d_backward(np.zeros((1, 2, 4, 4), np.float32), x, w)
        assert not gx.any() and not gw.any()

    def test_grads_match_finite_differences(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
        w = rng.standard_normal((2, 2, 3, 3)).astype(np.float32)
        go = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
        gx, gw = tensor.conv2d_backward(go, x, w)

        def loss_x(xv):
            return float(np.sum(go * tensor.conv2d(t(xv), t(w)).data))

        def loss_w(wv):
            return float(np.sum(go * tensor.conv2d(t(x), t(wv)).data))

        assert rel_err(gx, grad_check(loss_x, x.copy()), floor=1e-3) < 1e-3
        assert rel_err(gw, grad_check(loss_w, w.copy()), floor=1e-3) < 1e-3


class TestPrelu:
    def test_negative_scaled(self):
        slope = Parameter(np.array([0.25], np.float32))
        y = tensor.prelu(t(np.full((1, 1, 1, 1), -2.0)), slope)
        assert y.data.item() == pytest.approx(-0.5)

    def test_positive_passthrough_and_zero(self):
        slope = Parameter(np.array([0.25], np.float32))
        y = tensor.prelu(t([[[[3.0, 0.0]]]]), slope)
        assert np.array_equal(y.data, [[[[3.0, 0.0]]]])

    def test_slope_count_mismatch(self):
        with pytest.raises(ValueError, match="2 entries for 3 channels"):
            tensor.prelu(t(np.zeros((1, 3, 2, 2))), Parameter(np.zeros(2, np.float32)))

    def test_backward_matches_fd(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 3, 4, 4)).astype(np.float32) + 0.05
        s = rng.uniform(0.1, 0.5, 3).astype(np.float32)
        go = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
        slope = Parameter(s.copy())
        xt = t(x)
        tape = Tape()
        y = tensor.prelu(xt, slope, tape)
        y.grad = go
        tape._nodes[-1]()

        def loss_x(xv):
            return float(np.sum(go * tensor.prelu(t(xv), Parameter(s)).data))

        def loss_s(sv):
            return float(np.sum(go * tensor.prelu(t(x), Parameter(sv)).data))

        assert rel_err(xt.grad, grad_check(loss_x, x.copy()), floor=1e-3) < 1e-3
        assert rel_err(slope.grad, grad_check(loss_s, s.copy()), floor=1e-3) < 1e-3


class TestPixelShuffle:
    def test_index_mapping(self):
        x = t(np.array([1, 2, 3, 4], np.float32).reshape(1, 4, 1, 1))
        y = tensor.pixel_shuffle(x, 2)
        assert np.array_equal(y.data, [[[[1, 2], [3, 4]]]])

    def test_r1_identity(self):
        x = t(np.random.default_rng(6).standard_normal((1, 3, 2, 2)))
        assert np.array_equal(tensor.pixel_shuffle(x, 1).data, x.data)

    def test_roundtrip_identity(self):
        x = t(np.random.default_rng(7).standard_normal((2, 8, 3, 5)))
        y = tensor.pixel_unshuffle(tensor.pixel_shuffle(x, 2), 2)
        assert np.array_equal(y.data, x.data)

    def test_preserves_multiset(self):
        x = t(np.random.default_rng(8).standard_normal((1, 12, 4, 4)))
        y = tensor.pixel_shuffle(x, 2)
        assert np.array_equal(np.sort(x.data.ravel()), np.sort(y.data.ravel()))

    def test_indivisible_channels(self):
        with pytest.raises(ValueError, match="not divisible"):
            tensor.pixel_shuffle(t(np.zeros((1, 3, 2, 2))), 2)

    def test_backward_is_inverse_permutation(self):
        rng = np.random.default_rng(9)
        x = t(rng.standard_normal((1, 4, 2, 2)))
        tape = Tape()
        y = tensor.pixel_shuffle(x, 2, tape)
        go = rng.standard_normal(y.shape).astype(np.float32)
        y.grad = go
        tape._nodes[-1]()
        assert np.array_equal(tensor.pixel_shuffle(t(x.grad), 2).data, go)


class TestAddScaled:
    def test_alpha_zero_returns_x(self):
        rng = np.random.default_rng(10)
        x, y = t(rng.standard_normal((1, 2, 3, 3))), t(rng.standard_normal((1, 2, 3, 3)))
        out = tensor.add_scaled(x, y, Parameter(np.zeros((), np.float32)))
        assert np.array_equal(out.data, x.data)

    def test_alpha_one_same_tensor_doubles(self):
        x = t(np.random.default_rng(11).standard_normal((1, 2, 3, 3)))
        out = tensor.add_scaled(x, x, Parameter(np.ones((), np.float32)))
        assert np.allclose(out.data, 2 * x.data)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            tensor.add_scaled(t(np.zeros((1, 2))), t(np.zeros((2, 1))),
                              Parameter(np.ones((), np.float32)))

    def test_grad_alpha_matches_fd(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((1, 2, 3, 3)).astype(np.float32)
        y = rng.standard_normal((1, 2, 3, 3)).astype(np.float32)
        go = rng.standard_normal((1, 2, 3, 3)).astype(np.float32)
        alpha = Parameter(np.array(0.7, np.float32))
        tape = Tape()
        out = tensor.add_scaled(t(x), t(y), alpha, tape)
        out.grad = go
        tape._nodes[-1]()

        def loss(a):
            return float(np.sum(go * (x + a * y)))

        fd = (loss(0.7 + 1e-4) - loss(0.7 - 1e-4)) / 2e-4
        assert abs(float(alpha.grad) - fd) / max(abs(fd), 1e-6) < 1e-4


class TestLosses:
    def test_identical_inputs_zero(self):
        x = t(np.random.default_rng(13).standard_normal((3, 3)))
        assert tensor.l1_loss(x, x.data).data == 0.0
        assert tensor.mse_loss(x, x.data).data == 0.0

    def test_constant_offset(self):
        x = np.zeros((4, 4), np.float32)
        pred = t(x + 0.5)
        assert tensor.l1_loss(pred, x).data == pytest.approx(0.5)
        assert tensor.mse_loss(pred, x).data == pytest.approx(0.25)

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            tensor.l1_loss(t(np.zeros((0,))), np.zeros((0,)))

    def test_mse_gradient_matches_fd(self):
        rng = np.random.default_rng(14)
        p = rng.standard_normal((2, 3)).astype(np.float32)
        targ = rng.standard_normal((2, 3)).astype(np.float32)
        pt = t(p)
        tape = Tape()
        loss = tensor.mse_loss(pt, targ, tape)
        tape.backward(loss)
        expected = 2.0 * (p - targ) / p.size
        assert rel_err(pt.grad, expected) < 1e-5

        def f(pv):
            return float(np.mean((pv - targ) ** 2))

        assert rel_err(pt.grad, grad_check(f, p.copy()), floor=1e-3) < 1e-3

    def test_backward_through_chain(self):
        # conv -> prelu -> mse, all gradients flow and match FD
        rng = np.random.default_rng(15)
        x = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
        w = rng.standard_normal((2, 2, 3, 3)).astype(np.float32)
        s = np.array([0.2, 0.3], np.float32)
        targ = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)

        def run(wv):
            yy = tensor.conv2d(t(x), t(wv))
            zz = tensor.prelu(yy, Parameter(s))
            return float(tensor.mse_loss(zz, targ).data)

        wt = t(w)
        tape = Tape()
        y = tensor.conv2d(t(x), wt, tape)
        z = tensor.prelu(y, Parameter(s), tape)
        loss = tensor.mse_loss(z, targ, tape)
        tape.backward(loss)
        assert rel_err(wt.grad, grad_check(run, w.copy()), floor=1e-3) < 1e-3


class TestWeightedSum:
    def test_scalar_combination_and_grads(self):
        a, b = t(np.array(2.0)), t(np.array(5.0))
        tape = Tape()
        out = tensor.weighted_sum([a, b], [1.0, 1e-4], tape)
        assert float(out.data) == pytest.approx(2.0005)
        tape.backward(out)
        assert float(a.grad) == pytest.approx(1.0)
        assert float(b.grad) == pytest.approx(1e-4)


def test_finite_check_raises():
    x = Tensor(np.array([1.0, np.nan], np.float32))
    with pytest.raises(FloatingPointError, match="non-finite"):
        x.check_finite("unit test")

import numpy as np
import pytest

from mmrb import tensor
from mmrb.errors import NonFiniteError, ShapeMismatchError
from mmrb.tensor import Tape, backward, watch

from helpers import central_diff, naive_conv2d, naive_matmul, naive_maxpool2


def grad_of(build, arrs, step=1e-6):
    """Autodiff gradient of a scalar-building function wrt each input array."""
    t = Tape()
    leaves = [watch(t, a) for a in arrs]
    root = build(*leaves)
    g = backward(t, root)
    return [g[leaf.node].data for leaf in leaves]


class TestAffine:
    def test_identity_weight(self):
        x = np.array([[1.0, -2.0], [0.25, 3.0]])
        out = tensor.affine(tensor.constant(x), tensor.constant(np.eye(2)),
                            tensor.constant(np.zeros(2)))
        np.testing.assert_array_equal(out.data, x)

    def test_hand_case_1x1(self):
        out = tensor.affine(tensor.constant([[2.0]]), tensor.constant([[3.0]]),
                            tensor.constant([1.0]))
        assert out.data[0, 0] == 7.0

    def test_matches_naive_matmul(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(4, 3))
        w = rng.normal(size=(3, 2))
        b = rng.normal(size=2)
        out = tensor.affine(tensor.constant(x), tensor.constant(w), tensor.constant(b))
        np.testing.assert_allclose(out.data, naive_matmul(x, w) + b, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            tensor.affine(tensor.constant(np.zeros((2, 3))),
                          tensor.constant(np.zeros((4, 2))),
                          tensor.constant(np.zeros(2)))

    def test_gradients_vs_finite_differences(self):
        rng = np.random.default_rng(1)
        arrs = [rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)]

        def build(x, w, b):
            return tensor.tsum(tensor.mul(tensor.affine(x, w, b), tensor.affine(x, w, b)))

        gx, gw, gb = grad_of(build, arrs)
        for got, arr, pos in zip((gx, gw, gb), arrs, range(3)):
            def f(a, pos=pos):
                vals = [v.copy() for v in arrs]
                vals[pos] = a
                out = vals[0] @ vals[1] + vals[2]
                return float((out * out).sum())
            want = central_diff(f, arrs[pos])
            np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-8)


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(2)
        x = rng.random((2, 5, 5, 3))
        k = np.zeros((1, 1, 3, 3))
        for c in range(3):
            k[0, 0, c, c] = 1.0
        out = tensor.conv2d(tensor.constant(x), tensor.constant(k),
                            tensor.constant(np.zeros(3)))
        np.testing.assert_allclose(out.data, x, atol=1e-15)

    def test_ones_kernel_counting(self):
        x = np.ones((1, 3, 3, 1))
        k = np.ones((3, 3, 1, 1))
        out = tensor.conv2d(tensor.constant(x), tensor.constant(k),
                            tensor.constant(np.zeros(1)), padding="valid")
        assert out.data.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 9.0

    @pytest.mark.parametrize("padding", ["same", "valid"])
    def test_matches_naive_loops(self, padding):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 8, 8, 2))
        k = rng.normal(size=(3, 3, 2, 4))
        b = rng.normal(size=4)
        out = tensor.conv2d(tensor.constant(x), tensor.constant(k), tensor.constant(b),
                            padding=padding)
        np.testing.assert_allclose(out.data, naive_conv2d(x, k, b, padding), atol=1e-10)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            tensor.conv2d(tensor.constant(np.zeros((1, 4, 4, 2))),
                          tensor.constant(np.zeros((3, 3, 3, 1))),
                          tensor.constant(np.zeros(1)))

    @pytest.mark.parametrize("padding", ["same", "valid"])
    def test_gradients_vs_finite_differences(self, padding):
        rng = np.random.default_rng(4)
        arrs = [rng.normal(size=(2, 6, 6, 2)), rng.normal(size=(3, 3, 2, 3)),
                rng.normal(size=3)]

        def build(x, k, b):
            out = tensor.conv2d(x, k, b, padding=padding)
            return tensor.tsum(tensor.mul(out, out))

        grads = grad_of(build, arrs)
        for pos in range(3):
            def f(a, pos=pos):
                vals = [v.copy() for v in arrs]
                vals[pos] = a
                out = naive_conv2d(vals[0], vals[1], vals[2], padding)
                return float((out * out).sum())
            want = central_diff(f, arrs[pos])
            np.testing.assert_allclose(grads[pos], want, rtol=1e-5, atol=1e-7)


class TestMaxpool2:
    def test_constant_input_ties_to_first(self):
        x = np.ones((1, 4, 4, 1))
        t = Tape()
        xt = watch(t, x)
        out = tensor.maxpool2(xt)
        np.testing.assert_array_equal(out.data, np.ones((1, 2, 2, 1)))
        g = backward(t, tensor.tsum(out))
        gx = g[xt.node].data
        # gradient concentrates on the first element of each 2x2 window
        want = np.zeros((1, 4, 4, 1))
        want[0, ::2, ::2, 0] = 1.0
        np.testing.assert_array_equal(gx, want)

    def test_window_max(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
        out = tensor.maxpool2(tensor.constant(x))
        assert out.data[0, 0, 0, 0] == 4.0

    def test_matches_window_scan(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(3, 6, 6, 2))
        out = tensor.maxpool2(tensor.constant(x))
        np.testing.assert_array_equal(out.data, naive_maxpool2(x))

    def test_odd_dims_rejected(self):
        with pytest.raises(ShapeMismatchError):
            tensor.maxpool2(tensor.constant(np.zeros((1, 3, 4, 1))))


class TestRelu:
    def test_values(self):
        out = tensor.relu(tensor.constant([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_zero_subgradient_at_negative_and_zero(self):
        t = Tape()
        x = watch(t, np.array([-1.0, 0.0, 3.0]))
        g = backward(t, tensor.tsum(tensor.relu(x)))
        np.testing.assert_array_equal(g[x.node].data, [0.0, 0.0, 1.0])

    def test_gradient_away_from_kink(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(5, 4))
        x[np.abs(x) < 1e-2] = 0.5   # keep probes off the kink

        def build(xt):
            r = tensor.relu(xt)
            return tensor.tsum(tensor.mul(r, r))

        (got,) = grad_of(build, [x])
        want = central_diff(lambda a: float((np.maximum(a, 0) ** 2).sum()), x)
        np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-9)


class TestSoftmaxXent:
    def test_uniform_logits_is_log_k(self):
        logits = np.zeros((4, 10))
        loss = tensor.softmax_xent(tensor.constant(logits), np.zeros(4, dtype=int))
        assert abs(loss.item() - np.log(10)) < 1e-12
        # the value a collapsed constant-prediction net trains to
        assert abs(loss.item() - 2.302585) < 1e-6

    def test_saturated_margin_loss_near_zero(self):
        logits = np.zeros((1, 10))
        logits[0, 3] = 50.0
        loss = tensor.softmax_xent(tensor.constant(logits), np.array([3]))
        assert loss.item() < 1e-8

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            tensor.softmax_xent(tensor.constant(np.zeros((2, 3))), np.array([0, 3]))

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(7)
        logits = rng.normal(size=(5, 7))
        y = rng.integers(0, 7, size=5)

        def build(lt):
            return tensor.softmax_xent(lt, y)

        (got,) = grad_of(build, [logits])
        want = central_diff(
            lambda a: float(tensor.xent_rows_data(a, y).mean()), logits)
        np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-9)

    def test_gradient_is_softmax_minus_onehot_over_n(self):
        rng = np.random.default_rng(8)
        logits = rng.normal(size=(6, 4))
        y = rng.integers(0, 4, size=6)
        (got,) = grad_of(lambda lt: tensor.softmax_xent(lt, y), [logits])
        p = tensor.softmax_rows(logits)
        p[np.arange(6), y] -= 1.0
        np.testing.assert_allclose(got, p / 6.0, atol=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(9)
        logits = rng.normal(size=(3, 5))
        y = np.array([0, 2, 4])
        base = tensor.softmax_xent(tensor.constant(logits), y).item()
        shifted = tensor.softmax_xent(tensor.constant(logits + 123.456), y).item()
        assert abs(base - shifted) < 1e-10


class TestBackward:
    def test_sum_gradient_all_ones(self):
        t = Tape()
        x = watch(t, np.arange(12.0).reshape(3, 4))
        g = backward(t, tensor.tsum(x))
        np.testing.assert_array_equal(g[x.node].data, np.ones((3, 4)))

    def test_half_norm_squared_gradient_is_x(self):
        rng = np.random.default_rng(10)
        xv = rng.normal(size=(4, 3))
        t = Tape()
        x = watch(t, xv)
        loss = tensor.smul(tensor.tsum(tensor.mul(x, x)), 0.5)
        g = backward(t, loss)
        np.testing.assert_allclose(g[x.node].data, xv, atol=1e-15)

    def test_root_must_be_scalar(self):
        t = Tape()
        x = watch(t, np.zeros((2, 2)))
        with pytest.raises(ValueError):
            backward(t, x)

    def test_root_from_other_tape_rejected(self):
        t1, t2 = Tape(), Tape()
        x = watch(t1, np.zeros(()))
        with pytest.raises(ValueError):
            backward(t2, x)

    def test_linearity(self):
        rng = np.random.default_rng(11)
        xv = rng.normal(size=(3, 3))
        a, b = 2.5, -1.25

        def grad_combo(ca, cb):
            t = Tape()
            x = watch(t, xv)
            l1 = tensor.tsum(tensor.mul(x, x))
            l2 = tensor.tsum(tensor.relu(x))
            combo = tensor.add(tensor.smul(l1, ca), tensor.smul(l2, cb))
            return backward(t, combo)[x.node].data

        lhs = grad_combo(a, b)
        rhs = a * grad_combo(1.0, 0.0) + b * grad_combo(0.0, 1.0)
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_forward_independent_of_recording(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(2, 6, 6, 1))
        k = rng.normal(size=(3, 3, 1, 2))
        b = rng.normal(size=2)
        plain = tensor.conv2d(tensor.constant(x), tensor.constant(k), tensor.constant(b))
        t = Tape()
        taped = tensor.conv2d(watch(t, x), watch(t, k), watch(t, b))
        np.testing.assert_array_equal(plain.data, taped.data)

    def test_non_finite_raises(self):
        with pytest.raises(NonFiniteError):
            tensor.smul(tensor.constant([1e308]), 1e308)


class TestStandardize:
    def test_mean_zero_unit_std(self):
        rng = np.random.default_rng(13)
        x = rng.random((3, 4, 4, 2))   # std well above the 1/sqrt(d) floor? check
        out = tensor.standardize_image(tensor.constant(x)).data.reshape(3, -1)
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-10)
        d = 32
        stds = x.reshape(3, -1).std(axis=1)
        for i in range(3):
            if stds[i] >= 1.0 / np.sqrt(d):
                np.testing.assert_allclose(out[i].std(), 1.0, atol=1e-10)

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(14)
        x = rng.random((2, 3, 3, 1)) * 2.0

        def build(xt):
            s = tensor.standardize_image(xt)
            return tensor.tsum(tensor.mul(s, s))

        (got,) = grad_of(build, [x])

        def f(a):
            flat = a.reshape(2, -1)
            mu = flat.mean(axis=1, keepdims=True)
            c = flat - mu
            sig = np.sqrt((c ** 2).mean(axis=1, keepdims=True))
            denom = np.maximum(sig, 1.0 / 3.0)
            return float(((c / denom) ** 2).sum())

        want = central_diff(f, x)
        np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-8)

import numpy as np
import pytest

from siameye.ops import (
    BatchNormParams,
    ConvParams,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    grad_check,
    he_conv_init,
    relu_backward,
    relu_forward,
    residual_add_backward,
    residual_add_forward,
    sgd_step,
)


def naive_conv2d(x, weights, stride, padding):
    """Direct-loop convolution oracle (zero padding)."""
    n, cin, h, w = x.shape
    cout, _, k, _ = weights.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    out = np.zeros((n, cout, oh, ow), dtype=x.dtype)
    for b in range(n):
        for co in range(cout):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(cin):
                        for ki in range(k):
                            for kj in range(k):
                                acc += (
                                    xp[b, ci, i * stride + ki, j * stride + kj]
                                    * weights[co, ci, ki, kj]
                                )
                    out[b, co, i, j] = acc
    return out


class TestConvForward:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(1, 1, 8, 8)).astype(np.float32)
        w = np.zeros((1, 1, 3, 3), dtype=np.float32)
        w[0, 0, 1, 1] = 1.0
        out = conv2d_forward(x, ConvParams(w, stride=1))
        np.testing.assert_allclose(out, x, rtol=1e-6)

    def test_ones_kernel_stride2_tap_counts(self):
        x = np.ones((1, 1, 8, 8), dtype=np.float32)
        w = np.ones((1, 1, 3, 3), dtype=np.float32)
        out = conv2d_forward(x, ConvParams(w, stride=2))
        assert out.shape == (1, 1, 4, 4)
        # corner windows overlap the zero padding on two sides
        assert out[0, 0, 0, 0] == 4.0
        assert out[0, 0, 1, 1] == 9.0
        assert out[0, 0, 2, 2] == 9.0

    @pytest.mark.parametrize("stride", [1, 2])
    def test_matches_naive_oracle(self, stride):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(1, 2, 5, 5))
        w = rng.normal(size=(4, 2, 3, 3))
        out = conv2d_forward(x, ConvParams(w, stride=stride))
        ref = naive_conv2d(x, w, stride, padding=1)
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    def test_batched_matches_naive_oracle(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(3, 4, 6, 7))
        w = rng.normal(size=(5, 4, 3, 3))
        out = conv2d_forward(x, ConvParams(w, stride=2))
        ref = naive_conv2d(x, w, 2, padding=1)
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    def test_1x1_projection(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 6, 6))
        w = rng.normal(size=(4, 3, 1, 1))
        out = conv2d_forward(x, ConvParams(w, stride=2))
        ref = naive_conv2d(x, w, 2, padding=0)
        assert out.shape == (2, 4, 3, 3)
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    def test_ceil_output_law(self):
        rng = np.random.default_rng(5)
        for h, w in [(8, 8), (9, 9), (11, 24), (5, 6)]:
            x = rng.normal(size=(1, 1, h, w)).astype(np.float32)
            k = ConvParams(rng.normal(size=(2, 1, 3, 3)).astype(np.float32), stride=2)
            out = conv2d_forward(x, k)
            assert out.shape[2:] == (-(-h // 2), -(-w // 2))

    def test_channel_mismatch_rejected(self):
        x = np.zeros((1, 2, 4, 4), dtype=np.float32)
        w = np.zeros((1, 3, 3, 3), dtype=np.float32)
        with pytest.raises(ValueError, match="channels"):
            conv2d_forward(x, ConvParams(w))

    def test_bad_kernel_rejected(self):
        with pytest.raises(ValueError, match="kernel"):
            ConvParams(np.zeros((1, 1, 2, 2)))
        with pytest.raises(ValueError, match="stride"):
            ConvParams(np.zeros((1, 1, 3, 3)), stride=3)


def fd_weight_grad(x, params, h=1e-5):
    """Central finite differences of sum(conv(x)) w.r.t. the weights."""
    w = params.weights
    grad = np.zeros_like(w)
    flat = w.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = conv2d_forward(x, params).sum()
        flat[i] = orig - h
        down = conv2d_forward(x, params).sum()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


class TestConvBackward:
    def test_zero_grad_out(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(1, 1, 4, 4))
        p = ConvParams(rng.normal(size=(2, 1, 3, 3)))
        gx, gw = conv2d_backward(np.zeros((1, 2, 4, 4)), x, p)
        assert not gx.any() and not gw.any()

    @pytest.mark.parametrize("stride", [1, 2])
    def test_weight_grad_matches_finite_differences(self, stride):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(1, 1, 4, 4))
        p = ConvParams(rng.normal(size=(2, 1, 3, 3)), stride=stride)
        out = conv2d_forward(x, p)
        gx, gw = conv2d_backward(np.ones_like(out), x, p)
        fd = fd_weight_grad(x, p)
        np.testing.assert_allclose(gw, fd, rtol=1e-4, atol=1e-8)

    def test_input_grad_matches_finite_differences(self):
        rng = np.random.default_rng(17)
        x = rng.normal(size=(1, 2, 4, 4))
        p = ConvParams(rng.normal(size=(3, 2, 3, 3)), stride=2)
        out = conv2d_forward(x, p)
        gx, _ = conv2d_backward(np.ones_like(out), x, p)
        h = 1e-5
        fd = np.zeros_like(x)
        flat = x.reshape(-1)
        fflat = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = conv2d_forward(x, p).sum()
            flat[i] = orig - h
            down = conv2d_forward(x, p).sum()
            flat[i] = orig
            fflat[i] = (up - down) / (2 * h)
        np.testing.assert_allclose(gx, fd, rtol=1e-4, atol=1e-8)

    def test_stale_context_rejected(self):
        x = np.zeros((1, 1, 4, 4))
        p = ConvParams(np.zeros((2, 1, 3, 3)))
        with pytest.raises(ValueError, match="context"):
            conv2d_backward(np.zeros((1, 2, 5, 5)), x, p)


class TestBatchNorm:
    def test_identity_on_normalized_input(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(8, 3, 4, 4))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(
            axis=(0, 2, 3), keepdims=True
        )
        p = BatchNormParams(3, dtype=np.float64)
        out, _ = batchnorm_forward(x, p, mode="train")
        # epsilon inside the variance bounds the error at |x| * eps / 2
        np.testing.assert_allclose(out, x, rtol=1e-5, atol=1e-7)

    def test_eval_affine(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        p = BatchNormParams(1, eps=0.0, dtype=np.float64)
        p.gamma[:] = 2.0
        p.beta[:] = 3.0
        out, _ = batchnorm_forward(x, p, mode="eval")
        np.testing.assert_allclose(out, 2.0 * x + 3.0, rtol=1e-12)

    def test_train_statistics(self):
        rng = np.random.default_rng(5)
        x = rng.normal(2.0, 3.0, size=(4, 3, 5, 5))
        p = BatchNormParams(3, dtype=np.float64)
        out, _ = batchnorm_forward(x, p, mode="train")
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-4)

    def test_running_stats_updated(self):
        rng = np.random.default_rng(6)
        x = rng.normal(5.0, 2.0, size=(4, 2, 4, 4))
        p = BatchNormParams(2, momentum=0.1, dtype=np.float64)
        batchnorm_forward(x, p, mode="train")
        expect_mean = 0.1 * x.mean(axis=(0, 2, 3))
        np.testing.assert_allclose(p.running_mean, expect_mean, rtol=1e-10)
        batchnorm_forward(x, p, mode="train", update_running=False)
        np.testing.assert_allclose(p.running_mean, expect_mean, rtol=1e-10)

    def test_zero_variance_stabilized(self):
        x = np.full((1, 1, 3, 3), 7.0)
        p = BatchNormParams(1, dtype=np.float64)
        out, _ = batchnorm_forward(x, p, mode="train")
        assert np.isfinite(out).all()

    def test_zero_grad_out(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 2, 3, 3))
        p = BatchNormParams(2, dtype=np.float64)
        _, ctx = batchnorm_forward(x, p, mode="train")
        gx, gg, gb = batchnorm_backward(np.zeros_like(x), ctx)
        assert not gx.any() and not gg.any() and not gb.any()

    def test_grad_beta_is_sum(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 3, 4, 4))
        g = rng.normal(size=(2, 3, 4, 4))
        p = BatchNormParams(3, dtype=np.float64)
        _, ctx = batchnorm_forward(x, p, mode="train")
        _, _, gb = batchnorm_backward(g, ctx)
        np.testing.assert_allclose(gb, g.sum(axis=(0, 2, 3)), rtol=1e-12)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(23)
        x = rng.normal(size=(2, 3, 4, 4))
        g = rng.normal(size=(2, 3, 4, 4))
        p = BatchNormParams(3, dtype=np.float64)
        p.gamma[:] = rng.normal(1.0, 0.2, size=3)
        p.beta[:] = rng.normal(size=3)

        def loss(arr):
            out, _ = batchnorm_forward(arr, p, mode="train", update_running=False)
            return (out * g).sum()

        _, ctx = batchnorm_forward(x, p, mode="train", update_running=False)
        gx, gg, gb = batchnorm_backward(g, ctx)
        h = 1e-6
        fd = np.zeros_like(x)
        flat, fflat = x.reshape(-1), fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss(x)
            flat[i] = orig - h
            down = loss(x)
            flat[i] = orig
            fflat[i] = (up - down) / (2 * h)
        np.testing.assert_allclose(gx, fd, rtol=1e-4, atol=1e-7)

    def test_missing_context_rejected(self):
        with pytest.raises(ValueError, match="context"):
            batchnorm_backward(np.zeros((1, 1, 2, 2)), None)


class TestPointwise:
    def test_relu(self):
        np.testing.assert_array_equal(
            relu_forward(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0]
        )

    def test_relu_backward_masks(self):
        g = relu_backward(np.array([5.0, 5.0]), np.array([-1.0, 2.0]))
        np.testing.assert_array_equal(g, [0.0, 5.0])

    def test_relu_backward_zero_input_blocked(self):
        g = relu_backward(np.array([3.0]), np.array([0.0]))
        np.testing.assert_array_equal(g, [0.0])

    def test_residual_add(self):
        a = np.ones((2, 2))
        np.testing.assert_array_equal(residual_add_forward(a, a), 2 * a)
        with pytest.raises(ValueError, match="shapes"):
            residual_add_forward(a, np.ones((2, 3)))

    def test_residual_add_backward_duplicates(self):
        g = np.arange(4.0).reshape(2, 2)
        ga, gb = residual_add_backward(g)
        np.testing.assert_array_equal(ga, g)
        np.testing.assert_array_equal(gb, g)


class TestSgd:
    def test_zero_grad_identity(self):
        p = np.array([1.0])
        sgd_step([p], [np.array([0.0])], lr=0.1)
        assert p[0] == 1.0

    def test_basic_step(self):
        p = np.array([1.0])
        sgd_step([p], [np.array([1.0])], lr=0.1)
        assert p[0] == pytest.approx(0.9)

    def test_weight_decay(self):
        p = np.array([2.0])
        sgd_step([p], [np.array([0.0])], lr=0.1, weight_decay=0.0001)
        assert p[0] == pytest.approx(1.99998, abs=1e-12)

    def test_lr_zero_identity(self):
        rng = np.random.default_rng(0)
        p = rng.normal(size=(3, 3))
        before = p.copy()
        sgd_step([p], [rng.normal(size=(3, 3))], lr=0.0, weight_decay=0.1)
        np.testing.assert_array_equal(p, before)

    def test_missing_grad_rejected(self):
        with pytest.raises(ValueError, match="missing gradient"):
            sgd_step([np.zeros(2)], [None], lr=0.1)


class TestGradCheck:
    def test_quadratic(self):
        p = np.array([3.0])

        def loss():
            return float(p[0] ** 2), [2.0 * p]

        assert grad_check(loss, [p]) < 1e-8

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="no parameters"):
            grad_check(lambda: (0.0, []), [])

    def test_float32_rejected(self):
        p = np.zeros(2, dtype=np.float32)
        with pytest.raises(ValueError, match="float64"):
            grad_check(lambda: (0.0, [p]), [p])

    def test_nonfinite_loss_rejected(self):
        p = np.array([1.0])
        with pytest.raises(ValueError, match="finite"):
            grad_check(lambda: (float("nan"), [p]), [p])

    def test_detects_wrong_gradient(self):
        p = np.array([3.0])

        def loss():
            return float(p[0] ** 2), [3.0 * p]  # deliberately wrong

        assert grad_check(loss, [p]) > 0.1


class TestDeterminism:
    def test_conv_deterministic(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
        p = ConvParams(he_conv_init(np.random.default_rng(1), 4, 3, 3), stride=2)
        a = conv2d_forward(x, p)
        b = conv2d_forward(x, p)
        assert np.array_equal(a, b)

    def test_he_init_seeded(self):
        a = he_conv_init(np.random.default_rng(4), 8, 4, 3)
        b = he_conv_init(np.random.default_rng(4), 8, 4, 3)
        assert np.array_equal(a, b)

    def test_ops_preserve_dtype(self):
        x32 = np.ones((1, 1, 4, 4), dtype=np.float32)
        p32 = ConvParams(np.ones((1, 1, 3, 3), dtype=np.float32))
        assert conv2d_forward(x32, p32).dtype == np.float32
        x64 = x32.astype(np.float64)
        p64 = ConvParams(np.ones((1, 1, 3, 3)))
        assert conv2d_forward(x64, p64).dtype == np.float64

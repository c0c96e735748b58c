import numpy as np
import pytest

from gridcast.nn import (BatchNorm, Conv2D, Dense, ReLU, check_gradient,
                         max_relative_error, mse_loss, numerical_gradient)

TOL = 1e-4


def rng():
    return np.random.default_rng(123)


def conv_brute_force(x, kernel, bias):
    """Direct quadruple-loop cross-correlation with zero padding."""
    b, h, w, c = x.shape
    f, _, k, _ = kernel.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    y = np.zeros((b, h, w, f))
    for bi in range(b):
        for r in range(h):
            for col in range(w):
                for fi in range(f):
                    acc = bias[fi]
                    for i in range(k):
                        for j in range(k):
                            for ci in range(c):
                                acc += xp[bi, r + i, col + j, ci] * kernel[fi, ci, i, j]
                    y[bi, r, col, fi] = acc
    return y


class TestConv2D:
    def test_identity_kernel(self):
        conv = Conv2D(2, 2, 3, rng())
        conv.kernel[...] = 0.0
        conv.kernel[0, 0, 1, 1] = 1.0
        conv.kernel[1, 1, 1, 1] = 1.0
        conv.bias[...] = 0.0
        x = rng().standard_normal((2, 5, 5, 2))
        assert np.allclose(conv.forward(x), x)

    def test_all_ones_kernel_interior(self):
        conv = Conv2D(1, 1, 3, rng())
        conv.kernel[...] = 1.0
        conv.bias[...] = 0.0
        y = conv.forward(np.full((1, 6, 6, 1), 2.5))
        assert y[0, 3, 3, 0] == pytest.approx(9 * 2.5)
        assert y[0, 0, 0, 0] == pytest.approx(4 * 2.5)  # corner sees 4 cells

    @pytest.mark.parametrize("k", [1, 3])
    def test_matches_brute_force(self, k):
        r = rng()
        conv = Conv2D(3, 4, k, r)
        x = r.standard_normal((2, 5, 6, 3))
        assert np.allclose(conv.forward(x), conv_brute_force(x, conv.kernel, conv.bias),
                           atol=1e-12)

    @pytest.mark.parametrize("k", [1, 3])
    def test_gradients_match_finite_differences(self, k):
        r = rng()
        conv = Conv2D(2, 3, k, r)
        x = r.standard_normal((2, 4, 5, 2))
        target = r.standard_normal((2, 4, 5, 3))

        def loss():
            return mse_loss(conv.forward(x.copy()), target)[0]

        _, dpred = mse_loss(conv.forward(x.copy()), target)
        dx = conv.backward(dpred)
        assert check_gradient(loss, conv.kernel, conv.grads["kernel"]) <= TOL
        assert check_gradient(loss, conv.bias, conv.grads["bias"]) <= TOL
        assert max_relative_error(dx, numerical_gradient(loss, x)) <= TOL

    def test_channel_mismatch_named(self):
        conv = Conv2D(3, 4, 3, rng())
        with pytest.raises(ValueError, match="3 input channels"):
            conv.forward(np.zeros((1, 4, 4, 2)))

    def test_param_count(self):
        assert Conv2D(1, 1, 3, rng()).n_params() == 10
        assert Conv2D(4, 8, 3, rng()).n_params() == 4 * 8 * 9 + 8
        assert Conv2D(4, 8, 1, rng()).n_params() == 4 * 8 + 8

    def test_zero_init(self):
        conv = Conv2D(2, 1, 3, rng(), zero_init=True)
        x = rng().standard_normal((1, 4, 4, 2))
        assert not conv.forward(x).any()


class TestBatchNorm:
    def test_train_normalizes(self):
        bn = BatchNorm(3)
        x = rng().standard_normal((8, 5, 5, 3)) * 4.0 + 2.0
        y = bn.forward(x, train=True)
        assert np.abs(y.mean(axis=(0, 1, 2))).max() <= 1e-7
        assert np.abs(y.var(axis=(0, 1, 2)) - 1.0).max() <= 1e-5

    def test_affine_law(self):
        bn = BatchNorm(2)
        bn.gamma[...] = 2.0
        bn.beta[...] = 3.0
        x = rng().standard_normal((16, 4, 4, 2)) * 1.7 - 0.4
        y = bn.forward(x, train=True)
        assert np.allclose(y.mean(axis=(0, 1, 2)), 3.0, atol=1e-6)
        assert np.allclose(y.std(axis=(0, 1, 2)), 2.0, atol=1e-4)

    def test_batch_of_one_train_errors(self):
        with pytest.raises(ValueError, match="batch size"):
            BatchNorm(2).forward(np.zeros((1, 4, 4, 2)), train=True)

    def test_eval_uses_running_stats(self):
        bn = BatchNorm(2)
        r = rng()
        for _ in range(300):
            bn.forward(r.standard_normal((8, 3, 3, 2)) * 3.0 + 5.0, train=True)
        y = bn.forward(np.full((1, 3, 3, 2), 5.0), train=False)
        # running stats converge to (5, 9): a mean input maps near zero
        assert np.abs(y).max() < 0.2

    def test_running_stat_update_rule(self):
        bn = BatchNorm(1, momentum=0.99)
        x = rng().standard_normal((4, 2, 2, 1))
        mu, var = x.mean(), x.var()
        bn.forward(x, train=True)
        assert bn.running_mean[0] == pytest.approx(0.01 * mu, rel=1e-10)
        assert bn.running_var[0] == pytest.approx(0.99 + 0.01 * var, rel=1e-10)

    def test_gradients_match_finite_differences_train(self):
        r = rng()
        bn = BatchNorm(3)
        bn.gamma[...] = r.uniform(0.5, 1.5, 3)
        bn.beta[...] = r.uniform(-0.5, 0.5, 3)
        x = r.standard_normal((4, 3, 3, 3))
        target = r.standard_normal((4, 3, 3, 3))

        def loss():
            return mse_loss(bn.forward(x.copy(), train=True), target)[0]

        _, dpred = mse_loss(bn.forward(x.copy(), train=True), target)
        dx = bn.backward(dpred.copy())
        assert check_gradient(loss, bn.gamma, bn.grads["gamma"]) <= TOL
        assert check_gradient(loss, bn.beta, bn.grads["beta"]) <= TOL
        assert max_relative_error(dx, numerical_gradient(loss, x)) <= TOL

    def test_gradients_match_finite_differences_eval(self):
        r = rng()
        bn = BatchNorm(2)
        bn.running_mean[...] = r.uniform(-1, 1, 2)
        bn.running_var[...] = r.uniform(0.5, 2.0, 2)
        x = r.standard_normal((3, 3, 3, 2))
        target = r.standard_normal((3, 3, 3, 2))

        def loss():
            return mse_loss(bn.forward(x.copy(), train=False), target)[0]

        _, dpred = mse_loss(bn.forward(x.copy(), train=False), target)
        dx = bn.backward(dpred.copy())
        assert max_relative_error(dx, numerical_gradient(loss, x)) <= TOL


class TestReLU:
    def test_forward_clamps(self):
        y = ReLU().forward(np.array([[-1.0, 0.0, 2.0]]))
        assert y.tolist() == [[0.0, 0.0, 2.0]]

    def test_gradient(self):
        r = rng()
        x = r.standard_normal((4, 4))
        target = r.standard_normal((4, 4))
        relu = ReLU()

        def loss():
            return mse_loss(ReLU().forward(x.copy()), target)[0]

        _, dpred = mse_loss(relu.forward(x.copy()), target)
        dx = relu.backward(dpred.copy())
        assert max_relative_error(dx, numerical_gradient(loss, x)) <= TOL


class TestDense:
    def test_gradients(self):
        r = rng()
        dense = Dense(5, 4, r)
        x = r.standard_normal((3, 5))
        target = r.standard_normal((3, 4))

        def loss():
            return mse_loss(dense.forward(x.copy()), target)[0]

        _, dpred = mse_loss(dense.forward(x.copy()), target)
        dx = dense.backward(dpred)
        assert check_gradient(loss, dense.weight, dense.grads["weight"]) <= TOL
        assert check_gradient(loss, dense.bias, dense.grads["bias"]) <= TOL
        assert max_relative_error(dx, numerical_gradient(loss, x)) <= TOL

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="5"):
            Dense(5, 2, rng()).forward(np.zeros((1, 4)))


class TestMseLoss:
    def test_equal_inputs_zero(self):
        x = rng().standard_normal((3, 4))
        loss, grad = mse_loss(x, x.copy())
        assert loss == 0.0
        assert not grad.any()

    def test_constant_half_offset(self):
        pred = np.zeros((2, 5)) + 0.5
        loss, _ = mse_loss(pred, np.zeros((2, 5)))
        assert loss == pytest.approx(0.25)

    def test_matches_scalar_loop(self):
        r = rng()
        pred, target = r.standard_normal((4, 6)), r.standard_normal((4, 6))
        loss, grad = mse_loss(pred, target)
        acc = 0.0
        for i in range(4):
            for j in range(6):
                acc += (pred[i, j] - target[i, j]) ** 2
        assert loss == pytest.approx(acc / 24, rel=1e-12)
        assert np.allclose(grad, 2 * (pred - target) / 24)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            mse_loss(np.zeros((2, 2)), np.zeros((2, 3)))

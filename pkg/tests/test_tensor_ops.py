"""Layer primitives: worked examples plus finite-difference gradient checks.

The finite-difference oracle (gradient_check) is independent of every
backward rule it verifies; tolerances assume 64-bit inputs and eps=1e-5.
"""

import numpy as np
import pytest

from lipsynth.errors import ConfigError, ShapeError
from lipsynth.tensor import (
    Tensor, activation, backward, batchnorm, concat, conv1d, conv3d,
    conv_out_len, dropout, gradient_check, linear, lstm_cell, matmul,
    maxpool3d, mean, mse, mul, relu, sigmoid, softmax, sum_, tanh,
)

rnd = np.random.default_rng(42)

GRAD_TOL = 1e-4


def _sq(t):
    return mul(t, t)


# ---------------------------------------------------------------- matmul

class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = matmul(Tensor(np.eye(2)), a)
        assert np.array_equal(out.data, a.data)

    def test_hand_product(self):
        out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert out.data.shape == (1, 1)
        assert out.data[0, 0] == 11.0

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_grad_of_sum_matches_column_sums(self):
        # d sum(a @ b) / da = row-broadcast of column-sums of b
        a = Tensor(rnd.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rnd.standard_normal((4, 2)), requires_grad=True)
        backward(sum_(matmul(a, b)))
        expected = np.tile(b.data.sum(axis=1), (3, 1))
        assert np.allclose(a.grad, expected, rtol=1e-12)

    def test_gradcheck(self):
        a = Tensor(rnd.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rnd.standard_normal((4, 2)), requires_grad=True)
        err = gradient_check(lambda: sum_(_sq(matmul(a, b))), [a, b])
        assert err < 1e-6


# ---------------------------------------------------------------- conv3d

class TestConv3d:
    def test_table_geometry_112(self):
        # kernel 5x3x3, stride [1,2,2], pad [2,0,0] on 1xTx112x112
        assert conv_out_len(112, 3, 2, 0) == 55
        for t in (1, 7, 30):
            assert conv_out_len(t, 5, 1, 2) == t
        x = Tensor(rnd.standard_normal((1, 4, 112, 112)))
        w = Tensor(rnd.standard_normal((2, 1, 5, 3, 3)) * 0.01)
        out = conv3d(x, w, None, (1, 2, 2), (2, 0, 0))
        assert out.data.shape == (2, 4, 55, 55)

    def test_zero_weights_zero_output(self):
        x = Tensor(rnd.standard_normal((2, 3, 6, 6)))
        w = Tensor(np.zeros((4, 2, 3, 3, 3)))
        b = Tensor(np.zeros(4))
        out = conv3d(x, w, b, (1, 1, 1), (1, 1, 1))
        assert np.all(out.data == 0)

    def test_unit_kernel_scales(self):
        x = Tensor(rnd.standard_normal((1, 3, 4, 4)))
        w = Tensor(np.full((1, 1, 1, 1, 1), 2.0))
        out = conv3d(x, w, None, (1, 1, 1), (0, 0, 0))
        assert np.allclose(out.data, 2.0 * x.data, rtol=0, atol=0)

    def test_invalid_geometry_raises(self):
        x = Tensor(rnd.standard_normal((1, 2, 2, 2)))
        w = Tensor(rnd.standard_normal((1, 1, 1, 5, 5)))
        with pytest.raises(ConfigError):
            conv3d(x, w, None, (1, 1, 1), (0, 0, 0))

    def test_gradcheck(self):
        x = Tensor(rnd.standard_normal((2, 4, 6, 6)), requires_grad=True)
        w = Tensor(rnd.standard_normal((3, 2, 3, 3, 3)) * 0.3, requires_grad=True)
        b = Tensor(rnd.standard_normal(3), requires_grad=True)
        err = gradient_check(
            lambda: sum_(_sq(conv3d(x, w, b, (1, 2, 2), (1, 0, 0)))), [x, w, b])
        assert err < GRAD_TOL


# ---------------------------------------------------------------- conv1d

class TestConv1d:
    def test_length_preserving_pad(self):
        x = Tensor(rnd.standard_normal((2, 9)))
        w = Tensor(rnd.standard_normal((4, 2, 31)) * 0.1)
        out = conv1d(x, w, None, 1, 15)
        assert out.data.shape == (4, 9)

    def test_gradcheck(self):
        x = Tensor(rnd.standard_normal((2, 8)), requires_grad=True)
        w = Tensor(rnd.standard_normal((3, 2, 5)) * 0.3, requires_grad=True)
        b = Tensor(rnd.standard_normal(3), requires_grad=True)
        err = gradient_check(
            lambda: sum_(_sq(conv1d(x, w, b, 1, 2))), [x, w, b])
        assert err < GRAD_TOL


# ---------------------------------------------------------------- maxpool3d

class TestMaxpool3d:
    def test_geometry_55(self):
        assert conv_out_len(55, 2, 2, 0) == 27
        x = Tensor(rnd.standard_normal((1, 2, 55, 55)))
        out = maxpool3d(x, (1, 2, 2), (1, 2, 2))
        assert out.data.shape == (1, 2, 27, 27)

    def test_hand_window(self):
        x = Tensor(np.array([[1.0, 5.0], [3.0, 2.0]]).reshape(1, 1, 2, 2))
        out = maxpool3d(x, (1, 2, 2), (1, 2, 2))
        assert out.data.reshape(-1)[0] == 5.0

    def test_tie_break_first_element(self):
        x = Tensor(np.ones((1, 1, 4, 4)), requires_grad=True)
        out = maxpool3d(x, (1, 2, 2), (1, 2, 2))
        assert np.all(out.data == 1.0)
        backward(sum_(out))
        expected = np.zeros((1, 1, 4, 4))
        expected[0, 0, ::2, ::2] = 1.0      # first (lowest flat index) per window
        assert np.array_equal(x.grad, expected)

    def test_window_too_large_raises(self):
        with pytest.raises(ConfigError):
            maxpool3d(Tensor(np.zeros((1, 1, 3, 3))), (1, 4, 4), (1, 1, 1))

    def test_gradcheck(self):
        x = Tensor(rnd.standard_normal((2, 3, 5, 5)), requires_grad=True)
        err = gradient_check(
            lambda: sum_(_sq(maxpool3d(x, (1, 2, 2), (1, 2, 2)))), [x])
        assert err < GRAD_TOL


# ---------------------------------------------------------------- batchnorm

class TestBatchnorm:
    def test_train_mode_normalizes(self):
        x = Tensor(rnd.standard_normal((5, 40)) * 3.0 + 2.0)
        gamma, beta = Tensor(np.ones(5)), Tensor(np.zeros(5))
        out = batchnorm(x, gamma, beta, np.zeros(5), np.ones(5), training=True)
        assert np.allclose(out.data.mean(axis=1), 0.0, atol=1e-5)
        assert np.allclose(out.data.var(axis=1), 1.0, atol=1e-3)

    def test_zero_gamma_gives_beta(self):
        x = Tensor(rnd.standard_normal((3, 8)))
        gamma, beta = Tensor(np.zeros(3)), Tensor(np.array([1.0, 2.0, 3.0]))
        out = batchnorm(x, gamma, beta, np.zeros(3), np.ones(3), training=True)
        assert np.allclose(out.data, beta.data[:, None] * np.ones((3, 8)))

    def test_eval_mode_matches_hand_formula(self):
        x = np.array([[0.5, -1.0, 2.0, 0.0]])
        mu, var, eps = np.array([0.25]), np.array([1.5]), 1e-5
        gamma, beta = Tensor(np.array([2.0])), Tensor(np.array([-1.0]))
        out = batchnorm(Tensor(x), gamma, beta, mu, var, training=False, eps=eps)
        expected = (x - 0.25) / np.sqrt(1.5 + eps) * 2.0 - 1.0
        assert np.allclose(out.data, expected, rtol=0, atol=1e-12)

    def test_single_element_train_raises(self):
        x = Tensor(np.zeros((3, 1)).T)      # 1 row, 3 channels on axis 1? -> use (3,1)
        x = Tensor(np.zeros((3, 1)))
        with pytest.raises(ConfigError):
            batchnorm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)),
                      np.zeros(3), np.ones(3), training=True)

    def test_running_stats_update(self):
        x = Tensor(rnd.standard_normal((2, 100)) + 5.0)
        rm, rv = np.zeros(2), np.ones(2)
        batchnorm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv,
                  training=True, momentum=0.1)
        assert np.allclose(rm, 0.1 * x.data.mean(axis=1))

    def test_gradcheck_train(self):
        # probe with a random linear functional: sum(bn * R) -- a squared
        # objective is nearly constant in x (sum of xhat^2 is ~n per channel)
        # and floods the finite differences with cancellation noise
        x = Tensor(rnd.standard_normal((4, 7)), requires_grad=True)
        gamma = Tensor(1.0 + 0.2 * rnd.standard_normal(4), requires_grad=True)
        beta = Tensor(0.1 * rnd.standard_normal(4), requires_grad=True)
        probe = Tensor(rnd.standard_normal((4, 7)))
        err = gradient_check(
            lambda: sum_(mul(batchnorm(x, gamma, beta, np.zeros(4), np.ones(4),
                                       training=True), probe)),
            [x, gamma, beta])
        assert err < GRAD_TOL

    def test_channel_axis_one(self):
        x = Tensor(rnd.standard_normal((6, 3)))
        out = batchnorm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)),
                        np.zeros(3), np.ones(3), training=True, channel_axis=1)
        assert np.allclose(out.data.mean(axis=0), 0.0, atol=1e-6)


# ---------------------------------------------------------------- lstm_cell

def _scalar_lstm_oracle(x, h, c, w_ih, w_hh, b):
    """Straight-line scalar reimplementation of the gate equations."""
    import math
    hsz = len(h)
    out_h, out_c = [], []
    for j in range(hsz):
        zi = sum(x[k] * w_ih[k][j] for k in range(len(x))) \
            + sum(h[k] * w_hh[k][j] for k in range(hsz)) + b[j]
        zf = sum(x[k] * w_ih[k][hsz + j] for k in range(len(x))) \
            + sum(h[k] * w_hh[k][hsz + j] for k in range(hsz)) + b[hsz + j]
        zg = sum(x[k] * w_ih[k][2 * hsz + j] for k in range(len(x))) \
            + sum(h[k] * w_hh[k][2 * hsz + j] for k in range(hsz)) + b[2 * hsz + j]
        zo = sum(x[k] * w_ih[k][3 * hsz + j] for k in range(len(x))) \
            + sum(h[k] * w_hh[k][3 * hsz + j] for k in range(hsz)) + b[3 * hsz + j]
        i = 1.0 / (1.0 + math.exp(-zi))
        f = 1.0 / (1.0 + math.exp(-zf))
        g = math.tanh(zg)
        o = 1.0 / (1.0 + math.exp(-zo))
        cc = f * c[j] + i * g
        out_c.append(cc)
        out_h.append(o * math.tanh(cc))
    return out_h, out_c


class TestLstmCell:
    def test_zero_weights_zero_state(self):
        x = Tensor(rnd.standard_normal((1, 4)))
        h = Tensor(np.zeros((1, 3)))
        c = Tensor(np.zeros((1, 3)))
        hh, cc = lstm_cell(x, h, c, Tensor(np.zeros((4, 12))),
                           Tensor(np.zeros((3, 12))), Tensor(np.zeros(12)))
        assert np.all(hh.data == 0) and np.all(cc.data == 0)

    def test_matches_scalar_oracle(self):
        hsz = 2
        x = [0.3, -1.1, 0.7]
        h = [0.2, -0.4]
        c = [0.1, 0.5]
        w_ih = rnd.standard_normal((3, 4 * hsz))
        w_hh = rnd.standard_normal((hsz, 4 * hsz))
        b = rnd.standard_normal(4 * hsz)
        hh, cc = lstm_cell(Tensor(np.array([x])), Tensor(np.array([h])),
                           Tensor(np.array([c])), Tensor(w_ih), Tensor(w_hh), Tensor(b))
        oh, oc = _scalar_lstm_oracle(x, h, c, w_ih.tolist(), w_hh.tolist(), b.tolist())
        assert np.allclose(hh.data[0], oh, rtol=1e-12)
        assert np.allclose(cc.data[0], oc, rtol=1e-12)

    def test_bad_weight_shapes_raise(self):
        with pytest.raises(ShapeError):
            lstm_cell(Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 3))),
                      Tensor(np.zeros((1, 3))), Tensor(np.zeros((4, 8))),
                      Tensor(np.zeros((3, 12))), Tensor(np.zeros(12)))

    def test_gradcheck_norm_squared(self):
        # moderate scale keeps gates off their saturated tails, where true
        # gradient coordinates underflow below finite-difference noise
        s = 0.5
        gen = np.random.default_rng(2024)
        x = Tensor(s * gen.standard_normal((1, 5)), requires_grad=True)
        h = Tensor(s * gen.standard_normal((1, 3)), requires_grad=True)
        c = Tensor(s * gen.standard_normal((1, 3)), requires_grad=True)
        w_ih = Tensor(s * gen.standard_normal((5, 12)), requires_grad=True)
        w_hh = Tensor(s * gen.standard_normal((3, 12)), requires_grad=True)
        b = Tensor(s * gen.standard_normal(12), requires_grad=True)

        def f():
            hh, _ = lstm_cell(x, h, c, w_ih, w_hh, b)
            return sum_(_sq(hh))

        err = gradient_check(f, [x, h, c, w_ih, w_hh, b])
        assert err < GRAD_TOL


# ---------------------------------------------------------------- activations

class TestActivations:
    def test_softmax_uniform(self):
        out = softmax(Tensor(np.zeros((1, 3))), axis=1)
        assert np.allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]])

    def test_relu_values(self):
        out = relu(Tensor(np.array([-3.0, 3.0])))
        assert np.array_equal(out.data, [0.0, 3.0])

    def test_softmax_large_logits_stable(self):
        out = softmax(Tensor(np.array([[1000.0, 1000.0]])), axis=1)
        assert np.allclose(out.data, [[0.5, 0.5]])
        assert np.all(np.isfinite(out.data))

    def test_softmax_simplex_property(self):
        x = Tensor(rnd.standard_normal((7, 5)) * 10)
        out = softmax(x, axis=1)
        assert np.all(out.data >= 0)
        assert np.allclose(out.data.sum(axis=1), 1.0, atol=1e-6)

    def test_dispatcher(self):
        x = Tensor(np.array([[0.5, -0.5]]))
        assert np.allclose(activation(x, "tanh").data, np.tanh(x.data))
        assert np.allclose(activation(x, "sigmoid").data, 1 / (1 + np.exp(-x.data)))
        assert np.allclose(activation(x, "softmax", axis=1).data.sum(), 1.0)
        with pytest.raises(ConfigError):
            activation(x, "softmax")
        with pytest.raises(ConfigError):
            activation(x, "gelu")

    def test_gradchecks(self):
        x = Tensor(rnd.standard_normal((3, 4)), requires_grad=True)
        for fn in (relu, tanh, sigmoid):
            err = gradient_check(lambda fn=fn: sum_(_sq(fn(x))), [x])
            assert err < GRAD_TOL, fn.__name__
        err = gradient_check(lambda: sum_(_sq(softmax(x, 1))), [x])
        assert err < GRAD_TOL


# ---------------------------------------------------------------- misc ops

class TestMiscOps:
    def test_linear_matches_matmul_plus_bias(self):
        x = Tensor(rnd.standard_normal((3, 4)))
        w = Tensor(rnd.standard_normal((4, 2)))
        b = Tensor(rnd.standard_normal(2))
        out = linear(x, w, b)
        assert np.allclose(out.data, x.data @ w.data + b.data)

    def test_linear_gradcheck(self):
        x = Tensor(rnd.standard_normal((3, 4)), requires_grad=True)
        w = Tensor(rnd.standard_normal((4, 2)), requires_grad=True)
        b = Tensor(rnd.standard_normal(2), requires_grad=True)
        err = gradient_check(lambda: sum_(_sq(linear(x, w, b))), [x, w, b])
        assert err < GRAD_TOL

    def test_mse_against_loop_oracle(self):
        a = rnd.standard_normal((6, 8))
        b = rnd.standard_normal((6, 8))
        acc = 0.0
        for i in range(6):
            for j in range(8):
                acc += (a[i, j] - b[i, j]) ** 2
        oracle = acc / 48.0
        out = mse(Tensor(a), b)
        assert abs(out.data - oracle) < 1e-10

    def test_concat_and_gradient(self):
        a = Tensor(rnd.standard_normal((2, 3)), requires_grad=True)
        b = Tensor(rnd.standard_normal((1, 3)), requires_grad=True)
        out = concat([a, b], axis=0)
        assert out.data.shape == (3, 3)
        backward(sum_(out))
        assert np.array_equal(a.grad, np.ones((2, 3)))
        assert np.array_equal(b.grad, np.ones((1, 3)))

    def test_dropout_inverted_scaling(self):
        x = Tensor(np.ones((100, 100)))
        rng = np.random.default_rng(7)
        out = dropout(x, 0.5, rng, active=True)
        kept = out.data != 0
        assert np.allclose(out.data[kept], 2.0)        # 1 / keep-probability
        assert abs(kept.mean() - 0.5) < 0.02
        # inactive -> identity object (eval is identity)
        same = dropout(x, 0.5, rng, active=False)
        assert same is x

    def test_mean_gradcheck(self):
        x = Tensor(rnd.standard_normal((3, 5)), requires_grad=True)
        err = gradient_check(lambda: mean(_sq(x)), [x])
        assert err < GRAD_TOL


# ---------------------------------------------------------------- gradient_check itself

class TestGradientCheckHarness:
    def test_sum_of_squares_analytic(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        loss = sum_(mul(x, x))
        backward(loss)
        assert np.allclose(x.grad, [2.0, 4.0], rtol=0, atol=1e-12)
        err = gradient_check(lambda: sum_(mul(x, x)), [x], eps=1e-5)
        assert err < 1e-8

    def test_constant_objective_zero_error(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        c = Tensor(np.array(3.0))
        err = gradient_check(lambda: sum_(mul(c, c)), [x])
        assert err == 0.0

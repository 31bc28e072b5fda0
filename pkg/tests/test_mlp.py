import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lpnkit import mlp
from lpnkit.errors import ConfigError
from lpnkit.mlp import NetParams, ParamGrads
from lpnkit.numerics import Rng, finite_diff_grad


def random_net(seed, d_in=4, hidden=6, d_out=3, bias=0.3):
    rng = Rng(seed)
    p = NetParams.init(d_in, hidden, d_out, rng, out_scale=1.0)
    p.b1[:] = bias * rng.normal(hidden)
    p.b2[:] = bias * rng.normal(hidden)
    p.b3[:] = bias * rng.normal(d_out)
    return p


def straight_line(p, x):
    """Independent evaluation of the network formula."""
    h1 = np.tanh(p.w1 @ x + p.b1)
    h2 = np.tanh(p.w2 @ h1 + p.b2)
    return p.w3 @ h2 + p.b3


def grads_close(analytic, numeric, rel=1e-4, floor=1e-7):
    assert np.all(np.abs(analytic - numeric) <= rel * np.abs(numeric) + floor), \
        np.max(np.abs(analytic - numeric))


def fd_param_grad(p, fn, h=1e-5):
    return finite_diff_grad(lambda v: fn(p.with_vector(v)), p.to_vector(), h)


class TestForward:
    def test_zero_weights_output_bias(self):
        p = NetParams.zeros(3, 4, 2)
        p.b3[:] = [1.5, -2.0]
        for x in (np.zeros(3), np.array([5.0, -1.0, 2.0])):
            np.testing.assert_array_equal(mlp.forward(p, x)[0], [1.5, -2.0])

    def test_unit_chain_at_zero(self):
        p = NetParams(np.ones((1, 1)), np.zeros(1), np.ones((1, 1)), np.zeros(1),
                      np.ones((1, 1)), np.zeros(1))
        assert mlp.forward(p, np.zeros(1))[0][0] == 0.0

    def test_matches_straight_line(self):
        p = random_net(5)
        x = Rng(6).normal(4)
        y, trace = mlp.forward(p, x)
        np.testing.assert_allclose(y, straight_line(p, x), rtol=1e-14, atol=1e-15)
        np.testing.assert_array_equal(mlp.forward(p, trace.x[0])[0], y)

    def test_batched_matches_single(self):
        p = random_net(1)
        xs = Rng(2).normal((7, 4))
        yb, _ = mlp.forward(p, xs)
        for i in range(7):
            np.testing.assert_allclose(yb[i], mlp.forward(p, xs[i])[0], rtol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            mlp.forward(random_net(0), np.zeros(5))

    def test_init_bounds_and_output_scale(self):
        p = NetParams.init(9, 16, 2, Rng(0))
        assert np.all(np.abs(p.w1) <= 1 / 3)
        assert np.all(np.abs(p.w3) <= 0.01 / 4)
        assert not np.any(p.b1) and not np.any(p.b3)


class TestBackward:
    def test_zero_cotangent(self):
        p = random_net(3)
        _, trace = mlp.forward(p, np.ones(4))
        g = mlp.backward_params(p, trace, np.zeros(3))
        assert not np.any(g.to_vector())

    def test_linear_regime_closed_form(self):
        # tanh'(0) = 1 and w1 = 0 makes hidden activations vanish: only the
        # output layer sees the input through b-terms, so dL/dw3 = dy h2^T = 0
        # and dL/db3 = dy, dL/dw1 = (W2^T W3^T dy) x^T at z = 0.
        rng = Rng(9)
        p = NetParams(np.zeros((3, 2)), np.zeros(3), rng.normal((3, 3)), np.zeros(3),
                      rng.normal((2, 3)), np.zeros(2))
        x = np.array([0.7, -1.3])
        dy = np.array([0.4, -0.2])
        _, trace = mlp.forward(p, x)
        g = mlp.backward_params(p, trace, dy)
        np.testing.assert_allclose(g.w1, np.outer(p.w2.T @ p.w3.T @ dy, x), atol=1e-15)
        np.testing.assert_allclose(g.b3, dy)
        np.testing.assert_allclose(g.w3, 0.0, atol=1e-15)

    def test_stale_trace(self):
        _, trace = mlp.forward(random_net(0, hidden=5), np.zeros(4))
        with pytest.raises(ConfigError):
            mlp.backward_params(random_net(0), trace, np.zeros(3))

    def test_random_vs_finite_differences(self):
        p = random_net(11)
        x = Rng(12).normal((3, 4))
        dy = Rng(13).normal((3, 3))
        _, trace = mlp.forward(p, x)
        g = mlp.backward_params(p, trace, dy).to_vector()
        fd = fd_param_grad(p, lambda q: float(np.sum(mlp.forward(q, x)[0] * dy)))
        grads_close(g, fd, rel=1e-5)


class TestInputJacobian:
    def test_zero_w1(self):
        p = random_net(2)
        p.w1[:] = 0.0
        _, trace = mlp.forward(p, np.ones(4))
        assert not np.any(mlp.input_jacobian(p, trace))

    def test_product_of_weights_at_zero_preactivation(self):
        p = random_net(4, bias=0.0)
        _, trace = mlp.forward(p, np.zeros(4))
        np.testing.assert_allclose(mlp.input_jacobian(p, trace), p.w3 @ p.w2 @ p.w1, rtol=1e-13, atol=1e-15)

    def test_columns_vs_finite_differences(self):
        p = random_net(8)
        x = Rng(9).normal(4)
        _, trace = mlp.forward(p, x)
        jac = mlp.input_jacobian(p, trace)
        for j in range(4):
            e = np.zeros(4)
            e[j] = 1e-5
            col = (mlp.forward(p, x + e)[0] - mlp.forward(p, x - e)[0]) / 2e-5
            grads_close(jac[:, j], col)

    def test_column_subset(self):
        p = random_net(8)
        _, trace = mlp.forward(p, Rng(1).normal(4))
        full = mlp.input_jacobian(p, trace)
        np.testing.assert_allclose(mlp.input_jacobian(p, trace, cols=[1, 3]), full[:, [1, 3]], rtol=1e-14)


class TestJacobianPenalty:
    def test_zero_w3(self):
        p = random_net(1)
        p.w3[:] = 0.0
        _, trace = mlp.forward(p, np.ones(4))
        pen, g = mlp.jacobian_penalty_grads(p, trace)
        assert pen == 0.0
        assert not np.any(g.w1)

    def test_scalar_closed_form(self):
        # a = w tanh(v x): at x = 0, J = w v, penalty (w v)^2
        w, v = 1.7, -0.6
        p = NetParams(np.array([[v]]), np.zeros(1), np.eye(1), np.zeros(1),
                      np.array([[w]]), np.zeros(1))
        # the w2 = 1 middle layer is tanh(tanh(.)) and has slope 1 at 0 as well
        _, trace = mlp.forward(p, np.zeros(1))
        pen, g = mlp.jacobian_penalty_grads(p, trace)
        assert pen == pytest.approx((w * v) ** 2, rel=1e-14)
        assert g.w3[0, 0] == pytest.approx(2 * w * v**2, rel=1e-14)
        assert g.w1[0, 0] == pytest.approx(2 * w**2 * v, rel=1e-14)

    @pytest.mark.parametrize("seed", range(3))
    def test_random_vs_finite_differences(self, seed):
        p = random_net(seed)
        x = Rng(100 + seed).normal((3, 4))

        def pen(q, cols=None):
            return mlp.jacobian_penalty_grads(q, mlp.forward(q, x)[1], cols=cols)[0]

        for cols in (None, [0, 2]):
            _, trace = mlp.forward(p, x)
            g = mlp.jacobian_penalty_grads(p, trace, cols=cols)[1].to_vector()
            grads_close(g, fd_param_grad(p, lambda q: pen(q, cols)))


class TestDirectionalPenalty:
    def test_zero_direction(self):
        p = random_net(2)
        _, trace = mlp.forward(p, np.ones(4))
        pen, g = mlp.directional_penalty_grads(p, trace, np.zeros(3))
        assert pen == 0.0 and not np.any(g.to_vector())

    def test_row_selection_matches_row_penalty(self):
        p = random_net(6)
        _, trace = mlp.forward(p, Rng(1).normal(4))
        jac = mlp.input_jacobian(p, trace)
        pen, _ = mlp.directional_penalty_grads(p, trace, np.array([0.0, 1.0, 0.0]))
        assert pen == pytest.approx(float(jac[1] @ jac[1]), rel=1e-14)

    @pytest.mark.parametrize("seed", range(3))
    def test_random_vs_finite_differences(self, seed):
        p = random_net(seed + 20)
        x = Rng(seed).normal((2, 4))
        d = Rng(seed + 1).normal((2, 3))

        def pen(q):
            return mlp.directional_penalty_grads(q, mlp.forward(q, x)[1], d, cols=[1, 2, 3])[0]

        _, trace = mlp.forward(p, x)
        g = mlp.directional_penalty_grads(p, trace, d, cols=[1, 2, 3])[1].to_vector()
        grads_close(g, fd_param_grad(p, pen))


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_penalty_gradient_property(d_in, hidden, d_out, seed):
    p = random_net(seed, d_in, hidden, d_out)
    x = Rng(seed + 1).normal(d_in)
    d = Rng(seed + 2).normal(d_out)
    _, trace = mlp.forward(p, x)
    g_j = mlp.jacobian_penalty_grads(p, trace)[1].to_vector()
    g_d = mlp.directional_penalty_grads(p, trace, d)[1].to_vector()
    fd_j = fd_param_grad(p, lambda q: mlp.jacobian_penalty_grads(q, mlp.forward(q, x)[1])[0])
    fd_d = fd_param_grad(p, lambda q: mlp.directional_penalty_grads(q, mlp.forward(q, x)[1], d)[0])
    grads_close(g_j, fd_j)
    grads_close(g_d, fd_d)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 10), st.integers(1, 10), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_full_penalty_is_sum_of_basis_directions(d_in, hidden, d_out, seed):
    p = random_net(seed, d_in, hidden, d_out)
    _, trace = mlp.forward(p, Rng(seed).normal(d_in))
    full, g_full = mlp.jacobian_penalty_grads(p, trace)
    parts = [mlp.directional_penalty_grads(p, trace, e) for e in np.eye(d_out)]
    assert full == pytest.approx(sum(pen for pen, _ in parts), rel=1e-10, abs=1e-14)
    summed = sum((g for _, g in parts[1:]), parts[0][1])
    np.testing.assert_allclose(g_full.to_vector(), summed.to_vector(), rtol=1e-10, atol=1e-14)


def test_param_vector_round_trip():
    p = random_net(0)
    q = p.with_vector(p.to_vector())
    assert q.to_vector().tobytes() == p.to_vector().tobytes()
    assert isinstance(ParamGrads.zeros_like(p), ParamGrads)

import numpy as np
import pytest
from scipy.stats import norm

from ttprogress.autodiff import (Tensor, erf, finite_diff_grad, gelu, grad,
                                 logistic, matmul, mul, no_grad, tensor, tsum)


def rel_err(a, b, floor=1e-8):
    return np.max(np.abs(a - b) / (np.abs(b) + floor))


class TestGelu:
    def test_zero_fixed_point(self):
        assert gelu(Tensor(0.0)).item() == 0.0

    def test_saturates_to_identity(self):
        assert gelu(Tensor(10.0)).item() == pytest.approx(10.0, abs=1e-9)

    def test_matches_normal_cdf(self):
        # independent oracle: x * Phi(x) via scipy's normal CDF
        assert gelu(Tensor(1.0)).item() == pytest.approx(1.0 * norm.cdf(1.0), abs=1e-12)

    def test_elementwise(self):
        x = np.array([-2.0, -0.5, 0.3, 4.0])
        got = gelu(Tensor(x)).data
        np.testing.assert_allclose(got, x * norm.cdf(x), atol=1e-12)


class TestGrad:
    def test_identity_quadratic(self):
        theta = tensor(np.array([3.0, -1.0]), requires_grad=True)
        loss = tsum(mul(theta, theta)) * Tensor(0.5)
        (g,) = grad(loss, [theta])
        np.testing.assert_array_equal(g.data, [3.0, -1.0])

    def test_constant_loss_zero_grad(self):
        theta = tensor(np.array([1.0, 2.0]), requires_grad=True)
        loss = Tensor(5.0)
        (g,) = grad(loss, [theta])
        np.testing.assert_array_equal(g.data, np.zeros(2))

    def test_disconnected_param_zero_grad(self):
        a = tensor(2.0, requires_grad=True)
        b = tensor(3.0, requires_grad=True)
        (gb,) = grad(mul(a, a), [b])
        assert gb.data == 0.0

    def test_non_scalar_loss_rejected(self):
        a = tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            grad(mul(a, a), [a])

    def test_mlp_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        x = tensor(rng.normal(size=3))
        arrays = [rng.normal(size=(4, 3)), rng.normal(size=4), rng.normal(size=(1, 4))]

        def loss_of(ts):
            h = gelu(matmul(ts[0], x) + ts[1])
            o = matmul(ts[2], h)
            return tsum(mul(o, o))

        params = [tensor(a, requires_grad=True) for a in arrays]
        gs = grad(loss_of(params), params)
        fd = finite_diff_grad(lambda arrs: loss_of([Tensor(a) for a in arrs]).item(), arrays)
        for g, f in zip(gs, fd):
            assert rel_err(g.data, f, floor=1e-6) < 1e-6

    @pytest.mark.parametrize("op", [erf, logistic, gelu])
    def test_unary_primitives_match_finite_differences(self, op):
        rng = np.random.default_rng(5)
        x_arr = rng.normal(size=6)
        x = tensor(x_arr, requires_grad=True)
        (g,) = grad(tsum(mul(op(x), op(x))), [x])
        fd = finite_diff_grad(lambda arrs: tsum(mul(op(Tensor(arrs[0])), op(Tensor(arrs[0])))).item(),
                              [x_arr])[0]
        assert rel_err(g.data, fd, floor=1e-6) < 1e-6

    def test_backward_deterministic(self):
        rng = np.random.default_rng(3)
        arrays = [rng.normal(size=(3, 3)), rng.normal(size=3)]
        x = rng.normal(size=3)

        def run():
            W = tensor(arrays[0], requires_grad=True)
            b = tensor(arrays[1], requires_grad=True)
            loss = tsum(mul(gelu(matmul(W, Tensor(x)) + b), Tensor(np.arange(3.0))))
            return [g.data.tobytes() for g in grad(loss, [W, b])]

        assert run() == run()


class TestSecondOrder:
    def test_nested_gradient_matches_composed_finite_differences(self):
        # f(theta) = g(theta - eta * grad(ell)(theta)) with cubic ell
        a = np.array([1.5, 2.0])
        eta = 0.1

        def build(theta_t):
            d = theta_t - Tensor(a)
            ell = tsum(mul(d, mul(d, d)))
            (g1,) = grad(ell, [theta_t], create_graph=True)
            theta2 = theta_t - Tensor(eta) * g1
            return tsum(mul(theta2, theta2))

        theta = tensor(np.array([0.7, -0.3]), requires_grad=True)
        (g,) = grad(build(theta), [theta])

        def composed(arrs):
            t = Tensor(arrs[0], requires_grad=True)
            return build(t).item()

        fd = finite_diff_grad(composed, [np.array([0.7, -0.3])])[0]
        assert rel_err(g.data, fd, floor=1e-6) < 1e-4


class TestFiniteDiff:
    def test_square(self):
        (g,) = finite_diff_grad(lambda arrs: float(arrs[0] ** 2), [np.array(2.0)])
        assert g == pytest.approx(4.0, abs=1e-9)

    def test_constant(self):
        (g,) = finite_diff_grad(lambda arrs: 7.0, [np.ones(4)])
        np.testing.assert_array_equal(g, np.zeros(4))


def test_tensor_rejects_non_finite():
    with pytest.raises(ValueError):
        tensor(np.array([1.0, np.nan]))
    with pytest.raises(ValueError):
        tensor(np.inf)


def test_no_grad_blocks_recording():
    a = tensor(2.0, requires_grad=True)
    with no_grad():
        out = mul(a, a)
    assert not out.requires_grad
    (g,) = grad(out, [a]) if out.data.shape == () else (None,)
    assert g.data == 0.0

"""Numerics: op semantics and gradient integrity against finite differences."""

import numpy as np
import pytest

from obda import tensor as T
from obda.errors import ConfigError, NumericError

GRAD_TOL = 1e-4


def t64(arr, requires_grad=False):
    return T.Tensor(np.asarray(arr, dtype=np.float64),
                    requires_grad=requires_grad)


def rand_params(rng, c_out, c_in, k):
    w = t64(rng.standard_normal((c_out, c_in, k, k)) * 0.3)
    b = t64(rng.standard_normal(c_out) * 0.1)
    return w, b


class TestConv2d:
    def test_shape_1x1(self, rng):
        x = t64(rng.standard_normal((8, 4, 4)))
        w, b = rand_params(rng, 2, 8, 1)
        assert T.conv2d(x, w, b).shape == (2, 4, 4)

    def test_identity_kernel_is_exact_identity(self, rng):
        c = 5
        x = t64(rng.standard_normal((c, 6, 7)))
        w = np.zeros((c, c, 1, 1))
        for i in range(c):
            w[i, i, 0, 0] = 1.0
        out = T.conv2d(x, t64(w), t64(np.zeros(c)))
        assert np.array_equal(out.data, x.data)

    def test_output_extent_arithmetic(self, rng):
        x = t64(rng.standard_normal((2, 9, 9)))
        w, b = rand_params(rng, 3, 2, 3)
        out = T.conv2d(x, w, b, stride=2, padding=1)
        assert out.shape == (3, 5, 5)  # floor((9 + 2 - 3)/2) + 1

    def test_channel_mismatch_rejected(self, rng):
        x = t64(rng.standard_normal((3, 4, 4)))
        w, b = rand_params(rng, 2, 4, 1)
        with pytest.raises(ConfigError):
            T.conv2d(x, w, b)

    @pytest.mark.parametrize("seed", range(10))
    def test_gradients_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        x0 = rng.standard_normal((3, 6, 6))
        w0 = rng.standard_normal((4, 3, 3, 3)) * 0.4
        b0 = rng.standard_normal(4) * 0.1
        probe = rng.standard_normal((4, 3, 3))

        def loss_from(x, w, b):
            out = T.conv2d(x, w, b, stride=2, padding=1)
            return T.tsum(out * probe)

        err_x = T.grad_check(
            lambda x: loss_from(x, t64(w0), t64(b0)), t64(x0))
        err_w = T.grad_check(
            lambda w: loss_from(t64(x0), w, t64(b0)), t64(w0))
        err_b = T.grad_check(
            lambda b: loss_from(t64(x0), t64(w0), b), t64(b0))
        assert err_x < GRAD_TOL and err_w < GRAD_TOL and err_b < GRAD_TOL


class TestElementwise:
    def test_subtract_self_is_exactly_zero(self, rng):
        x = t64(rng.standard_normal((4, 5)))
        assert np.all((x - x).data == 0.0)

    def test_add_zero_is_identity(self, rng):
        x = t64(rng.standard_normal((4, 5)))
        assert np.array_equal((x + 0.0).data, x.data)

    def test_shape_mismatch_rejected(self, rng):
        with pytest.raises(ConfigError):
            t64(rng.standard_normal((2, 3))) + t64(rng.standard_normal((3, 2)))

    @pytest.mark.parametrize("seed", range(10))
    def test_activation_gradient(self, seed):
        rng = np.random.default_rng(seed)
        x0 = rng.standard_normal(40) * 2.0
        err = T.grad_check(lambda x: T.tsum(T.silu(x) * T.silu(x)), t64(x0))
        assert err < GRAD_TOL

    @pytest.mark.parametrize("op", ["mul", "div", "max", "min", "sigmoid",
                                    "exp", "log"])
    def test_pointwise_gradients(self, op, rng):
        for seed in range(10):
            r = np.random.default_rng(seed)
            a0 = r.standard_normal(24)
            b0 = r.standard_normal(24) + 3.0  # keep denominators/logs safe
            probe = r.standard_normal(24)
            fns = {
                "mul": lambda a: T.tsum(a * t64(b0) * probe),
                "div": lambda a: T.tsum((a / t64(b0)) * probe),
                "max": lambda a: T.tsum(T.maximum(a, t64(b0 * 0.1)) * probe),
                "min": lambda a: T.tsum(T.minimum(a, t64(b0 * 0.1)) * probe),
                "sigmoid": lambda a: T.tsum(T.sigmoid(a) * probe),
                "exp": lambda a: T.tsum(T.exp(a) * probe),
                "log": lambda a: T.tsum(T.log(a + 5.0) * probe),
            }
            assert T.grad_check(fns[op], t64(a0)) < GRAD_TOL


class TestSoftmaxRows:
    def test_uniform_row(self):
        out = T.softmax_rows(t64(np.full((1, 4), 2.5)))
        assert np.allclose(out.data, 0.25, atol=1e-12)

    def test_hand_evaluated_row(self):
        out = T.softmax_rows(t64([[0.0, np.log(3.0)]]))
        assert np.allclose(out.data, [[0.25, 0.75]], atol=1e-12)

    def test_rows_sum_to_one_at_large_magnitude(self, rng):
        m = t64(rng.uniform(-1e3, 1e3, size=(32, 16)))
        sums = T.softmax_rows(m).data.sum(axis=1)
        assert np.all(np.abs(sums - 1.0) < 1e-9)

    def test_gradient(self):
        for seed in range(10):
            r = np.random.default_rng(seed)
            x0 = r.standard_normal((3, 5))
            probe = r.standard_normal((3, 5))
            err = T.grad_check(
                lambda x: T.tsum(T.softmax_rows(x) * probe), t64(x0))
            assert err < GRAD_TOL


class TestMatmul:
    def test_identity(self, rng):
        a = t64(rng.standard_normal((3, 4)))
        out = T.matmul(a, t64(np.eye(4)))
        assert np.allclose(out.data, a.data, atol=1e-15)

    def test_forced_arithmetic(self):
        out = T.matmul(t64([[3.0, 4.0]]), t64([[1.0], [1.0]]))
        assert out.data.tolist() == [[7.0]]

    def test_inner_extent_mismatch(self, rng):
        with pytest.raises(ConfigError):
            T.matmul(t64(rng.standard_normal((2, 3))),
                     t64(rng.standard_normal((2, 3))))

    @pytest.mark.parametrize("seed", range(10))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        a0 = rng.standard_normal((3, 4))
        b0 = rng.standard_normal((4, 2))
        probe = rng.standard_normal((3, 2))
        err_a = T.grad_check(
            lambda a: T.tsum(T.matmul(a, t64(b0)) * probe), t64(a0))
        err_b = T.grad_check(
            lambda b: T.tsum(T.matmul(t64(a0), b) * probe), t64(b0))
        assert err_a < GRAD_TOL and err_b < GRAD_TOL


class TestStructuralOps:
    @pytest.mark.parametrize("seed", range(10))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        x0 = rng.standard_normal((3, 4, 4))
        probe_up = rng.standard_normal((3, 8, 8))
        idx = rng.integers(0, 16, size=5)
        probe_g = rng.standard_normal((3, 5))

        assert T.grad_check(
            lambda x: T.tsum(T.upsample2x(x) * probe_up), t64(x0)) < GRAD_TOL
        assert T.grad_check(
            lambda x: T.tsum(T.gather_cells(x, idx) * probe_g),
            t64(x0)) < GRAD_TOL
        assert T.grad_check(
            lambda x: T.tsum(T.concat([x, x * 2.0], axis=0)),
            t64(x0)) < GRAD_TOL
        m0 = rng.standard_normal((4, 6))
        probe_r = rng.standard_normal(6)
        probe_t = rng.standard_normal((6, 4))
        assert T.grad_check(
            lambda m: T.tsum(T.take_row(m, 2) * probe_r), t64(m0)) < GRAD_TOL
        assert T.grad_check(
            lambda m: T.tsum(T.transpose2d(m) * probe_t), t64(m0)) < GRAD_TOL

    def test_loss_primitive_gradients(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            z0 = rng.standard_normal((2, 4, 4)) * 2
            targets = (rng.uniform(size=(2, 4, 4)) < 0.3).astype(np.float64)
            assert T.grad_check(
                lambda z: T.tmean(T.bce_with_logits(z, targets)),
                t64(z0)) < GRAD_TOL
            logits0 = rng.standard_normal((6, 4))
            labels = rng.integers(0, 4, size=6)
            assert T.grad_check(
                lambda z: T.tmean(T.cross_entropy_rows(z, labels)),
                t64(logits0)) < GRAD_TOL


class TestGradCheckOracle:
    def test_linear_function(self, rng):
        x0 = rng.standard_normal(12)
        assert T.grad_check(T.tsum, t64(x0)) < 1e-8

    def test_quadratic_closed_form(self, rng):
        x0 = rng.standard_normal(12)
        x = t64(x0, requires_grad=True)
        y = T.tsum(x * x)
        y.backward()
        assert np.allclose(x.grad, 2 * x0, atol=1e-12)
        assert T.grad_check(lambda v: T.tsum(v * v), t64(x0)) < 1e-6


class TestErrorStates:
    def test_non_finite_output_raises(self):
        with pytest.raises(NumericError):
            T.exp(t64([1e4]))

    def test_non_finite_input_raises(self):
        with pytest.raises(NumericError):
            T.Tensor(np.array([np.nan]))

    def test_backward_requires_scalar(self, rng):
        x = t64(rng.standard_normal((2, 2)), requires_grad=True)
        with pytest.raises(ConfigError):
            (x * x).backward()


class TestNoGrad:
    def test_no_graph_is_built(self, rng):
        x = t64(rng.standard_normal(5), requires_grad=True)
        with T.no_grad():
            y = T.silu(x * 2.0)
        assert not y.requires_grad and y._backward is None

    def test_quantize_ste_passes_gradient(self, rng):
        x0 = rng.standard_normal(20)
        x = t64(x0, requires_grad=True)
        y = T.tsum(T.quantize_ste(x))
        y.backward()
        assert np.allclose(x.grad, 1.0)

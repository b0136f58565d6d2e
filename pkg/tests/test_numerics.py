import math

import numpy as np
import pytest

import numerics as nx
from errors import ContractError, DimensionError, NumericError
from helpers import param
from numerics import Parameter, SeededRng, Tensor


class TestMatmul:
    def test_identity(self, rng):
        x = rng.normal((2, 3))
        out = nx.matmul(np.eye(2), x)
        np.testing.assert_array_equal(out.data, x)

    def test_hand_product(self):
        out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[1.0], [1.0]])
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            nx.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_gradient(self, rng):
        a, b = param(rng, 3, 4), param(rng, 4, 2)
        errors = nx.gradient_check(lambda: nx.tsum(a @ b), {"a": a, "b": b})
        assert max(errors.values()) < 1e-6


class TestSoftmax:
    def test_symmetric_pair(self):
        np.testing.assert_array_equal(nx.softmax_rows(np.zeros((1, 2))).data, [[0.5, 0.5]])

    def test_shift_invariance(self, rng):
        x = rng.normal((3, 5))
        np.testing.assert_allclose(nx.softmax_rows(x + 7.5).data, nx.softmax_rows(x).data, atol=1e-12)

    def test_matches_high_precision_sum(self):
        exps = [math.exp(v) for v in (1.0, 2.0, 3.0)]
        total = math.fsum(exps)
        expected = [e / total for e in exps]
        np.testing.assert_allclose(nx.softmax_rows(np.array([[1.0, 2.0, 3.0]])).data[0], expected, atol=1e-12)

    def test_rows_sum_to_one(self, rng):
        out = nx.softmax_rows(rng.normal((6, 9)) * 10)
        assert np.all(out.data >= 0)
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)

    def test_gradient(self, rng):
        x = param(rng, 3, 4)
        w = rng.normal((3, 4))
        errors = nx.gradient_check(lambda: nx.tsum(nx.softmax_rows(x) * w), {"x": x})
        assert errors["x"] < 1e-6


class TestLayerNorm:
    def test_constant_vector_is_zero(self):
        out = nx.layer_norm(np.full((1, 4), 2.0), np.ones(4), np.zeros(4))
        np.testing.assert_array_equal(out.data, np.zeros((1, 4)))

    def test_two_values(self):
        out = nx.layer_norm(np.array([[1.0, 3.0]]), np.ones(2), np.zeros(2), eps=1e-12)
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-9)

    def test_normalised_moments(self, rng):
        out = nx.layer_norm(rng.normal((5, 16)) * 3 + 2).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)

    def test_rejects_non_positive_eps(self):
        with pytest.raises(ContractError):
            nx.layer_norm(np.ones((1, 2)), eps=0.0)

    def test_gradient(self, rng):
        x, gamma, beta = param(rng, 3, 5), param(rng, 5), param(rng, 5)
        w = rng.normal((3, 5))
        errors = nx.gradient_check(lambda: nx.tsum(nx.layer_norm(x, gamma, beta) * w),
                                   {"x": x, "gamma": gamma, "beta": beta})
        assert max(errors.values()) < 1e-5


class TestConvolution:
    def test_unit_kernel_is_identity(self, rng):
        x = rng.normal((1, 4, 5))
        out = nx.conv2d(x, np.ones((1, 1, 1, 1)))
        np.testing.assert_array_equal(out.data, x)

    def test_all_ones_kernel_interior(self):
        out = nx.conv2d(np.full((1, 5, 5), 1.5), np.ones((1, 1, 3, 3)), padding=1)
        assert out.data[0, 2, 2] == pytest.approx(13.5)
        assert out.data[0, 0, 0] == pytest.approx(6.0)

    def test_output_shapes(self, rng):
        assert nx.conv2d(rng.normal((2, 8, 6)), rng.normal((3, 2, 3, 3)), stride=2, padding=1).shape == (3, 4, 3)
        assert nx.conv_transpose2d(rng.normal((2, 4, 3)), rng.normal((2, 3, 4, 4)), stride=2,
                                   padding=1).shape == (3, 8, 6)

    def test_channel_mismatch(self, rng):
        with pytest.raises(DimensionError):
            nx.conv2d(rng.normal((2, 4, 4)), rng.normal((1, 3, 3, 3)))

    def test_kernel_larger_than_input(self, rng):
        with pytest.raises(DimensionError):
            nx.conv2d(rng.normal((1, 2, 2)), rng.normal((1, 1, 3, 3)))

    def test_conv2d_gradient(self, rng):
        x, w, b = param(rng, 2, 5, 6), param(rng, 3, 2, 3, 3), param(rng, 3)
        target = rng.normal((3, 3, 3))
        errors = nx.gradient_check(
            lambda: nx.tsum(nx.conv2d(x, w, b, stride=2, padding=1) * target), {"x": x, "w": w, "b": b})
        assert max(errors.values()) < 1e-5

    def test_conv_transpose2d_gradient(self, rng):
        x, w, b = param(rng, 2, 3, 2), param(rng, 2, 3, 4, 4), param(rng, 3)
        target = rng.normal((3, 6, 4))
        errors = nx.gradient_check(
            lambda: nx.tsum(nx.conv_transpose2d(x, w, b, stride=2, padding=1) * target), {"x": x, "w": w, "b": b})
        assert max(errors.values()) < 1e-5


class TestElementwise:
    def test_silu_zero(self):
        assert nx.silu(np.array([0.0])).item() == 0.0

    def test_mse_of_identical_inputs(self, rng):
        x = rng.normal((3, 3))
        assert nx.mse_loss(x, x).item() == 0.0

    def test_mse_hand_value(self):
        assert nx.mse_loss(np.zeros(2), np.ones(2)).item() == 1.0

    def test_mse_shape_mismatch(self):
        with pytest.raises(DimensionError):
            nx.mse_loss(np.zeros(2), np.zeros(3))

    @pytest.mark.parametrize("op", [
        nx.exp, nx.sigmoid, nx.silu, nx.softplus, nx.square,
        lambda t: nx.log(t * t + 1.0),
        lambda t: nx.sqrt(t * t + 1.0),
        lambda t: t / (t * t + 2.0),
        lambda t: nx.transpose(t, (1, 0, 2)),
        lambda t: t[1:, ::2],
        lambda t: nx.concat([t, t * 2.0], axis=2),
        lambda t: nx.stack([t, -t], axis=1),
        lambda t: nx.mean(t, axis=(0, 2)),
        lambda t: (t - nx.mean(t, axis=1, keepdims=True)).reshape(6, 4),
    ])
    def test_gradients(self, rng, op):
        x = param(rng, 2, 3, 4)
        w = rng.normal(op(x).shape)
        errors = nx.gradient_check(lambda: nx.tsum(op(x) * w), {"x": x})
        assert errors["x"] < 1e-4


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = param(rng, 3, 2)
        nx.backward(nx.tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 2)))

    def test_mse_gradient_formula(self, rng):
        p = param(rng, 6)
        t = rng.normal(6)
        nx.backward(nx.mse_loss(p, t))
        np.testing.assert_allclose(p.grad, 2.0 * (p.data - t) / 6, atol=1e-15)

    def test_non_scalar_root(self, rng):
        with pytest.raises(ContractError):
            nx.backward(param(rng, 2) * 2.0)

    def test_gradients_accumulate(self, rng):
        x = param(rng, 4)
        loss = nx.tsum(nx.square(x))
        nx.backward(loss)
        first = x.grad.copy()
        nx.backward(loss)
        np.testing.assert_allclose(x.grad, 2.0 * first)

    def test_shared_parameter_collects_both_paths(self, rng):
        x = param(rng, 3)
        nx.backward(nx.tsum(x * 2.0 + x * 3.0))
        np.testing.assert_allclose(x.grad, np.full(3, 5.0))

    def test_no_grad_records_nothing(self, rng):
        x = param(rng, 3)
        with nx.no_grad():
            y = x * 2.0
        assert y._backward is None

    def test_parameter_grad_shape(self, rng):
        p = Parameter(rng.normal((2, 5)))
        assert p.grad.shape == p.value.shape
        assert not p.grad.any()


class TestSeededRng:
    def test_same_seed_same_draws(self):
        a, b = SeededRng(42), SeededRng(42)
        np.testing.assert_array_equal(a.normal((4, 4)), b.normal((4, 4)))
        assert a.integers(1000) == b.integers(1000)

    def test_children_are_stable_and_distinct(self):
        a, b = SeededRng(7).child("x"), SeededRng(7).child("x")
        assert a.seed == b.seed
        assert SeededRng(7).child("y").seed != a.seed

    def test_derive_seed_is_stable(self):
        assert nx.derive_seed(0, "generate/0") == nx.derive_seed(0, "generate/0")
        assert nx.derive_seed(0, "generate/0") != nx.derive_seed(1, "generate/0")


class TestDebugMode:
    def test_non_finite_values_raise(self):
        nx.set_debug(True)
        try:
            with pytest.raises(NumericError):
                Tensor([1.0, np.nan])
        finally:
            nx.set_debug(False)

    def test_release_mode_allows_non_finite(self):
        nx.set_debug(False)
        assert np.isinf(Tensor([np.inf]).data[0])

"""Tensor ops against direct-formula and finite-difference oracles."""

import numpy as np
import pytest

from petlkit.gradcheck import check_gradients
from petlkit.tensor import (
    ContractError,
    ShapeMismatchError,
    Tensor,
    backward,
    concat,
    depthwise_conv1d,
    dropout,
    gelu,
    glu,
    layer_norm,
    log_softmax,
    matmul,
    sigmoid_cross_entropy,
    softmax,
    using_dtype,
)


class TestMatmul:
    def test_identity(self):
        eye = Tensor(np.eye(2, dtype=np.float32))
        m = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32))
        assert np.array_equal(matmul(eye, m).data, m.data)

    def test_inner_product(self):
        a = Tensor(np.array([[1.0, 2.0]], dtype=np.float32))
        b = Tensor(np.array([[3.0], [4.0]], dtype=np.float32))
        assert matmul(a, b).data.tolist() == [[11.0]]

    def test_shape_error_names_both_shapes(self):
        a = Tensor(np.zeros((2, 3)))
        b = Tensor(np.zeros((4, 2)))
        with pytest.raises(ShapeMismatchError, match=r"\(2, 3\).*\(4, 2\)"):
            matmul(a, b)

    def test_backward_matches_finite_differences(self, rng):
        with using_dtype(np.float64):
            a = Tensor(rng.normal(size=(5, 4)))
            b = Tensor(rng.normal(size=(4, 3)))
            proj = rng.normal(size=(5, 3))
            check_gradients(lambda: (matmul(a, b) * Tensor(proj)).sum(), {"a": a, "b": b})

    def test_batched_backward(self, rng):
        with using_dtype(np.float64):
            a = Tensor(rng.normal(size=(2, 3, 4)))
            b = Tensor(rng.normal(size=(2, 4, 5)))
            check_gradients(lambda: (matmul(a, b) ** 2.0).sum(), {"a": a, "b": b})


class TestSoftmax:
    def test_symmetry(self):
        out = softmax(Tensor(np.array([0.0, 0.0])))
        assert np.allclose(out.data, [0.5, 0.5])

    def test_shift_invariance(self, rng):
        x = rng.normal(size=7)
        for c in (1.0, -3.5, 100.0):
            base = softmax(Tensor(x)).data
            shifted = softmax(Tensor(x + c)).data
            assert np.allclose(base, shifted, atol=1e-7)

    def test_matches_direct_formula_at_64bit(self):
        with using_dtype(np.float64):
            x = np.array([1.0, 2.0, 3.0])
            expected = np.exp(x) / np.exp(x).sum()
            assert np.abs(softmax(Tensor(x)).data - expected).max() <= 1e-12

    def test_rows_sum_to_one(self, rng):
        out = softmax(Tensor(rng.normal(size=(4, 9)).astype(np.float32)), axis=-1)
        assert np.abs(out.data.sum(axis=-1) - 1.0).max() <= 1e-6

    def test_backward(self, rng):
        with using_dtype(np.float64):
            x = Tensor(rng.normal(size=(3, 5)))
            proj = rng.normal(size=(3, 5))
            check_gradients(lambda: (softmax(x, axis=-1) * Tensor(proj)).sum(), {"x": x})


class TestLayerNorm:
    def test_constant_row_gives_zeros(self):
        x = Tensor(np.full((2, 4), 3.7, dtype=np.float32))
        gamma, beta = Tensor(np.ones(4, np.float32)), Tensor(np.zeros(4, np.float32))
        assert np.abs(layer_norm(x, gamma, beta).data).max() < 1e-6

    def test_affine_dominance(self, rng):
        x = Tensor(rng.normal(size=(3, 4)).astype(np.float32))
        gamma = Tensor(np.zeros(4, np.float32))
        beta = Tensor(np.full(4, 2.5, np.float32))
        assert np.allclose(layer_norm(x, gamma, beta).data, 2.5)

    def test_moments(self, rng):
        x = Tensor(rng.normal(size=(1, 64)).astype(np.float64))
        out = layer_norm(x, Tensor(np.ones(64)), Tensor(np.zeros(64))).data
        assert abs(out.mean()) <= 1e-6
        assert abs(out.var() - 1.0) <= 1e-4

    def test_backward(self, rng):
        with using_dtype(np.float64):
            x = Tensor(rng.normal(size=(3, 6)))
            gamma = Tensor(rng.normal(1.0, 0.1, 6))
            beta = Tensor(rng.normal(0.0, 0.1, 6))
            proj = rng.normal(size=(3, 6))
            check_gradients(
                lambda: (layer_norm(x, gamma, beta) * Tensor(proj)).sum(),
                {"x": x, "gamma": gamma, "beta": beta},
            )


class TestActivationsAndConv:
    def test_gelu_zero(self):
        assert gelu(Tensor(np.zeros(3))).data.tolist() == [0.0, 0.0, 0.0]

    def test_gelu_backward(self, rng):
        with using_dtype(np.float64):
            x = Tensor(rng.normal(size=(4, 3)))
            check_gradients(lambda: (gelu(x) ** 2.0).sum(), {"x": x})

    def test_glu_halves(self, rng):
        x = rng.normal(size=(3, 8))
        out = glu(Tensor(x))
        expected = x[:, :4] * (1.0 / (1.0 + np.exp(-x[:, 4:])))
        assert np.allclose(out.data, expected, atol=1e-6)

    def test_glu_odd_dimension_rejected(self):
        with pytest.raises(ShapeMismatchError):
            glu(Tensor(np.zeros((2, 5))))

    def test_glu_backward(self, rng):
        with using_dtype(np.float64):
            x = Tensor(rng.normal(size=(3, 6)))
            check_gradients(lambda: (glu(x) ** 2.0).sum(), {"x": x})

    def test_dropout_eval_identity(self, rng):
        x = Tensor(rng.normal(size=(4, 4)).astype(np.float32))
        assert dropout(x, 0.5, training=False) is x

    def test_dropout_train_scales_survivors(self, rng):
        x = Tensor(np.ones((100, 10), dtype=np.float32))
        out = dropout(x, 0.25, training=True, rng=np.random.default_rng(0)).data
        values = np.unique(out)
        assert len(values) == 2
        assert values[0] == 0.0
        assert values[1] == pytest.approx(1.0 / 0.75)

    def test_depthwise_identity_kernel(self, rng):
        x = Tensor(rng.normal(size=(9, 4)).astype(np.float32))
        kernel = np.zeros((5, 4), dtype=np.float32)
        kernel[2, :] = 1.0  # unit impulse at the center tap
        out = depthwise_conv1d(x, Tensor(kernel), Tensor(np.zeros(4, np.float32)))
        assert np.allclose(out.data, x.data, atol=1e-7)

    def test_depthwise_backward(self, rng):
        with using_dtype(np.float64):
            x = Tensor(rng.normal(size=(6, 3)))
            kernel = Tensor(rng.normal(size=(3, 3)))
            bias = Tensor(rng.normal(size=3))
            proj = rng.normal(size=(6, 3))
            check_gradients(
                lambda: (depthwise_conv1d(x, kernel, bias) * Tensor(proj)).sum(),
                {"x": x, "kernel": kernel, "bias": bias},
            )

    def test_sigmoid_cross_entropy_backward(self, rng):
        with using_dtype(np.float64):
            logits = Tensor(rng.normal(size=8))
            targets = rng.integers(0, 2, 8).astype(np.float64)
            check_gradients(lambda: sigmoid_cross_entropy(logits, targets).sum(), {"z": logits})

    def test_log_softmax_backward(self, rng):
        with using_dtype(np.float64):
            x = Tensor(rng.normal(size=9))
            check_gradients(lambda: -log_softmax(x)[3], {"x": x})


class TestBackward:
    def test_sum_of_linear_gives_broadcast_input(self):
        with using_dtype(np.float64):
            w = Tensor(np.zeros((3, 2)), requires_grad=True)
            x = np.array([[1.0, -2.0, 0.5]])
            loss = matmul(Tensor(x), w).sum()
            backward(loss)
            # d/dW sum(xW) broadcasts x across output columns
            assert np.allclose(w.grad, np.repeat(x.T, 2, axis=1))

    def test_unused_parameter_has_zero_gradient(self):
        from petlkit.tensor import Parameter

        used = Tensor(np.ones(3), requires_grad=True)
        unused = Parameter("unused", Tensor(np.ones(3)), trainable=True)
        backward((used * used).sum())
        assert np.array_equal(unused.grad, np.zeros(3))

    def test_gradients_accumulate_across_uses(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        loss = (x * 3.0 + x * 5.0).sum()
        backward(loss)
        assert np.allclose(x.grad, [8.0])

    def test_gradients_accumulate_across_backward_calls(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        backward((x * 3.0).sum())
        backward((x * 5.0).sum())
        assert np.allclose(x.grad, [8.0])

    def test_detached_tensor_never_receives_gradient(self):
        x = Tensor(np.ones(4), requires_grad=True)
        d = x.detach()
        y = d * 2.0
        assert not y.requires_grad
        backward((x * 1.0).sum())
        assert d.grad is None

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(4), requires_grad=True)
        with pytest.raises(ContractError):
            backward(x * 2.0)

    def test_concat_backward_routes_segments(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones((4, 3)), requires_grad=True)
        out = concat([a, b], axis=0)
        backward((out * 2.0).sum())
        assert np.allclose(a.grad, 2.0) and a.grad.shape == (2, 3)
        assert np.allclose(b.grad, 2.0) and b.grad.shape == (4, 3)

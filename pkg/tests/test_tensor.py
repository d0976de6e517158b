"""Tensor engine: elementwise ops, broadcasting, and the autodiff tape."""

import numpy as np
import pytest

from conftest import fd_gradcheck, leaf64, rand64
from rephaze.errors import ContractError, ShapeError
from rephaze.tensor import (
    Tape,
    Tensor,
    absolute,
    add,
    backward,
    clamp,
    mean_all,
    mul,
    relu,
    safe_div,
    scale,
    sigmoid,
    sum_all,
    zeros,
    ones,
)


class TestTensorBasics:
    def test_requires_4d(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((3, 4)))

    def test_rejects_zero_dim(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((1, 0, 2, 2)))

    def test_item_on_scalar(self):
        assert Tensor(np.full((1, 1, 1, 1), 2.5)).item() == 2.5

    def test_item_rejects_non_scalar(self):
        with pytest.raises(ShapeError):
            ones((1, 1, 2, 2)).item()

    def test_default_dtype_is_float32(self):
        assert Tensor([[[[1.0]]]]).dtype == np.float32


class TestAdd:
    def test_additive_identity(self):
        a = zeros((1, 1, 2, 2))
        b = ones((1, 1, 2, 2))
        np.testing.assert_array_equal(add(a, b).data, np.ones((1, 1, 2, 2), np.float32))

    def test_additive_inverse(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 3, 3)).astype(np.float32))
        out = add(x, Tensor(-x.data))
        np.testing.assert_array_equal(out.data, np.zeros_like(x.data))

    def test_matches_scalar_loop(self, rng):
        a = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
        b = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
        out = add(Tensor(a), Tensor(b)).data
        expected = np.empty_like(a)
        for idx in np.ndindex(a.shape):
            expected[idx] = a[idx] + b[idx]
        np.testing.assert_array_equal(out, expected)

    def test_broadcast_bias(self, rng):
        x = rng.standard_normal((2, 4, 3, 3)).astype(np.float32)
        bias = rng.standard_normal((1, 4, 1, 1)).astype(np.float32)
        out = add(Tensor(x), Tensor(bias)).data
        np.testing.assert_allclose(out, x + bias, rtol=0, atol=0)

    def test_incompatible_shapes_raise(self):
        with pytest.raises(ShapeError):
            add(ones((1, 2, 3, 3)), ones((1, 3, 3, 3)))

    def test_broadcast_gradient_sums(self, rng):
        x = rand64(rng, (2, 4, 3, 3))
        bias = rand64(rng, (1, 4, 1, 1))
        with Tape() as tape:
            loss = sum_all(add(x, bias))
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, np.ones_like(x.data))
        np.testing.assert_allclose(bias.grad, np.full_like(bias.data, 2 * 3 * 3))


class TestMul:
    def test_multiplicative_identity(self, rng):
        x = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
        out = mul(Tensor(x), ones((1, 2, 4, 4)))
        np.testing.assert_array_equal(out.data, x)

    def test_times_zero(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 4, 4)).astype(np.float32))
        np.testing.assert_array_equal(mul(x, zeros((1, 2, 4, 4))).data, np.zeros_like(x.data))

    def test_mask_broadcast_matches_scalar_loop(self, rng):
        mask = rng.random((2, 1, 4, 4)).astype(np.float32)
        feat = rng.standard_normal((2, 6, 4, 4)).astype(np.float32)
        out = mul(Tensor(feat), Tensor(mask)).data
        expected = np.empty_like(feat)
        for b, c, h, w in np.ndindex(feat.shape):
            expected[b, c, h, w] = feat[b, c, h, w] * mask[b, 0, h, w]
        np.testing.assert_allclose(out, expected, rtol=1e-6)

    def test_gradients(self, rng):
        a = rand64(rng, (1, 2, 3, 3))
        b = rand64(rng, (1, 2, 3, 3))
        fd_gradcheck(lambda u, v: mean_all(mul(u, v)), [a, b], rng)


class TestCommutativityAssociativity:
    def test_add_commutes(self, rng):
        a = rng.standard_normal((2, 3, 5, 5)).astype(np.float32)
        b = rng.standard_normal((2, 3, 5, 5)).astype(np.float32)
        np.testing.assert_allclose(add(Tensor(a), Tensor(b)).data, add(Tensor(b), Tensor(a)).data, atol=1e-6)

    def test_mul_commutes(self, rng):
        a = rng.standard_normal((2, 3, 5, 5)).astype(np.float32)
        b = rng.standard_normal((2, 3, 5, 5)).astype(np.float32)
        np.testing.assert_allclose(mul(Tensor(a), Tensor(b)).data, mul(Tensor(b), Tensor(a)).data, atol=1e-6)

    def test_add_associates_within_tolerance(self, rng):
        t = [Tensor(rng.standard_normal((1, 2, 4, 4)).astype(np.float32)) for _ in range(3)]
        left = add(add(t[0], t[1]), t[2]).data
        right = add(t[0], add(t[1], t[2])).data
        np.testing.assert_allclose(left, right, atol=1e-6)


class TestActivations:
    def test_relu_values(self):
        x = Tensor(np.array([[[[-1.0, 2.0]]]], dtype=np.float32))
        np.testing.assert_array_equal(relu(x).data, [[[[0.0, 2.0]]]])

    def test_sigmoid_at_zero(self):
        assert sigmoid(zeros((1, 1, 1, 1))).item() == 0.5

    def test_sigmoid_range(self, rng):
        # float32 saturates to exactly 0.0/1.0 beyond |x| ~ 17; test the
        # representable range.
        x = Tensor(rng.uniform(-15, 15, (1, 1, 8, 8)).astype(np.float32))
        out = sigmoid(x).data
        assert np.all(out > 0) and np.all(out < 1)

    def test_sigmoid_derivative_at_zero_vs_fd(self):
        # d/dx sigmoid at 0 is 0.25; checked against the central difference.
        x = leaf64(np.zeros((1, 1, 1, 1)))
        with Tape() as tape:
            loss = sum_all(sigmoid(x))
        backward(loss, tape)
        h = 1e-3
        fd = (
            sigmoid(leaf64(np.full((1, 1, 1, 1), h))).item()
            - sigmoid(leaf64(np.full((1, 1, 1, 1), -h))).item()
        ) / (2 * h)
        assert abs(x.grad.reshape(()) - 0.25) < 1e-9
        assert abs(fd - 0.25) < 1e-6

    def test_relu_subgradient_zero_at_zero(self):
        x = leaf64(np.zeros((1, 1, 2, 2)))
        with Tape() as tape:
            loss = sum_all(relu(x))
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, np.zeros_like(x.data))

    def test_gradients(self, rng):
        x = rand64(rng, (1, 2, 4, 4), lo=-2, hi=2)
        fd_gradcheck(lambda t: mean_all(sigmoid(t)), [x], rng)
        y = rand64(rng, (1, 2, 4, 4), lo=0.1, hi=2)  # keep away from the relu kink
        fd_gradcheck(lambda t: mean_all(relu(t)), [y], rng)


class TestMisc:
    def test_absolute_and_scale(self, rng):
        x = rng.standard_normal((1, 2, 3, 3)).astype(np.float32)
        np.testing.assert_array_equal(absolute(Tensor(x)).data, np.abs(x))
        np.testing.assert_allclose(scale(Tensor(x), 2.5).data, 2.5 * x, rtol=1e-6)

    def test_safe_div_zero_denominator(self):
        num = ones((1, 1, 2, 2))
        den = Tensor(np.array([[[[2.0, 0.0], [4.0, 0.0]]]], dtype=np.float32))
        out = safe_div(num, den).data
        np.testing.assert_allclose(out, [[[[0.5, 0.0], [0.25, 0.0]]]])

    def test_safe_div_gradients(self, rng):
        num = rand64(rng, (1, 1, 3, 3))
        den = rand64(rng, (1, 1, 3, 3), lo=0.5, hi=2.0)
        fd_gradcheck(lambda a, b: mean_all(safe_div(a, b)), [num, den], rng)

    def test_clamp_gradient_zero_outside(self):
        x = leaf64(np.array([[[[-1.0, 0.5, 2.0, 0.25]]]]).reshape(1, 1, 2, 2))
        with Tape() as tape:
            loss = sum_all(clamp(x, 0.0, 1.0))
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad.reshape(-1), [0.0, 1.0, 0.0, 1.0])

    def test_mean_all(self, rng):
        x = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
        assert abs(mean_all(Tensor(x)).item() - float(x.mean(dtype=np.float64))) < 1e-7


class TestBackward:
    def test_loss_must_be_scalar(self, rng):
        x = rand64(rng, (1, 1, 2, 2))
        with Tape() as tape:
            y = relu(x)
        with pytest.raises(ContractError):
            backward(y, tape)

    def test_grad_of_sum_is_ones(self, rng):
        x = rand64(rng, (2, 3, 4, 4))
        with Tape() as tape:
            loss = sum_all(x if False else add(x, zeros((2, 3, 4, 4), dtype=np.float64)))
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, np.ones_like(x.data))

    def test_grad_of_sum_of_squares_is_2x(self, rng):
        x = rand64(rng, (1, 2, 3, 3))
        with Tape() as tape:
            loss = sum_all(mul(x, x))
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-12)

    def test_fan_out_sums_gradients(self, rng):
        # The same input feeds two branches; the gradients must add.
        x = rand64(rng, (1, 1, 2, 2))
        with Tape() as tape:
            loss = sum_all(add(mul(x, x), scale(x, 3.0)))
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, 2 * x.data + 3.0, rtol=1e-12)

    def test_repeated_backward_accumulates(self, rng):
        x = rand64(rng, (1, 1, 2, 2))
        for _ in range(2):
            with Tape() as tape:
                loss = sum_all(x + zeros((1, 1, 2, 2), dtype=np.float64))
            backward(loss, tape)
        np.testing.assert_allclose(x.grad, 2 * np.ones_like(x.data))

    def test_no_recording_without_tape(self, rng):
        x = rand64(rng, (1, 1, 2, 2))
        out = mul(x, x)
        assert out.requires_grad is False

    def test_no_grad_for_non_requiring_leaves(self, rng):
        x = rand64(rng, (1, 1, 2, 2))
        c = rand64(rng, (1, 1, 2, 2), requires_grad=False)
        with Tape() as tape:
            loss = sum_all(mul(x, c))
        backward(loss, tape)
        assert c.grad is None
        np.testing.assert_allclose(x.grad, c.data)

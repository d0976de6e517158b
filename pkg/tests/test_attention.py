"""Spatial and channel attention blocks."""

import numpy as np
import pytest

from conftest import fd_gradcheck, rand64
from rephaze.attention import (
    ChannelAttentionParams,
    SpatialAttentionParams,
    channel_attention,
    channel_attention_params,
    spatial_attention,
    spatial_attention_params,
)
from rephaze.errors import ConfigError
from rephaze.layers import ConvParams, channel_max, conv2d, global_avg_pool
from rephaze.tensor import Tensor, mean_all, mul, relu, sigmoid


def zeroed(params):
    for conv in (params.conv1, params.conv2):
        conv.weight.data[:] = 0.0
        conv.bias.data[:] = 0.0
    return params


def f64_sa(rng, hidden=4):
    c1w = rand64(rng, (hidden, 1, 1, 1))
    c1b = rand64(rng, (1, hidden, 1, 1))
    c2w = rand64(rng, (1, hidden, 1, 1))
    c2b = rand64(rng, (1, 1, 1, 1))
    p = SpatialAttentionParams(ConvParams(c1w, c1b), ConvParams(c2w, c2b))
    return p, [c1w, c1b, c2w, c2b]


def f64_ca(rng, channels=4, ratio=2):
    hid = channels // ratio
    c1w = rand64(rng, (hid, channels, 1, 1))
    c1b = rand64(rng, (1, hid, 1, 1))
    c2w = rand64(rng, (channels, hid, 1, 1))
    c2b = rand64(rng, (1, channels, 1, 1))
    p = ChannelAttentionParams(ConvParams(c1w, c1b), ConvParams(c2w, c2b), ratio=ratio)
    return p, [c1w, c1b, c2w, c2b]


class TestSpatialAttention:
    def test_zero_params_halve_input(self, rng):
        p = zeroed(spatial_attention_params(8, rng))
        x = Tensor(rng.standard_normal((2, 4, 5, 5)).astype(np.float32))
        out = spatial_attention(x, p)
        np.testing.assert_allclose(out.data, 0.5 * x.data, rtol=1e-6)

    def test_zero_input_stays_zero(self, rng):
        p = spatial_attention_params(8, rng)
        x = Tensor(np.zeros((1, 3, 4, 4), np.float32))
        np.testing.assert_array_equal(spatial_attention(x, p).data, np.zeros_like(x.data))

    def test_matches_primitive_composition(self, rng):
        p = spatial_attention_params(8, rng)
        x = Tensor(rng.standard_normal((2, 6, 5, 5)).astype(np.float32))
        out = spatial_attention(x, p).data
        mask = sigmoid(conv2d(relu(conv2d(channel_max(x), p.conv1)), p.conv2))
        np.testing.assert_array_equal(out, mul(x, mask).data)

    def test_mask_shape_and_range(self, rng):
        p = spatial_attention_params(8, rng)
        x = Tensor(rng.standard_normal((2, 6, 5, 5)).astype(np.float32))
        mask = sigmoid(conv2d(relu(conv2d(channel_max(x), p.conv1)), p.conv2))
        assert mask.shape == (2, 1, 5, 5)
        assert np.all(mask.data > 0) and np.all(mask.data < 1)

    def test_never_amplifies(self, rng):
        p = spatial_attention_params(8, rng)
        for seed in range(5):
            r = np.random.default_rng(seed)
            x = Tensor(r.standard_normal((1, 4, 6, 6)).astype(np.float32))
            out = spatial_attention(x, p).data
            assert np.all(np.abs(out) <= np.abs(x.data) + 1e-7)

    def test_channel_permutation_equivariance(self, rng):
        p = spatial_attention_params(8, rng)
        x = rng.standard_normal((1, 5, 4, 4)).astype(np.float32)
        perm = rng.permutation(5)
        out = spatial_attention(Tensor(x), p).data
        out_permuted = spatial_attention(Tensor(x[:, perm]), p).data
        np.testing.assert_array_equal(out_permuted, out[:, perm])

    def test_invalid_construction(self, rng):
        good = spatial_attention_params(8, rng)
        with pytest.raises(ConfigError):
            SpatialAttentionParams(good.conv2, good.conv2)  # first conv must take 1 channel
        with pytest.raises(ConfigError):
            SpatialAttentionParams(good.conv1, good.conv1)  # second conv must emit 1 channel

    def test_gradients_flow_to_both_paths(self, rng):
        p, params = f64_sa(rng)
        x = rand64(rng, (1, 3, 4, 4))
        fd_gradcheck(lambda xx, *_: mean_all(spatial_attention(xx, p)), [x] + params, rng, n_samples=4)


class TestChannelAttention:
    def test_zero_params_halve_input(self, rng):
        p = zeroed(channel_attention_params(8, 4, rng))
        x = Tensor(rng.standard_normal((2, 8, 3, 3)).astype(np.float32))
        np.testing.assert_allclose(channel_attention(x, p).data, 0.5 * x.data, rtol=1e-6)

    def test_zero_input_stays_zero(self, rng):
        p = channel_attention_params(8, 4, rng)
        x = Tensor(np.zeros((1, 8, 3, 3), np.float32))
        np.testing.assert_array_equal(channel_attention(x, p).data, np.zeros_like(x.data))

    def test_matches_primitive_composition(self, rng):
        p = channel_attention_params(16, 8, rng)
        x = Tensor(rng.standard_normal((2, 16, 4, 4)).astype(np.float32))
        out = channel_attention(x, p).data
        w = sigmoid(conv2d(relu(conv2d(global_avg_pool(x), p.conv1)), p.conv2))
        assert w.shape == (2, 16, 1, 1)
        np.testing.assert_array_equal(out, mul(x, w).data)

    def test_never_amplifies(self, rng):
        p = channel_attention_params(8, 4, rng)
        x = Tensor(rng.standard_normal((2, 8, 5, 5)).astype(np.float32))
        out = channel_attention(x, p).data
        assert np.all(np.abs(out) <= np.abs(x.data) + 1e-7)

    def test_ratio_must_divide_channels(self, rng):
        with pytest.raises(ConfigError):
            channel_attention_params(10, 4, rng)

    def test_gradients(self, rng):
        p, params = f64_ca(rng)
        x = rand64(rng, (1, 4, 3, 3))
        fd_gradcheck(lambda xx, *_: mean_all(channel_attention(xx, p)), [x] + params, rng, n_samples=4)

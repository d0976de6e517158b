"""Convolutional and normalization building blocks.

All operations are differentiable through the tape in :mod:`rephaze.tensor`.
Convolution is cross-correlation (no kernel flip) computed as im2col plus a
matrix product; the inner products accumulate in float64 and results are
stored back in the input dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor, record_op

__all__ = [
    "ConvParams",
    "BNParams",
    "conv_params",
    "bn_params",
    "conv2d",
    "batch_norm",
    "reflection_pad",
    "channel_max",
    "channel_min",
    "global_avg_pool",
    "bilinear_upsample",
    "downsample2",
    "gaussian_blur",
    "BLUR_KERNEL_1D",
]

_SUPPORTED_KERNELS = (1, 3, 7)


@dataclass
class ConvParams:
    """Weights and geometry for one convolution.

    ``weight`` has shape (out_channels, in_channels, k, k); ``bias`` is kept
    as a (1, out_channels, 1, 1) tensor so that it broadcasts directly and
    serializes like every other record (its length equals out_channels).
    """

    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0
    padding_mode: str = "zeros"

    def __post_init__(self):
        o, i, kh, kw = self.weight.shape
        if kh != kw or kh not in _SUPPORTED_KERNELS:
            raise ConfigError(f"square kernels of size {_SUPPORTED_KERNELS} only, got {kh}x{kw}")
        if self.bias.shape != (1, o, 1, 1):
            raise ShapeError(f"bias must be (1,{o},1,1), got {self.bias.shape}")
        if self.stride < 1 or self.padding < 0:
            raise ConfigError("stride must be >= 1 and padding >= 0")
        if self.padding_mode not in ("zeros", "reflection"):
            raise ConfigError(f"unknown padding_mode {self.padding_mode!r}")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    def n_parameters(self) -> int:
        return self.weight.data.size + self.bias.data.size


def conv_params(
    in_channels: int,
    out_channels: int,
    kernel_size: int,
    rng: np.random.Generator,
    stride: int = 1,
    padding: int = 0,
    padding_mode: str = "zeros",
    init: str = "he",
) -> ConvParams:
    """Construct trainable convolution parameters.

    ``init`` is "he" (normal, std sqrt(2/fan_in)) or "zeros" (used for the
    residual tail so a fresh model starts as the identity restoration).
    """
    shape = (out_channels, in_channels, kernel_size, kernel_size)
    if init == "he":
        std = np.sqrt(2.0 / (in_channels * kernel_size * kernel_size))
        w = rng.normal(0.0, std, size=shape).astype(np.float32)
    elif init == "zeros":
        w = np.zeros(shape, dtype=np.float32)
    else:
        raise ConfigError(f"unknown init {init!r}")
    weight = Tensor(w, requires_grad=True)
    bias = Tensor(np.zeros((1, out_channels, 1, 1), dtype=np.float32), requires_grad=True)
    return ConvParams(weight, bias, stride=stride, padding=padding, padding_mode=padding_mode)


@dataclass
class BNParams:
    """Per-channel batch normalization state.

    ``gamma``/``beta`` are trainable tensors of shape (1, C, 1, 1);
    ``running_mean``/``running_var`` are plain float64 buffers updated in
    train mode and consumed in eval mode.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    mode: str = "train"

    def __post_init__(self):
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if not 0 < self.momentum < 1:
            raise ConfigError("momentum must lie in (0, 1)")
        if np.any(self.running_var < 0):
            raise ConfigError("running_var must be non-negative")
        if self.mode not in ("train", "eval"):
            raise ConfigError(f"unknown mode {self.mode!r}")

    @property
    def channels(self) -> int:
        return self.gamma.shape[1]

    def n_parameters(self) -> int:
        return self.gamma.data.size + self.beta.data.size


def bn_params(channels: int, eps: float = 1e-5, momentum: float = 0.1) -> BNParams:
    gamma = Tensor(np.ones((1, channels, 1, 1), dtype=np.float32), requires_grad=True)
    beta = Tensor(np.zeros((1, channels, 1, 1), dtype=np.float32), requires_grad=True)
    return BNParams(
        gamma,
        beta,
        running_mean=np.zeros(channels, dtype=np.float64),
        running_var=np.ones(channels, dtype=np.float64),
        eps=eps,
        momentum=momentum,
    )


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


# The im2col matrices are built and multiplied slab by slab so that the
# float64 working set stays cache-resident; accumulation is float64 while
# tensor storage stays float32.
_SLAB_BYTES = 4 << 20


def _slab_rows(c_kk: int, out_w: int) -> int:
    per_row = c_kk * out_w * 8
    return max(1, _SLAB_BYTES // max(per_row, 1))


def _fill_cols(cbuf: np.ndarray, xpad: np.ndarray, k: int, stride: int, r0: int, n: int, out_w: int) -> None:
    # cbuf has shape (B, C, k, k, n, out_w); rows r0..r0+n of the output.
    for i in range(k):
        for j in range(k):
            cbuf[:, :, i, j] = xpad[
                :, :, r0 * stride + i : r0 * stride + i + stride * n : stride, j : j + stride * out_w : stride
            ]


def _conv_forward(xd: np.ndarray, wd: np.ndarray, bd: np.ndarray, stride: int, pad: int) -> np.ndarray:
    b, c, h, w = xd.shape
    o, _, k, _ = wd.shape
    out_h = (h + 2 * pad - k) // stride + 1
    out_w = (w + 2 * pad - k) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ContractError(f"input {h}x{w} too small for kernel {k} with stride {stride}, padding {pad}")
    xpad = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    kk = c * k * k
    wmat = wd.reshape(o, kk).astype(np.float64, copy=False)
    bias = bd.reshape(1, o, 1).astype(np.float64, copy=False)
    rows = min(_slab_rows(kk, out_w), out_h)
    y = np.empty((b, o, out_h, out_w), dtype=xd.dtype)
    cbuf = np.empty((b, c, k, k, rows, out_w), dtype=np.float64)
    for r0 in range(0, out_h, rows):
        n = min(rows, out_h - r0)
        slab = cbuf[:, :, :, :, :n]
        _fill_cols(slab, xpad, k, stride, r0, n, out_w)
        ymat = np.matmul(wmat, slab.reshape(b, kk, n * out_w))
        ymat += bias
        y[:, :, r0 : r0 + n] = ymat.reshape(b, o, n, out_w)
    return y


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """2-D cross-correlation with bias, differentiable in x, weight and bias."""
    if x.shape[1] != p.in_channels:
        raise ShapeError(f"conv2d expects {p.in_channels} input channels, got {x.shape[1]}")
    if p.padding_mode == "reflection" and p.padding > 0:
        x = reflection_pad(x, p.padding)
        pad = 0
    else:
        pad = p.padding
    stride, k = p.stride, p.kernel_size
    xd, w, bias = x.data, p.weight, p.bias
    out = _conv_forward(xd, w.data, bias.data, stride, pad)

    def bwd(g):
        b, c = xd.shape[0], xd.shape[1]
        o = w.shape[0]
        out_h, out_w = g.shape[2], g.shape[3]
        kk = c * k * k
        xpad = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
        wmat = w.data.reshape(o, kk).astype(np.float64, copy=False)
        gw = np.zeros((o, kk), dtype=np.float64)
        gpad = np.zeros(xpad.shape, dtype=np.float64)
        rows = min(_slab_rows(kk, out_w), out_h)
        cbuf = np.empty((b, c, k, k, rows, out_w), dtype=np.float64)
        for r0 in range(0, out_h, rows):
            n = min(rows, out_h - r0)
            slab = cbuf[:, :, :, :, :n]
            _fill_cols(slab, xpad, k, stride, r0, n, out_w)
            cols = slab.reshape(b, kk, n * out_w)
            gy = g[:, :, r0 : r0 + n].astype(np.float64, copy=False).reshape(b, o, n * out_w)
            gw += np.einsum("bop,bkp->ok", gy, cols, optimize=True)
            gcols = np.matmul(wmat.transpose(), gy).reshape(b, c, k, k, n, out_w)
            for i in range(k):
                for j in range(k):
                    gpad[
                        :, :, r0 * stride + i : r0 * stride + i + stride * n : stride, j : j + stride * out_w : stride
                    ] += gcols[:, :, i, j]
        gb = g.sum(axis=(0, 2, 3), dtype=np.float64)
        gx = gpad[:, :, pad : pad + xd.shape[2], pad : pad + xd.shape[3]] if pad else gpad
        return (
            gx.astype(xd.dtype),
            gw.reshape(w.shape).astype(w.dtype),
            gb.reshape(bias.shape).astype(bias.dtype),
        )

    return record_op((x, w, bias), out, bwd)


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------


def batch_norm(x: Tensor, p: BNParams) -> Tensor:
    """Per-channel batch normalization.

    Train mode normalizes by the batch statistics (biased variance) and
    updates the running buffers with ``momentum``; eval mode normalizes by
    the running statistics, which makes the whole layer a per-channel
    affine map (the property branch fusion relies on).
    """
    if x.shape[1] != p.channels:
        raise ShapeError(f"batch_norm expects {p.channels} channels, got {x.shape[1]}")
    xd = x.data
    gamma, beta = p.gamma, p.beta
    cview = (1, p.channels, 1, 1)

    if p.mode == "train":
        n = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mu = xd.mean(axis=(0, 2, 3), dtype=np.float64)
        var = xd.var(axis=(0, 2, 3), dtype=np.float64)
        inv = 1.0 / np.sqrt(var + p.eps)
        xhat = ((xd - mu.reshape(cview)) * inv.reshape(cview)).astype(xd.dtype)
        out = gamma.data * xhat + beta.data
        # Running buffers track the unbiased variance estimate.
        unbiased = var * (n / max(n - 1, 1))
        p.running_mean *= 1.0 - p.momentum
        p.running_mean += p.momentum * mu
        p.running_var *= 1.0 - p.momentum
        p.running_var += p.momentum * unbiased

        def bwd(g):
            g64 = g.astype(np.float64, copy=False)
            xhat64 = xhat.astype(np.float64, copy=False)
            dgamma = (g64 * xhat64).sum(axis=(0, 2, 3))
            dbeta = g64.sum(axis=(0, 2, 3))
            dxhat = g64 * gamma.data.astype(np.float64)
            s1 = dxhat.sum(axis=(0, 2, 3)).reshape(cview)
            s2 = (dxhat * xhat64).sum(axis=(0, 2, 3)).reshape(cview)
            dx = (inv.reshape(cview) / n) * (n * dxhat - s1 - xhat64 * s2)
            return (
                dx.astype(xd.dtype),
                dgamma.reshape(gamma.shape).astype(gamma.dtype),
                dbeta.reshape(beta.shape).astype(beta.dtype),
            )

        return record_op((x, gamma, beta), out, bwd)

    inv = 1.0 / np.sqrt(p.running_var + p.eps)
    xhat = ((xd - p.running_mean.reshape(cview)) * inv.reshape(cview)).astype(xd.dtype)
    out = gamma.data * xhat + beta.data

    def bwd_eval(g):
        g64 = g.astype(np.float64, copy=False)
        dgamma = (g64 * xhat.astype(np.float64)).sum(axis=(0, 2, 3))
        dbeta = g64.sum(axis=(0, 2, 3))
        dx = g * (gamma.data * inv.reshape(cview).astype(xd.dtype))
        return (
            dx.astype(xd.dtype),
            dgamma.reshape(gamma.shape).astype(gamma.dtype),
            dbeta.reshape(beta.shape).astype(beta.dtype),
        )

    return record_op((x, gamma, beta), out, bwd_eval)


# ---------------------------------------------------------------------------
# Padding, pooling, resampling
# ---------------------------------------------------------------------------


def reflection_pad(x: Tensor, pad: int) -> Tensor:
    """Mirror-pad both spatial axes without repeating the edge pixel."""
    if pad == 0:
        return x
    _, _, h, w = x.shape
    if pad >= h or pad >= w:
        raise ContractError(f"reflection pad {pad} must be smaller than spatial size {h}x{w}")
    out = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")

    def bwd(g):
        # Fold the mirrored borders back onto their source rows/columns.
        gh = g[:, :, pad : pad + h, :].copy()
        for r in range(pad):
            gh[:, :, pad - r, :] += g[:, :, r, :]
            gh[:, :, h - 2 - r, :] += g[:, :, pad + h + r, :]
        gx = gh[:, :, :, pad : pad + w].copy()
        for r in range(pad):
            gx[:, :, :, pad - r] += gh[:, :, :, r]
            gx[:, :, :, w - 2 - r] += gh[:, :, :, pad + w + r]
        return (gx,)

    return record_op((x,), out, bwd)


def channel_max(x: Tensor) -> Tensor:
    """Per-pixel maximum over channels, shape (B,1,H,W); gradient goes to the
    first argmax channel on ties."""
    out = x.data.max(axis=1, keepdims=True)
    xd = x.data

    def bwd(g):
        gx = np.zeros(xd.shape, dtype=g.dtype)
        np.put_along_axis(gx, np.argmax(xd, axis=1)[:, None], g, axis=1)
        return (gx,)

    return record_op((x,), out, bwd)


def channel_min(x: Tensor) -> Tensor:
    """Per-pixel minimum over channels; gradient routing mirrors channel_max."""
    out = x.data.min(axis=1, keepdims=True)
    xd = x.data

    def bwd(g):
        gx = np.zeros(xd.shape, dtype=g.dtype)
        np.put_along_axis(gx, np.argmin(xd, axis=1)[:, None], g, axis=1)
        return (gx,)

    return record_op((x,), out, bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean, shape (B,C,1,1)."""
    _, _, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(x.dtype)
    shape = x.shape

    def bwd(g):
        return (np.broadcast_to(g / (h * w), shape).astype(g.dtype),)

    return record_op((x,), out, bwd)


def _upsample_axis_weights(in_size: int, factor: int):
    # align_corners=False convention: src = (dst + 0.5) / factor - 0.5
    dst = np.arange(in_size * factor)
    src = (dst + 0.5) / factor - 0.5
    i0f = np.floor(src)
    frac = (src - i0f).astype(np.float32)
    i0 = np.clip(i0f, 0, in_size - 1).astype(np.intp)
    i1 = np.clip(i0f + 1, 0, in_size - 1).astype(np.intp)
    return i0, i1, (1.0 - frac), frac


def _upsample2_axis(xd: np.ndarray, axis: int) -> np.ndarray:
    # Fixed-weight fast path for factor 2: out[2k] = .25 x[k-1] + .75 x[k],
    # out[2k+1] = .75 x[k] + .25 x[k+1], edges clamped.
    x = np.moveaxis(xd, axis, 0)
    n = x.shape[0]
    out = np.empty((2 * n,) + x.shape[1:], dtype=xd.dtype)
    even, odd = out[0::2], out[1::2]
    np.multiply(x, 0.75, out=even)
    even[1:] += 0.25 * x[:-1]
    even[0] += 0.25 * x[0]
    np.multiply(x, 0.75, out=odd)
    odd[:-1] += 0.25 * x[1:]
    odd[-1] += 0.25 * x[-1]
    return np.moveaxis(out, 0, axis)


def _upsample2_axis_t(g: np.ndarray, axis: int) -> np.ndarray:
    # Transpose of _upsample2_axis.
    gm = np.moveaxis(g, axis, 0)
    ge, go = gm[0::2], gm[1::2]
    gx = 0.75 * (ge + go)
    gx[:-1] += 0.25 * ge[1:]
    gx[0] += 0.25 * ge[0]
    gx[1:] += 0.25 * go[:-1]
    gx[-1] += 0.25 * go[-1]
    return np.moveaxis(gx, 0, axis)


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling by an integer factor (align-corners=false)."""
    if factor < 1:
        raise ContractError(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return record_op((x,), x.data.copy(), lambda g: (g,))
    _, _, h, w = x.shape
    if factor == 2:
        out = _upsample2_axis(_upsample2_axis(x.data, 2), 3)

        def bwd2(g):
            return (_upsample2_axis_t(_upsample2_axis_t(g, 3), 2),)

        return record_op((x,), out, bwd2)

    i0h, i1h, w0h, w1h = _upsample_axis_weights(h, factor)
    i0w, i1w, w0w, w1w = _upsample_axis_weights(w, factor)
    colh0, colh1 = w0h[:, None], w1h[:, None]
    yh = x.data[:, :, i0h, :] * colh0 + x.data[:, :, i1h, :] * colh1
    out = (yh[:, :, :, i0w] * w0w + yh[:, :, :, i1w] * w1w).astype(x.dtype)
    shape = x.shape

    def bwd(g):
        gh = np.zeros(g.shape[:3] + (w,), dtype=np.float64)
        np.add.at(gh, (Ellipsis, i0w), g * w0w)
        np.add.at(gh, (Ellipsis, i1w), g * w1w)
        gx = np.zeros(shape, dtype=np.float64)
        np.add.at(gx, (slice(None), slice(None), i0h), gh * colh0)
        np.add.at(gx, (slice(None), slice(None), i1h), gh * colh1)
        return (gx.astype(g.dtype),)

    return record_op((x,), out, bwd)


def downsample2(x: Tensor) -> Tensor:
    """Keep every second pixel starting at index 0; both spatial sizes must be even."""
    _, _, h, w = x.shape
    if h % 2 or w % 2:
        raise ContractError(f"downsample2 needs even spatial sizes, got {h}x{w}")
    out = x.data[:, :, ::2, ::2].copy()
    shape = x.shape

    def bwd(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, :, ::2, ::2] = g
        return (gx,)

    return record_op((x,), out, bwd)


BLUR_KERNEL_1D = np.array([1.0, 4.0, 6.0, 4.0, 1.0], dtype=np.float64) / 16.0


def _filter5_valid(xd: np.ndarray, axis: int) -> np.ndarray:
    x = np.moveaxis(xd, axis, 0)
    n = x.shape[0] - 4
    acc = np.zeros((n,) + x.shape[1:], dtype=np.float64)
    for k in range(5):
        acc += BLUR_KERNEL_1D[k] * x[k : k + n]
    return np.moveaxis(acc, 0, axis)


def _blur5_valid(xd: np.ndarray) -> np.ndarray:
    return _filter5_valid(_filter5_valid(xd, 2), 3).astype(xd.dtype)


def _blur5_valid_t(g: np.ndarray) -> np.ndarray:
    # The kernel is symmetric, so the transpose of a valid correlation is a
    # valid correlation of the zero-padded gradient.
    gp = np.pad(g, ((0, 0), (0, 0), (4, 4), (4, 4)))
    return _filter5_valid(_filter5_valid(gp, 3), 2).astype(g.dtype)


def gaussian_blur(x: Tensor) -> Tensor:
    """Depthwise 5x5 binomial blur (outer product of [1,4,6,4,1]/16) with
    reflection padding 2, so constants are preserved exactly.

    The mirror padding needs at least 3 pixels per axis; that lower bound
    also lets the pyramid code blur its coarsest (quarter-size) level.
    """
    _, _, h, w = x.shape
    if h < 3 or w < 3:
        raise ContractError(f"gaussian_blur needs spatial size >= 3, got {h}x{w}")
    xp = reflection_pad(x, 2)
    out = _blur5_valid(xp.data)

    def bwd(g):
        return (_blur5_valid_t(g),)

    return record_op((xp,), out, bwd)

"""Training objective: L1 plus color-attenuation and pyramid terms.

The color-attenuation term supervises saturation and brightness
separately; haze raises brightness while draining saturation, so their
gap tracks haze density.  Its asymmetry is deliberate: an
absolute-difference mean for saturation, a squared mean for brightness.
The pyramid term compares three band-pass levels of a Laplacian
decomposition, which isolates the high-frequency content restoration
tends to lose.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .errors import ContractError, ShapeError
from .layers import bilinear_upsample, channel_max, channel_min, downsample2, gaussian_blur
from .tensor import Tensor, absolute, add, clamp, mean_all, mul, safe_div, scale, sub

__all__ = [
    "LossWeights",
    "PyramidLevels",
    "rgb_to_sv",
    "haze_density",
    "color_attenuation_loss",
    "build_laplacian_pyramid",
    "collapse_pyramid",
    "laplace_pyramid_loss",
    "l1_loss",
    "total_loss",
    "total_loss_parts",
]

PYRAMID_LEVELS = 3


@dataclass
class LossWeights:
    """Balance coefficients of the composite objective."""

    alpha1: float = 0.5  # color-attenuation term
    alpha2: float = 5.0  # pyramid term
    ca_alpha: float = 1.0  # saturation sub-term
    ca_beta: float = 0.5  # brightness sub-term

    def __post_init__(self):
        if min(self.alpha1, self.alpha2, self.ca_alpha, self.ca_beta) < 0:
            raise ContractError("loss weights must be non-negative")


@dataclass
class PyramidLevels:
    """Band-pass images (full, 1/2, 1/4 resolution) plus the low-pass tail."""

    bands: list[Tensor] = field(default_factory=list)
    lowpass: Optional[Tensor] = None


def rgb_to_sv(x: Tensor) -> tuple[Tensor, Tensor]:
    """Saturation and brightness maps of an RGB batch in [0, 1].

    V is the per-pixel channel maximum; S is (V - min) / V with S = 0 where
    V = 0 (that branch also has zero gradient).  Both maps are (B,1,H,W).
    Gradients route to the argmax/argmin channels.
    """
    if x.shape[1] != 3:
        raise ShapeError(f"expected RGB input with 3 channels, got {x.shape[1]}")
    v = channel_max(x)
    s = safe_div(sub(v, channel_min(x)), v)
    return s, v


def haze_density(x: Tensor) -> Tensor:
    """Per-pixel |V - S|: high where haze washes color out while brightening."""
    s, v = rgb_to_sv(x)
    return absolute(sub(v, s))


def color_attenuation_loss(pred: Tensor, gt: Tensor, w: LossWeights) -> Tensor:
    """Saturation / brightness supervision in [0,1]-clamped HSV space."""
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and target {gt.shape} differ")
    s_p, v_p = rgb_to_sv(clamp(pred, 0.0, 1.0))
    s_g, v_g = rgb_to_sv(clamp(gt, 0.0, 1.0))
    sat = mean_all(absolute(sub(s_g, s_p)))
    dv = sub(v_g, v_p)
    val = mean_all(mul(dv, dv))
    return add(scale(sat, w.ca_alpha), scale(val, w.ca_beta))


def build_laplacian_pyramid(x: Tensor) -> PyramidLevels:
    """Three-level Laplacian decomposition.

    Level k is G_{k-1} minus the x2 bilinear upsampling of
    G_k = downsample2(blur(G_{k-1})); the remainder G_3 is the low-pass
    tail.  Collapsing (upsample the tail and add the bands back, coarse to
    fine) telescopes exactly back to the input.
    """
    _, _, h, w_ = x.shape
    div = 2 ** PYRAMID_LEVELS
    if h % div or w_ % div:
        raise ContractError(f"pyramid needs spatial sizes divisible by {div}, got {h}x{w_}")
    if h < 16 or w_ < 16:
        # The quarter-resolution level still gets blurred, which needs >= 3
        # pixels per axis after two halvings.
        raise ContractError(f"pyramid needs spatial sizes >= 16, got {h}x{w_}")
    levels = PyramidLevels()
    g = x
    for _ in range(PYRAMID_LEVELS):
        nxt = downsample2(gaussian_blur(g))
        levels.bands.append(sub(g, bilinear_upsample(nxt, 2)))
        g = nxt
    levels.lowpass = g
    return levels


def collapse_pyramid(p: PyramidLevels) -> Tensor:
    """Invert :func:`build_laplacian_pyramid` (exact up to float rounding)."""
    g = p.lowpass
    for band in reversed(p.bands):
        g = add(band, bilinear_upsample(g, 2))
    return g


def laplace_pyramid_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """Sum over levels of the mean squared band difference.

    Each level is normalized by its own element count so the three bands
    contribute on an equal footing; the low-pass tails are excluded, which
    makes the loss invariant to a global constant offset.
    """
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and target {gt.shape} differ")
    pp = build_laplacian_pyramid(pred)
    pg = build_laplacian_pyramid(gt)
    total = None
    for bp, bg in zip(pp.bands, pg.bands):
        d = sub(bp, bg)
        term = mean_all(mul(d, d))
        total = term if total is None else add(total, term)
    return total


def l1_loss(pred: Tensor, gt: Tensor) -> Tensor:
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and target {gt.shape} differ")
    return mean_all(absolute(sub(pred, gt)))


def total_loss_parts(pred: Tensor, gt: Tensor, w: LossWeights) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """(total, l1, color_attenuation, pyramid) so callers can log the parts."""
    l1 = l1_loss(pred, gt)
    ca = color_attenuation_loss(pred, gt, w)
    lap = laplace_pyramid_loss(pred, gt)
    total = add(add(l1, scale(ca, w.alpha1)), scale(lap, w.alpha2))
    return total, l1, ca, lap


def total_loss(pred: Tensor, gt: Tensor, w: LossWeights) -> Tensor:
    """l1 + alpha1 * color_attenuation + alpha2 * pyramid."""
    return total_loss_parts(pred, gt, w)[0]

"""Inference-time branch fusion.

Each block's three parallel branches are algebraic pieces of one 3x3
convolution: the 1x1 branch is a 3x3 kernel that is zero outside the
center tap, and the identity branch is a 3x3 kernel whose center tap is
the identity matrix over channels.  Convolution is linear, so the kernels
and biases simply add.  An eval-mode batch norm after the sum is a
per-channel affine map y_c = s_c * x_c + t_c with

    s_c = gamma_c / sqrt(var_c + eps)
    t_c = beta_c - mu_c * s_c

which folds into the summed convolution by scaling its c-th output filter
by s_c and replacing its bias with s_c * (b_c - mu_c) + beta_c.  Every step
is an identity up to float32 rounding, so the fused model matches the
multi-branch one to within accumulated rounding error.

Only the block branches fuse; head, down, upsample, shrink and tail convs
are already single-path, and the attention and local-residual parts of a
block are untouched.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, StateError
from .layers import BNParams, ConvParams
from .network import (
    MABlockParams,
    ModelParams,
    count_parameters,
    forward,
    forward_trace,
    ma_block_forward,
    set_bn_mode,
)
from .tensor import Tensor

__all__ = [
    "FusionReport",
    "pad_1x1_to_3x3",
    "identity_as_3x3",
    "fuse_branches",
    "fold_bn",
    "calibrate_bn_stats",
    "reparameterize_model",
    "format_report",
    "report_to_kv",
]


@dataclass
class FusionReport:
    """Equivalence and timing evidence collected while fusing one model."""

    block_deviation: list[float] = field(default_factory=list)
    end_to_end_deviation: float = 0.0
    params_before: int = 0
    params_after: int = 0
    seconds_before: float = 0.0
    seconds_after: float = 0.0
    bn_finalized: bool = False

    @property
    def speedup(self) -> float:
        if self.seconds_after <= 0:
            return float("inf")
        return self.seconds_before / self.seconds_after

    @property
    def time_reduction(self) -> float:
        """Fraction of the multi-branch wall time removed by fusion."""
        if self.seconds_before <= 0:
            return 0.0
        return 1.0 - self.seconds_after / self.seconds_before


def pad_1x1_to_3x3(w1: ConvParams) -> ConvParams:
    """Embed a 1x1 convolution in a 3x3 kernel (zero except the center tap)."""
    if w1.kernel_size != 1 or w1.stride != 1:
        raise ContractError("only stride-1 1x1 convolutions can be padded to 3x3")
    weight = np.pad(w1.weight.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    return ConvParams(
        Tensor(weight),
        Tensor(w1.bias.data.copy()),
        stride=1,
        padding=1,
    )


def identity_as_3x3(channels: int) -> ConvParams:
    """The identity map as a 3x3 convolution with zero bias."""
    if channels < 1:
        raise ContractError("channels must be >= 1")
    weight = np.zeros((channels, channels, 3, 3), dtype=np.float32)
    for c in range(channels):
        weight[c, c, 1, 1] = 1.0
    return ConvParams(
        Tensor(weight),
        Tensor(np.zeros((1, channels, 1, 1), dtype=np.float32)),
        stride=1,
        padding=1,
    )


def fuse_branches(branch3: ConvParams, branch1: ConvParams, channels: int) -> ConvParams:
    """Sum the 3x3, padded 1x1 and identity kernels into one 3x3 convolution."""
    if branch3.kernel_size != 3 or branch3.stride != 1:
        raise ContractError("main branch must be a stride-1 3x3 convolution")
    if branch3.out_channels != channels or branch1.out_channels != channels:
        raise ContractError("branch channel counts must match the block width")
    if branch3.in_channels != channels or branch1.in_channels != channels:
        raise ContractError("branches must map the block width onto itself")
    padded = pad_1x1_to_3x3(branch1)
    ident = identity_as_3x3(channels)
    weight = branch3.weight.data + padded.weight.data + ident.weight.data
    bias = branch3.bias.data + padded.bias.data
    return ConvParams(Tensor(weight), Tensor(bias), stride=1, padding=1)


def fold_bn(conv: ConvParams, bn: BNParams) -> ConvParams:
    """Absorb an eval-mode batch norm into the preceding convolution."""
    if bn.mode != "eval":
        raise StateError("fold_bn needs eval-mode batch norm with finalized running statistics")
    s = bn.gamma.data.reshape(-1).astype(np.float64) / np.sqrt(bn.running_var + bn.eps)
    weight = conv.weight.data.astype(np.float64) * s[:, None, None, None]
    bias = s * (conv.bias.data.reshape(-1).astype(np.float64) - bn.running_mean) + bn.beta.data.reshape(-1).astype(np.float64)
    out_c = conv.out_channels
    return ConvParams(
        Tensor(weight.astype(np.float32)),
        Tensor(bias.astype(np.float32).reshape(1, out_c, 1, 1)),
        stride=conv.stride,
        padding=conv.padding,
        padding_mode=conv.padding_mode,
    )


def _fuse_block(b: MABlockParams, channels: int) -> MABlockParams:
    fused = fuse_branches(b.branch3, b.branch1, channels)
    if b.use_bn:
        fused = fold_bn(fused, b.bn)
    return MABlockParams(
        branch3=None,
        branch1=None,
        bn=None,
        sa=b.sa,
        ca=b.ca,
        fused=fused,
        use_bn=False,
        use_attention=b.use_attention,
        use_local_residual=b.use_local_residual,
    )


def calibrate_bn_stats(m: ModelParams, batch: Tensor, passes: int = 10) -> None:
    """Populate batch-norm running statistics with train-mode forward passes.

    A freshly initialized model still carries the default (0, 1) running
    statistics; folding those into the weights bakes in a normalization that
    matches no real activation scale.  Running a few forward passes over a
    representative batch first (no optimizer involved) settles the buffers,
    exactly as a few training steps would.
    """
    set_bn_mode(m, "train")
    for _ in range(passes):
        forward(batch, m)
    set_bn_mode(m, "eval")


def _median_forward_seconds(m: ModelParams, probe: Tensor, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        forward(probe, m)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def reparameterize_model(
    m: ModelParams, probe: Tensor, timing_repeats: int = 3
) -> tuple[ModelParams, FusionReport]:
    """Fuse every block and verify the result on a probe batch.

    Returns the fused model plus a :class:`FusionReport` with per-block and
    end-to-end max-abs deviations, parameter counts and median forward
    wall times on the probe.  The input model is left intact apart from its
    batch norms, which are switched to eval mode so that the running
    statistics they carry are the ones being folded.
    """
    if m.form != "training":
        raise StateError("model is already fused; re-parameterization is not idempotent by design")
    if any(b.bn_per_branch for b in m.blocks):
        raise StateError(
            "blocks with one batch norm per branch cannot be fused: the fusion "
            "contract covers a single post-sum batch norm only (build the model "
            "with bn_per_branch=False to make it fusable)"
        )
    report = FusionReport()
    set_bn_mode(m, "eval")
    report.bn_finalized = True
    channels = m.config.width

    fused_blocks = [_fuse_block(b, channels) for b in m.blocks]
    fused_model = ModelParams(
        head=m.head,
        down=m.down,
        blocks=fused_blocks,
        up_conv=m.up_conv,
        shrink=m.shrink,
        skip_shrink=m.skip_shrink,
        tail=m.tail,
        form="fused",
        config=m.config,
    )

    out_before, block_inputs = forward_trace(probe, m)
    for b_old, b_new, x_in in zip(m.blocks, fused_blocks, block_inputs):
        y_old = ma_block_forward(x_in, b_old)
        y_new = ma_block_forward(x_in, b_new)
        report.block_deviation.append(float(np.max(np.abs(y_old.data - y_new.data))))
    out_after = forward(probe, fused_model)
    report.end_to_end_deviation = float(np.max(np.abs(out_before.data - out_after.data)))

    report.params_before = count_parameters(m)
    report.params_after = count_parameters(fused_model)
    report.seconds_before = _median_forward_seconds(m, probe, timing_repeats)
    report.seconds_after = _median_forward_seconds(fused_model, probe, timing_repeats)
    return fused_model, report


def format_report(r: FusionReport) -> str:
    """Human-readable table summarizing a fusion pass."""
    lines = [
        "fusion report",
        "-------------",
        f"{'block':>8}  {'max abs deviation':>18}",
    ]
    for i, d in enumerate(r.block_deviation):
        lines.append(f"{i:>8}  {d:>18.3e}")
    lines += [
        f"{'overall':>8}  {r.end_to_end_deviation:>18.3e}",
        "",
        f"parameters: {r.params_before} -> {r.params_after}",
        f"forward wall time: {r.seconds_before * 1e3:.1f} ms -> {r.seconds_after * 1e3:.1f} ms "
        f"({100.0 * r.time_reduction:.1f}% reduction)",
        f"batch norms finalized to eval mode: {'yes' if r.bn_finalized else 'no'}",
    ]
    return "\n".join(lines)


def report_to_kv(r: FusionReport) -> str:
    """Machine-readable key=value serialization of a fusion report."""
    pairs = [
        ("end_to_end_deviation", f"{r.end_to_end_deviation:.9e}"),
        ("params_before", str(r.params_before)),
        ("params_after", str(r.params_after)),
        ("seconds_before", f"{r.seconds_before:.6f}"),
        ("seconds_after", f"{r.seconds_after:.6f}"),
        ("time_reduction", f"{r.time_reduction:.6f}"),
        ("bn_finalized", str(int(r.bn_finalized))),
    ]
    pairs += [(f"block_{i}_deviation", f"{d:.9e}") for i, d in enumerate(r.block_deviation)]
    return "\n".join(f"{k}={v}" for k, v in pairs) + "\n"

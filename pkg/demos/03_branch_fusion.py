"""Collapsing the multi-branch blocks into single 3x3 convolutions.

The three parallel branches (3x3 conv, 1x1 conv, identity) sum into one
3x3 kernel because convolution is linear; the eval-mode batch norm that
follows is a per-channel affine map, which folds into that kernel's
weights and bias.  The result computes the same function with one GEMM
per block instead of two plus several elementwise passes.
"""

import time

import numpy as np

from rephaze.layers import conv2d
from rephaze.network import build_model, forward, set_bn_mode
from rephaze.reparam import calibrate_bn_stats, format_report, fuse_branches, reparameterize_model
from rephaze.tensor import Tensor

rng = np.random.default_rng(0)

# --- the algebra on a single block -----------------------------------------
model = build_model(seed=4)
block = model.blocks[0]
fused_conv = fuse_branches(block.branch3, block.branch1, channels=64)
x = Tensor(rng.standard_normal((1, 64, 16, 16)).astype(np.float32))
three_way = conv2d(x, block.branch3).data + conv2d(x, block.branch1).data + x.data
one_conv = conv2d(x, fused_conv).data
print(f"single block: |three-branch sum - fused conv| = {np.max(np.abs(three_way - one_conv)):.2e}")

# --- the whole model --------------------------------------------------------
# settle the batch-norm statistics first, as any trained model would have
model.tail.weight.data[:] = rng.normal(0, 0.05, model.tail.weight.shape).astype(np.float32)
calib = Tensor(rng.standard_normal((2, 3, 64, 64)).astype(np.float32))
calibrate_bn_stats(model, calib, passes=6)

probe = Tensor(rng.standard_normal((2, 3, 64, 64)).astype(np.float32))
fused_model, report = reparameterize_model(model, probe)
print()
print(format_report(report))

# --- wall time at a larger resolution ---------------------------------------
set_bn_mode(model, "eval")
big = Tensor(rng.random((1, 3, 256, 256), dtype=np.float32))
forward(big, model), forward(big, fused_model)  # warm both paths


def median_ms(m, repeats=5):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        forward(big, m)
        times.append(time.perf_counter() - t0)
    return 1e3 * float(np.median(times))


t_multi = median_ms(model)
t_fused = median_ms(fused_model)
print(f"\n256x256 forward: multi-branch {t_multi:.0f} ms, fused {t_fused:.0f} ms "
      f"({100 * (1 - t_fused / t_multi):.1f}% faster)")

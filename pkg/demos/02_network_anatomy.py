"""Anatomy of the dehazing network.

The trunk runs at half resolution between a stride-2 downsampling conv and
a bilinear x2 upsampling; six multi-branch attention blocks sit in between.
A long skip carries full-resolution shallow features to the 7x7 fusion
tail, which emits a residual added back onto the input image.
"""

import numpy as np

from rephaze.layers import bilinear_upsample, conv2d
from rephaze.network import ModelConfig, build_model, count_parameters, forward, ma_block_forward, named_parameters
from rephaze.tensor import Tensor, relu

model = build_model(seed=0)
cfg = model.config
print(f"configuration: {cfg}")

# --- shapes through the trunk ----------------------------------------------
x = Tensor(np.random.default_rng(1).random((1, 3, 64, 64), dtype=np.float32))
f0 = relu(conv2d(x, model.head))
print(f"\ninput         {x.shape}")
print(f"head          {f0.shape}")
d = relu(conv2d(f0, model.down))
print(f"downsampled   {d.shape}")
for i, block in enumerate(model.blocks):
    d = ma_block_forward(d, block)
print(f"after {len(model.blocks)} blocks{'':<3}{d.shape}")
u = relu(conv2d(bilinear_upsample(d, 2), model.up_conv))
print(f"upsampled     {u.shape}")
out = forward(x, model)
print(f"output        {out.shape}")

# a freshly built model is the identity: its residual tail starts at zero
print("\nfresh model output == input:", bool(np.array_equal(out.data, x.data)))

# --- parameter budget -------------------------------------------------------
total = count_parameters(model)
by_part = {}
for name, tensor in named_parameters(model):
    part = name.split(".")[0]
    by_part[part] = by_part.get(part, 0) + tensor.data.size
print(f"\nparameters: {total:,}")
for part, n in by_part.items():
    print(f"  {part:<12} {n:>8,}  ({100 * n / total:.1f}%)")

# --- ablation variants ------------------------------------------------------
for variant in (ModelConfig(use_bn=False, use_attention=False, use_local_residual=False), ModelConfig()):
    m = build_model(variant, seed=0)
    tag = "bare multi-branch" if not variant.use_attention else "full block"
    print(f"{tag:<18} -> {count_parameters(m):,} parameters")

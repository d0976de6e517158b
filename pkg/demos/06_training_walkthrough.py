"""A compressed training run: optimize, evaluate, fuse.

This uses a reduced patch size and step count so it finishes in about a
minute; the CLI command `rephaze train --synthetic` runs the full-scale
protocol (600 steps of 128x128 patches at batch size 2).
"""

import csv

import numpy as np

from rephaze.network import load_model
from rephaze.reparam import reparameterize_model
from rephaze.tensor import Tensor
from rephaze.trainer import LRSchedule, TrainConfig, cyclical_lr, train

# --- the cyclical schedule -----------------------------------------------------
sched = LRSchedule(base_lr=6e-4, max_lr=1.2e-3, step_size=10)
trace = [cyclical_lr(s, sched) for s in range(21)]
print("cyclical learning rate, one full cycle:")
print("  " + " ".join(f"{lr * 1e3:.2f}" for lr in trace), "(x 1e-3)")

# --- a short run ----------------------------------------------------------------
cfg = TrainConfig(
    steps=40,
    batch_size=2,
    patch_size=64,
    seed=1,
    out_dir="demo_output/train",
    synthetic_pairs=16,
    synthetic_size=96,
    holdout_pairs=4,
    checkpoint_every=0,
    lr=sched,
)
print(f"\ntraining {cfg.steps} steps on {cfg.synthetic_pairs} synthetic pairs...")
result = train(cfg)

with open(result.log_path) as fh:
    rows = list(csv.reader(fh))[1:]
print(f"loss: {result.first_loss:.4f} -> {result.final_loss:.4f}")
print(f"held-out psnr {result.holdout_psnr:.2f} dB vs identity {result.identity_psnr:.2f} dB")
print(f"log has {len(rows)} rows at {result.log_path}")

# --- fuse the trained checkpoint -------------------------------------------------
model = load_model(result.checkpoint_path)
probe = Tensor(np.random.default_rng(0).standard_normal((1, 3, 64, 64)).astype(np.float32))
fused, report = reparameterize_model(model, probe)
print(f"\nfused the checkpoint: {report.params_before:,} -> {report.params_after:,} parameters, "
      f"end-to-end deviation {report.end_to_end_deviation:.2e}")

"""The training objective, term by term.

L1 anchors overall reconstruction.  The color-attenuation term watches
saturation and brightness separately, because haze drains one while
raising the other.  The pyramid term compares three band-pass levels of a
Laplacian decomposition, focusing the model on the high frequencies that
restoration tends to smear.
"""

import numpy as np

from rephaze.data import make_clean_image, random_recipe, synthesize_haze
from rephaze.losses import (
    LossWeights,
    build_laplacian_pyramid,
    collapse_pyramid,
    haze_density,
    total_loss_parts,
)
from rephaze.tensor import Tensor

clean = make_clean_image(64, seed=3)
recipe = random_recipe(64, 64, seed=9, t_min=0.25)
hazy = synthesize_haze(clean, recipe)
clean_t = Tensor(clean[None])
hazy_t = Tensor(hazy[None])

# --- the pyramid -------------------------------------------------------------
pyramid = build_laplacian_pyramid(clean_t)
print("pyramid levels:")
for k, band in enumerate(pyramid.bands):
    print(f"  band {k}: {band.shape}, energy {float(np.mean(band.data ** 2)):.2e}")
print(f"  lowpass: {pyramid.lowpass.shape}")
rec = collapse_pyramid(pyramid)
print(f"reconstruction error: {np.max(np.abs(rec.data - clean_t.data)):.2e}")

# --- haze density ------------------------------------------------------------
d_clean = float(haze_density(clean_t).data.mean())
d_hazy = float(haze_density(hazy_t).data.mean())
print(f"\nmean |brightness - saturation|: clean {d_clean:.3f}, hazy {d_hazy:.3f}")
print("(the gap is the color-attenuation signal the loss supervises)")

# --- the composite loss -------------------------------------------------------
weights = LossWeights()  # alpha1=0.5, alpha2=5, saturation 1, brightness 0.5
total, l1, ca, lap = total_loss_parts(hazy_t, clean_t, weights)
print(f"\nloss of the hazy image against its clean source:")
print(f"  l1                = {l1.item():.4f}")
print(f"  color attenuation = {ca.item():.4f}  (x {weights.alpha1})")
print(f"  pyramid           = {lap.item():.4f}  (x {weights.alpha2})")
print(f"  total             = {total.item():.4f}")

perfect, *_ = total_loss_parts(clean_t, clean_t, weights)
print(f"loss of a perfect restoration: {perfect.item():.4f}")

"""Synthetic nonhomogeneous haze, paired datasets and patch sampling.

Hazy images follow the atmospheric scattering model I = J*t + A*(1-t) with
a spatially varying transmission field t, synthesized as a smooth sum of
random Gaussian blobs.  The module also generates procedural clean images
(gradients, shapes, noise textures) so the whole pipeline runs without any
external dataset, and reads/writes paired PNG directories using the
``<root>/hazy/*.png`` + ``<root>/clean/*.png`` convention with matching
filenames.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .errors import ContractError

__all__ = [
    "HazeRecipe",
    "PatchBatch",
    "ImagePair",
    "random_recipe",
    "synthesize_haze",
    "invert_haze",
    "make_clean_image",
    "make_pool",
    "sample_patches",
    "apply_augmentation",
    "read_image",
    "write_image",
    "load_paired_dataset",
]


@dataclass
class HazeRecipe:
    """Ground-truth degradation parameters for one image.

    ``airlight`` is scalar or per-channel in [0.6, 1.0]; ``transmission``
    is a (1,1,H,W) field in (0, 1].
    """

    airlight: np.ndarray
    transmission: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.airlight = np.asarray(self.airlight, dtype=np.float32).reshape(1, -1, 1, 1)
        t = np.asarray(self.transmission, dtype=np.float32)
        if t.ndim == 2:
            t = t[None, None]
        self.transmission = t
        if np.any(t <= 0) or np.any(t > 1):
            raise ContractError("transmission must lie in (0, 1]")
        a = self.airlight
        if np.any(a < 0.6) or np.any(a > 1.0):
            raise ContractError("airlight must lie in [0.6, 1.0]")


@dataclass
class ImagePair:
    """One aligned hazy/clean pair, arrays of shape (3, H, W) in [0, 1]."""

    image_id: str
    hazy: np.ndarray
    clean: np.ndarray
    recipe: Optional[HazeRecipe] = None


@dataclass
class PatchBatch:
    """Aligned (B,3,s,s) hazy/clean crops plus where they came from."""

    hazy: np.ndarray
    clean: np.ndarray
    provenance: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return self.hazy.shape[0]


def random_recipe(
    height: int,
    width: int,
    seed: int,
    t_min: float = 0.15,
    t_max: float = 1.0,
    n_blobs: Optional[int] = None,
) -> HazeRecipe:
    """Draw a smooth random transmission field and an airlight.

    The field is a sum of 3..8 Gaussian blobs with random centers and
    scales, rescaled to [t_min, t_max]; low t means dense haze, so the
    result is nonhomogeneous by construction.
    """
    if not 0 < t_min <= t_max <= 1:
        raise ContractError("need 0 < t_min <= t_max <= 1")
    rng = np.random.default_rng(seed)
    blobs = int(n_blobs) if n_blobs is not None else int(rng.integers(3, 9))
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float32)
    acc = np.zeros((height, width), dtype=np.float32)
    for _ in range(blobs):
        cy = rng.uniform(0, height)
        cx = rng.uniform(0, width)
        sy = rng.uniform(0.1, 0.5) * height
        sx = rng.uniform(0.1, 0.5) * width
        amp = rng.uniform(0.5, 1.0)
        acc += amp * np.exp(-(((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))
    lo, hi = float(acc.min()), float(acc.max())
    unit = (acc - lo) / (hi - lo) if hi > lo else np.full_like(acc, 0.5)
    # Blob peaks are the dense-haze cores: map high blob mass to low t.
    t = t_max - (t_max - t_min) * unit
    airlight = rng.uniform(0.6, 1.0, size=3).astype(np.float32)
    return HazeRecipe(airlight=airlight, transmission=t, seed=seed)


def _as_batch(img: np.ndarray) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return arr


def synthesize_haze(clean: np.ndarray, recipe: HazeRecipe) -> np.ndarray:
    """I = J*t + A*(1-t), clamped to [0,1]; shape preserved."""
    j = _as_batch(clean)
    t = recipe.transmission
    if t.shape[-2:] != j.shape[-2:]:
        raise ContractError(f"transmission {t.shape[-2:]} does not match image {j.shape[-2:]}")
    hazy = j * t + recipe.airlight * (1.0 - t)
    out = np.clip(hazy, 0.0, 1.0).astype(np.float32)
    return out[0] if np.asarray(clean).ndim == 3 else out


def invert_haze(hazy: np.ndarray, recipe: HazeRecipe, t_floor: float = 1e-3) -> tuple[np.ndarray, np.ndarray]:
    """Analytic inversion J = (I - A*(1-t)) / t given the true recipe.

    Returns (clean_estimate, unstable_mask); the mask flags pixels where
    t < ``t_floor`` and the division is numerically meaningless.
    """
    i = _as_batch(hazy)
    t = recipe.transmission
    unstable = t < t_floor
    t_safe = np.maximum(t, t_floor)
    j = (i - recipe.airlight * (1.0 - t)) / t_safe
    j = j.astype(np.float32)
    mask = np.broadcast_to(unstable, i.shape)
    if np.asarray(hazy).ndim == 3:
        return j[0], mask[0]
    return j, mask


# ---------------------------------------------------------------------------
# Procedural clean images
# ---------------------------------------------------------------------------


def _smooth_noise(rng: np.random.Generator, h: int, w: int, cells: int) -> np.ndarray:
    coarse = rng.random((cells, cells)).astype(np.float32)
    img = Image.fromarray((coarse * 255).astype(np.uint8))
    img = img.resize((w, h), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


def make_clean_image(size: int, seed: int) -> np.ndarray:
    """A colored procedural test scene, (3, size, size) in [0, 1].

    Mixes a random linear gradient, a few solid shapes (rectangles and
    disks) and a smoothed noise texture, so the result has both flat and
    high-frequency content for the losses to latch onto.
    """
    rng = np.random.default_rng(seed)
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    yy /= h
    xx /= w
    img = np.zeros((3, h, w), dtype=np.float32)
    gdir = rng.uniform(-1, 1, size=2)
    ramp = gdir[0] * yy + gdir[1] * xx
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-6)
    for c in range(3):
        lo, hi = sorted(rng.uniform(0, 1, size=2))
        img[c] = lo + (hi - lo) * ramp
    for _ in range(int(rng.integers(3, 7))):
        color = rng.uniform(0, 1, size=3).astype(np.float32)
        if rng.random() < 0.5:
            y0, x0 = rng.integers(0, h // 2), rng.integers(0, w // 2)
            y1 = y0 + int(rng.integers(h // 8, h // 2))
            x1 = x0 + int(rng.integers(w // 8, w // 2))
            img[:, y0:y1, x0:x1] = color[:, None, None]
        else:
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            r = rng.uniform(size / 12, size / 4)
            mask = (yy * h - cy) ** 2 + (xx * w - cx) ** 2 <= r * r
            img[:, mask] = color[:, None]
    texture = _smooth_noise(rng, h, w, cells=int(rng.integers(6, 16)))
    amount = rng.uniform(0.05, 0.25)
    img = (1 - amount) * img + amount * texture[None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_pool(n_pairs: int, size: int, seed: int, t_min: float = 0.15) -> list[ImagePair]:
    """Procedural paired pool: clean scenes plus their synthesized hazy twins."""
    pool = []
    root = np.random.SeedSequence(seed)
    for k, child in enumerate(root.spawn(n_pairs)):
        sub = child.generate_state(2)
        clean = make_clean_image(size, seed=int(sub[0]))
        recipe = random_recipe(size, size, seed=int(sub[1]), t_min=t_min)
        hazy = synthesize_haze(clean, recipe)
        pool.append(ImagePair(image_id=f"synthetic-{k:04d}", hazy=hazy, clean=clean, recipe=recipe))
    return pool


# ---------------------------------------------------------------------------
# Patch sampling with aligned augmentation
# ---------------------------------------------------------------------------


def apply_augmentation(img: np.ndarray, rot_k: int, flip: bool) -> np.ndarray:
    """Rotate by 90-degree multiples and optionally flip horizontally.

    Works on (..., H, W) arrays; both patches of a pair get the identical
    transform so they stay pixel-aligned.
    """
    out = np.rot90(img, k=rot_k, axes=(-2, -1))
    if flip:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def sample_patches(pool: Sequence[ImagePair], n: int, size: int, seed: int) -> PatchBatch:
    """Draw ``n`` aligned hazy/clean crops with random rotation and flip.

    Deterministic for a fixed seed.  Pool images smaller than ``size`` are
    skipped with a warning; sampling from an all-too-small pool raises.
    """
    usable = [p for p in pool if p.clean.shape[-2] >= size and p.clean.shape[-1] >= size]
    skipped = len(pool) - len(usable)
    if skipped:
        warnings.warn(f"skipped {skipped} pool image(s) smaller than {size}x{size}", stacklevel=2)
    if n == 0:
        empty = np.zeros((0, 3, size, size), dtype=np.float32)
        return PatchBatch(hazy=empty, clean=empty.copy())
    if not usable:
        raise ContractError(f"no pool image is at least {size}x{size}")
    rng = np.random.default_rng(seed)
    hazy = np.empty((n, 3, size, size), dtype=np.float32)
    clean = np.empty((n, 3, size, size), dtype=np.float32)
    provenance = []
    for b in range(n):
        p = usable[int(rng.integers(0, len(usable)))]
        h, w = p.clean.shape[-2:]
        y0 = int(rng.integers(0, h - size + 1))
        x0 = int(rng.integers(0, w - size + 1))
        rot_k = int(rng.integers(0, 4))
        flip = bool(rng.integers(0, 2))
        hz = p.hazy[:, y0 : y0 + size, x0 : x0 + size]
        cl = p.clean[:, y0 : y0 + size, x0 : x0 + size]
        hazy[b] = apply_augmentation(hz, rot_k, flip)
        clean[b] = apply_augmentation(cl, rot_k, flip)
        provenance.append({"image_id": p.image_id, "y0": y0, "x0": x0, "rot_k": rot_k, "flip": flip})
    return PatchBatch(hazy=hazy, clean=clean, provenance=provenance)


# ---------------------------------------------------------------------------
# PNG input/output and the paired-directory convention
# ---------------------------------------------------------------------------


def read_image(path) -> np.ndarray:
    """Load an 8-bit RGB PNG as (3, H, W) float32 in [0, 1]."""
    with Image.open(path) as img:
        rgb = img.convert("RGB")
        arr = np.asarray(rgb, dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_image(path, img: np.ndarray) -> None:
    """Write a (3, H, W) array in [0, 1] as an 8-bit RGB PNG."""
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 4:
        arr = arr[0]
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data.transpose(1, 2, 0)).save(path, format="PNG")


def load_paired_dataset(root) -> tuple[list[ImagePair], list[str]]:
    """Load ``<root>/hazy`` + ``<root>/clean`` pairs matched by filename.

    Returns (pairs, unmatched_names); unmatched files on either side are
    reported rather than silently dropped.
    """
    root = Path(root)
    hazy_dir, clean_dir = root / "hazy", root / "clean"
    if not hazy_dir.is_dir() or not clean_dir.is_dir():
        raise ContractError(f"{root} must contain hazy/ and clean/ subdirectories")
    hazy_files = {p.name: p for p in sorted(hazy_dir.glob("*.png"))}
    clean_files = {p.name: p for p in sorted(clean_dir.glob("*.png"))}
    pairs, unmatched = [], []
    for name in sorted(set(hazy_files) | set(clean_files)):
        if name in hazy_files and name in clean_files:
            pairs.append(
                ImagePair(
                    image_id=name,
                    hazy=read_image(hazy_files[name]),
                    clean=read_image(clean_files[name]),
                )
            )
        else:
            unmatched.append(name)
    return pairs, unmatched

"""Adam + cyclical learning rate training loop with checkpointing.

The loop is deterministic: every step draws its batch from a child seed of
(seed, step), so a run resumed from a checkpoint at step k continues with
exactly the batches the uninterrupted run would have seen.  Checkpoints
are written atomically (temp file + rename) as model files plus an
optimizer-state sidecar.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import data as data_mod
from .errors import ConfigError, ContractError, NumericError
from .losses import LossWeights, total_loss_parts
from .metrics import psnr, ssim
from .network import (
    ModelConfig,
    ModelParams,
    build_model,
    forward,
    load_model,
    named_parameters,
    save_model,
    set_bn_mode,
)
from .tensor import Tape, Tensor, backward

__all__ = [
    "OptimState",
    "LRSchedule",
    "TrainConfig",
    "TrainResult",
    "adam_step",
    "cyclical_lr",
    "train",
    "evaluate_model",
    "ABLATION_VARIANTS",
    "ablation_config",
]


class OptimState:
    """Per-parameter Adam moment accumulators plus the step counter."""

    def __init__(self, params: list[tuple[str, Tensor]], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params}
        self.v = {name: np.zeros_like(t.data) for name, t in params}

    def save(self, path) -> None:
        arrays = {f"m.{k}": v for k, v in self.m.items()}
        arrays.update({f"v.{k}": v for k, v in self.v.items()})
        arrays["step_count"] = np.asarray([self.step_count])
        tmp = str(path) + ".tmp"
        with open(tmp, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)

    def load(self, path) -> None:
        with np.load(path) as z:
            self.step_count = int(z["step_count"][0])
            for key in z.files:
                if key.startswith("m."):
                    self.m[key[2:]] = z[key]
                elif key.startswith("v."):
                    self.v[key[2:]] = z[key]


def adam_step(params: list[tuple[str, Tensor]], state: OptimState, lr: float) -> None:
    """One bias-corrected Adam update; gradients are zeroed afterwards."""
    missing = [name for name, t in params if t.grad is None]
    if missing:
        raise ContractError(f"adam_step called with missing gradients: {missing[:3]}...")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params:
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
        p.grad = None


@dataclass
class LRSchedule:
    """Triangular cyclical learning rate."""

    base_lr: float = 6e-4
    max_lr: float = 1.2e-3
    step_size: int = 10
    mode: str = "triangular"

    def __post_init__(self):
        if self.mode != "triangular":
            raise ConfigError(f"only the triangular policy is implemented, got {self.mode!r}")
        if not 0 < self.base_lr <= self.max_lr:
            raise ConfigError("need 0 < base_lr <= max_lr")
        if self.step_size < 1:
            raise ConfigError("step_size must be >= 1")


def cyclical_lr(step: int, s: LRSchedule) -> float:
    """Triangular wave: base at step 0, peak after ``step_size`` steps, back
    to base after a full cycle of 2 * step_size."""
    if step < 0:
        raise ContractError("step must be >= 0")
    x = abs(step / s.step_size % 2.0 - 1.0)
    return s.base_lr + (s.max_lr - s.base_lr) * max(0.0, 1.0 - x)


@dataclass
class TrainConfig:
    steps: int = 600
    batch_size: int = 2
    patch_size: int = 128
    seed: int = 0
    out_dir: str = "runs/default"
    dataset_dir: Optional[str] = None
    synthetic_pairs: int = 64
    synthetic_size: int = 160
    holdout_pairs: int = 8
    t_min: float = 0.15
    checkpoint_every: int = 500
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: LRSchedule = field(default_factory=LRSchedule)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    resume_from: Optional[str] = None
    log_every: int = 1


@dataclass
class TrainResult:
    checkpoint_path: str
    log_path: str
    steps_run: int
    first_loss: float
    final_loss: float
    holdout_psnr: float
    holdout_ssim: float
    identity_psnr: float
    aborted: bool = False


def _batch_seed(seed: int, step: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, step])


def _load_pools(cfg: TrainConfig) -> tuple[list, list]:
    if cfg.dataset_dir is not None:
        pairs, unmatched = data_mod.load_paired_dataset(cfg.dataset_dir)
        if unmatched:
            raise ContractError(f"unmatched files in {cfg.dataset_dir}: {unmatched[:5]}")
        if len(pairs) < 2:
            raise ContractError("need at least 2 pairs to split off a holdout")
        n_hold = max(1, min(cfg.holdout_pairs, len(pairs) // 4))
        return pairs[n_hold:], pairs[:n_hold]
    train_pool = data_mod.make_pool(cfg.synthetic_pairs, cfg.synthetic_size, seed=cfg.seed, t_min=cfg.t_min)
    holdout = data_mod.make_pool(cfg.holdout_pairs, cfg.synthetic_size, seed=cfg.seed + 1_000_003, t_min=cfg.t_min)
    return train_pool, holdout


def evaluate_model(m: ModelParams, pairs: list) -> tuple[float, float, float]:
    """Mean (psnr, ssim, identity_psnr) of a model over hazy/clean pairs.

    ``identity_psnr`` scores the hazy input itself, i.e. the do-nothing
    baseline the model has to beat.
    """
    set_bn_mode(m, "eval")
    ps, ss, ident = [], [], []
    for pair in pairs:
        out = _infer_padded(m, pair.hazy)
        ps.append(psnr(out, pair.clean))
        ss.append(ssim(out, pair.clean))
        ident.append(psnr(pair.hazy, pair.clean))
    return float(np.mean(ps)), float(np.mean(ss)), float(np.mean(ident))


def pad_to_multiple(img: np.ndarray, multiple: int = 32) -> tuple[np.ndarray, int, int]:
    """Reflection-pad (3,H,W) on the bottom/right up to the next multiple."""
    _, h, w = img.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    out = img
    while ph or pw:
        # np.pad "reflect" caps each step at size-1; loop for tiny images.
        step_h = min(ph, out.shape[1] - 1)
        step_w = min(pw, out.shape[2] - 1)
        if ph and step_h == 0 or pw and step_w == 0:
            raise ContractError("image too small to pad by reflection")
        out = np.pad(out, ((0, 0), (0, step_h), (0, step_w)), mode="reflect")
        ph -= step_h
        pw -= step_w
    return out, h, w


def _infer_padded(m: ModelParams, img: np.ndarray) -> np.ndarray:
    padded, h, w = pad_to_multiple(img)
    y = forward(Tensor(padded[None]), m)
    return np.clip(y.data[0, :, :h, :w], 0.0, 1.0)


def train(cfg: TrainConfig) -> TrainResult:
    """Run the optimization loop; returns paths and summary numbers.

    Aborts with :class:`NumericError` context if the loss goes non-finite,
    keeping the last good checkpoint on disk.
    """
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "loss_log.csv"
    final_ckpt = out_dir / "model_final.erra1"

    train_pool, holdout = _load_pools(cfg)
    if cfg.resume_from:
        model = load_model(cfg.resume_from)
        if model.form != "training":
            raise ContractError("cannot resume training from a fused checkpoint")
    else:
        model = build_model(cfg.model, seed=cfg.seed)
    set_bn_mode(model, "train")
    params = named_parameters(model)
    optim = OptimState(params)
    if cfg.resume_from:
        sidecar = Path(cfg.resume_from).with_suffix(".optim.npz")
        if sidecar.exists():
            optim.load(sidecar)

    weights = cfg.loss_weights
    start_step = optim.step_count
    first_loss = None
    last_loss = float("nan")
    aborted = False
    completed = False

    def write_checkpoint(tag: str) -> Path:
        path = out_dir / f"model_{tag}.erra1"
        tmp = out_dir / f".model_{tag}.tmp"
        save_model(model, tmp)
        os.replace(tmp, path)
        optim.save(path.with_suffix(".optim.npz"))
        return path

    log_fh = open(log_path, "a" if cfg.resume_from else "w", newline="")
    logger = csv.writer(log_fh)
    if not cfg.resume_from:
        logger.writerow(["step", "lr", "l1", "l_ca", "l_laplace", "total", "seconds"])

    try:
        for step in range(start_step, start_step + cfg.steps):
            t0 = time.perf_counter()
            batch = data_mod.sample_patches(
                train_pool, cfg.batch_size, cfg.patch_size, seed=_batch_seed(cfg.seed, step)
            )
            x = Tensor(batch.hazy)
            gt = Tensor(batch.clean)
            lr = cyclical_lr(step, cfg.lr)
            with Tape() as tape:
                pred = forward(x, model)
                total, l1, ca, lap = total_loss_parts(pred, gt, weights)
            loss_val = total.item()
            if not np.isfinite(loss_val):
                aborted = True
                raise NumericError(f"non-finite loss at step {step}; last good checkpoint retained")
            backward(total, tape)
            adam_step(params, optim, lr)
            for name, p in params:
                if not np.isfinite(p.data).all():
                    aborted = True
                    raise NumericError(f"parameter {name} became non-finite at step {step}")
            if first_loss is None:
                first_loss = loss_val
            last_loss = loss_val
            if (step - start_step) % cfg.log_every == 0 or step == start_step + cfg.steps - 1:
                logger.writerow(
                    [step + 1, f"{lr:.6e}", f"{l1.item():.6f}", f"{ca.item():.6f}", f"{lap.item():.6f}", f"{loss_val:.6f}", f"{time.perf_counter() - t0:.3f}"]
                )
                log_fh.flush()
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                write_checkpoint(f"step{step + 1:06d}")
        completed = True
    finally:
        log_fh.close()
        if completed:
            path = write_checkpoint("final")
        else:
            path = final_ckpt

    hold_psnr, hold_ssim, ident_psnr = evaluate_model(model, holdout)
    set_bn_mode(model, "train")
    return TrainResult(
        checkpoint_path=str(path),
        log_path=str(log_path),
        steps_run=cfg.steps,
        first_loss=float(first_loss) if first_loss is not None else float("nan"),
        final_loss=float(last_loss),
        holdout_psnr=hold_psnr,
        holdout_ssim=hold_ssim,
        identity_psnr=ident_psnr,
        aborted=aborted,
    )


# ---------------------------------------------------------------------------
# Ablation harness
# ---------------------------------------------------------------------------

# Structural variants: the bare multi-branch block, then adding batch norm
# plus attention, then also the local residual (the default), and the
# degraded one-batch-norm-per-branch variant.
ABLATION_VARIANTS = ("base", "bn_am", "bn_am_lr", "per_branch_bn")


def ablation_config(variant: str, base: Optional[ModelConfig] = None) -> ModelConfig:
    cfg = base or ModelConfig()
    if variant == "base":
        return replace(cfg, use_bn=False, use_attention=False, use_local_residual=False, bn_per_branch=False)
    if variant == "bn_am":
        return replace(cfg, use_bn=True, use_attention=True, use_local_residual=False, bn_per_branch=False)
    if variant == "bn_am_lr":
        return replace(cfg, use_bn=True, use_attention=True, use_local_residual=True, bn_per_branch=False)
    if variant == "per_branch_bn":
        return replace(cfg, use_bn=True, use_attention=True, use_local_residual=True, bn_per_branch=True)
    raise ConfigError(f"unknown ablation variant {variant!r}; choose from {ABLATION_VARIANTS}")

"""Command line interface: train, fuse, infer, evaluate, benchmark, synthesize.

Exit codes are a stable contract for scripting:
    0  success
    2  input error (bad paths, malformed files, bad arguments)
    3  numeric failure (non-finite loss or parameters)
    4  state error (e.g. fusing an already-fused model)
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from . import data as data_mod
from .errors import ConfigError, ContractError, NumericError, RephazeError, ShapeError, StateError
from .losses import LossWeights
from .metrics import psnr, ssim
from .network import forward, load_model, save_model, set_bn_mode
from .reparam import format_report, reparameterize_model, report_to_kv
from .tensor import Tensor
from .trainer import LRSchedule, TrainConfig, ablation_config, train
from .trainer import pad_to_multiple

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3
EXIT_STATE = 4


def _read_config_file(path: str) -> dict[str, str]:
    """Flat key=value file; '#' starts a comment, blank lines ignored."""
    values: dict[str, str] = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"{path}: expected key=value, got {raw!r}")
        key, val = line.split("=", 1)
        values[key.strip().replace("-", "_")] = val.strip()
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rephaze",
        description="Re-parameterizable residual attention dehazing network.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model on a paired dataset or synthetic haze")
    p_train.add_argument("--dataset", help="paired dataset root with hazy/ and clean/ PNG dirs")
    p_train.add_argument("--synthetic", action="store_true", help="train on procedurally generated pairs")
    p_train.add_argument("--out-dir", default="runs/train", help="output directory for checkpoints and logs")
    p_train.add_argument("--steps", type=int, default=600, help="optimizer steps (default 600)")
    p_train.add_argument("--batch-size", type=int, default=2, help="patches per step (default 2)")
    p_train.add_argument("--patch-size", type=int, default=128, help="square patch edge (default 128)")
    p_train.add_argument("--seed", type=int, default=0, help="seed controlling init, data and sampling")
    p_train.add_argument("--base-lr", type=float, default=6e-4, help="cycle floor learning rate (default 6e-4)")
    p_train.add_argument("--max-lr", type=float, default=1.2e-3, help="cycle peak learning rate (default 1.2e-3)")
    p_train.add_argument("--lr-step-size", type=int, default=10, help="optimizer steps per half cycle (default 10)")
    p_train.add_argument("--alpha1", type=float, default=0.5, help="color-attenuation loss weight (default 0.5)")
    p_train.add_argument("--alpha2", type=float, default=5.0, help="pyramid loss weight (default 5)")
    p_train.add_argument("--ca-alpha", type=float, default=1.0, help="saturation sub-term weight (default 1)")
    p_train.add_argument("--ca-beta", type=float, default=0.5, help="brightness sub-term weight (default 0.5)")
    p_train.add_argument("--synthetic-pairs", type=int, default=64, help="training pool size in synthetic mode")
    p_train.add_argument("--synthetic-size", type=int, default=160, help="synthetic image edge length")
    p_train.add_argument("--holdout-pairs", type=int, default=8, help="pairs reserved for final evaluation")
    p_train.add_argument("--checkpoint-every", type=int, default=500, help="steps between checkpoints")
    p_train.add_argument("--resume", help="training-form checkpoint to resume from")
    p_train.add_argument("--variant", default="bn_am_lr", help="block variant: base, bn_am, bn_am_lr, per_branch_bn")
    p_train.add_argument("--config", help="flat key=value file providing defaults for any flag above")

    p_fuse = sub.add_parser("fuse", help="fuse a training-form model into its single-path form")
    p_fuse.add_argument("model_in", help="training-form model file")
    p_fuse.add_argument("model_out", help="where to write the fused model")
    p_fuse.add_argument("--probe-size", type=int, default=64, help="spatial size of the verification probe")
    p_fuse.add_argument("--seed", type=int, default=0, help="seed for the probe batch")

    p_infer = sub.add_parser("infer", help="dehaze one PNG image")
    p_infer.add_argument("model", help="model file (either form)")
    p_infer.add_argument("image_in", help="input PNG")
    p_infer.add_argument("image_out", help="output PNG")

    p_eval = sub.add_parser("evaluate", help="PSNR/SSIM over a paired dataset directory")
    p_eval.add_argument("model", help="model file (either form)")
    p_eval.add_argument("dataset", help="root containing hazy/ and clean/ PNG dirs")
    p_eval.add_argument("--csv", dest="csv_out", help="write per-image metrics to this CSV file")

    p_bench = sub.add_parser("benchmark", help="wall-time per forward pass at a given resolution")
    p_bench.add_argument("model", help="model file (either form)")
    p_bench.add_argument("--model2", help="second model file to compare against (e.g. the fused form)")
    p_bench.add_argument("--width", type=int, default=256)
    p_bench.add_argument("--height", type=int, default=256)
    p_bench.add_argument("--repeats", type=int, default=10)
    p_bench.add_argument("--seed", type=int, default=0)

    p_syn = sub.add_parser("synthesize", help="emit a paired hazy/clean dataset from clean PNGs")
    p_syn.add_argument("clean_dir", help="directory of clean PNG images")
    p_syn.add_argument("out_dir", help="output root (hazy/ and clean/ are created)")
    p_syn.add_argument("--seed", type=int, default=0)
    p_syn.add_argument("--t-min", type=float, default=0.15, help="densest transmission value (default 0.15)")
    p_syn.add_argument("--no-haze", action="store_true", help="force transmission to 1 (hazy equals clean)")
    return parser


def _apply_config_defaults(args: argparse.Namespace, parser_flags: dict[str, type]) -> None:
    if not getattr(args, "config", None):
        return
    file_values = _read_config_file(args.config)
    defaults = build_parser().parse_args(["train", "--synthetic"])
    for key, raw in file_values.items():
        if not hasattr(args, key):
            raise ContractError(f"config file sets unknown option {key!r}")
        caster = parser_flags.get(key, str)
        value = caster(raw) if caster is not bool else raw.lower() in ("1", "true", "yes")
        # Explicit command line flags win over config file values.
        if getattr(args, key) == getattr(defaults, key, None):
            setattr(args, key, value)


def cmd_train(args) -> int:
    _apply_config_defaults(
        args,
        {
            "steps": int, "batch_size": int, "patch_size": int, "seed": int,
            "base_lr": float, "max_lr": float, "lr_step_size": int,
            "alpha1": float, "alpha2": float, "ca_alpha": float, "ca_beta": float,
            "synthetic_pairs": int, "synthetic_size": int, "holdout_pairs": int,
            "checkpoint_every": int, "synthetic": bool, "dataset": str,
            "out_dir": str, "resume": str, "variant": str,
        },
    )
    if not args.synthetic and not args.dataset:
        print("error: provide --dataset DIR or --synthetic", file=sys.stderr)
        return EXIT_INPUT
    if args.dataset and not Path(args.dataset).is_dir():
        print(f"error: dataset directory {args.dataset} does not exist", file=sys.stderr)
        return EXIT_INPUT
    cfg = TrainConfig(
        steps=args.steps,
        batch_size=args.batch_size,
        patch_size=args.patch_size,
        seed=args.seed,
        out_dir=args.out_dir,
        dataset_dir=args.dataset,
        synthetic_pairs=args.synthetic_pairs,
        synthetic_size=args.synthetic_size,
        holdout_pairs=args.holdout_pairs,
        checkpoint_every=args.checkpoint_every,
        model=ablation_config(args.variant),
        lr=LRSchedule(base_lr=args.base_lr, max_lr=args.max_lr, step_size=args.lr_step_size),
        loss_weights=LossWeights(alpha1=args.alpha1, alpha2=args.alpha2, ca_alpha=args.ca_alpha, ca_beta=args.ca_beta),
        resume_from=args.resume,
    )
    result = train(cfg)
    print(f"finished {result.steps_run} steps: loss {result.first_loss:.4f} -> {result.final_loss:.4f}")
    print(f"holdout: psnr {result.holdout_psnr:.2f} dB (identity {result.identity_psnr:.2f} dB), ssim {result.holdout_ssim:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"loss log:   {result.log_path}")
    return EXIT_OK


def cmd_fuse(args) -> int:
    model = load_model(args.model_in)
    rng = np.random.default_rng(args.seed)
    size = args.probe_size
    if size % 32:
        print(f"error: probe size must be a multiple of 32, got {size}", file=sys.stderr)
        return EXIT_INPUT
    probe = Tensor(rng.standard_normal((2, 3, size, size)).astype(np.float32))
    fused, report = reparameterize_model(model, probe)
    save_model(fused, args.model_out)
    kv_path = Path(args.model_out).with_suffix(".report.kv")
    kv_path.write_text(report_to_kv(report))
    print(format_report(report))
    print(f"fused model written to {args.model_out}")
    print(f"report written to {kv_path}")
    return EXIT_OK


def cmd_infer(args) -> int:
    model = load_model(args.model)
    set_bn_mode(model, "eval")
    img = data_mod.read_image(args.image_in)
    padded, h, w = pad_to_multiple(img)
    out = forward(Tensor(padded[None]), model)
    restored = np.clip(out.data[0, :, :h, :w], 0.0, 1.0)
    data_mod.write_image(args.image_out, restored)
    print(f"wrote {args.image_out} ({w}x{h})")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = load_model(args.model)
    set_bn_mode(model, "eval")
    pairs, unmatched = data_mod.load_paired_dataset(args.dataset)
    for name in unmatched:
        print(f"skipping unmatched file: {name}", file=sys.stderr)
    if not pairs:
        print("error: no matched hazy/clean pairs found", file=sys.stderr)
        return EXIT_INPUT
    rows = []
    for pair in pairs:
        padded, h, w = pad_to_multiple(pair.hazy)
        out = forward(Tensor(padded[None]), model)
        restored = np.clip(out.data[0, :, :h, :w], 0.0, 1.0)
        rows.append((pair.image_id, psnr(restored, pair.clean), ssim(restored, pair.clean)))
        print(f"{pair.image_id}: psnr {rows[-1][1]:.3f} dB  ssim {rows[-1][2]:.4f}")
    mean_psnr = float(np.mean([r[1] for r in rows]))
    mean_ssim = float(np.mean([r[2] for r in rows]))
    print(f"mean: psnr {mean_psnr:.3f} dB  ssim {mean_ssim:.4f} over {len(rows)} pairs")
    if args.csv_out:
        with open(args.csv_out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image", "psnr_db", "ssim"])
            writer.writerows(rows)
            writer.writerow(["mean", mean_psnr, mean_ssim])
        print(f"metrics written to {args.csv_out}")
    return EXIT_OK


def _bench_one(model, probe: Tensor, repeats: int) -> dict:
    times = []
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        forward(probe, model)
        times.append(time.perf_counter() - t0)
    arr = np.asarray(times)
    return {
        "mean": float(arr.mean()),
        "median": float(np.median(arr)),
        "std": float(arr.std()),
        "fps": 1.0 / float(np.median(arr)),
    }


def cmd_benchmark(args) -> int:
    if args.width % 32 or args.height % 32:
        print("error: width and height must be multiples of 32", file=sys.stderr)
        return EXIT_INPUT
    rng = np.random.default_rng(args.seed)
    probe = Tensor(rng.random((1, 3, args.height, args.width), dtype=np.float32))
    results = []
    for path in [args.model] + ([args.model2] if args.model2 else []):
        model = load_model(path)
        set_bn_mode(model, "eval")
        stats = _bench_one(model, probe, args.repeats)
        results.append((path, model.form, stats))
        print(
            f"{path} [{model.form}] {args.width}x{args.height}: "
            f"median {stats['median'] * 1e3:.1f} ms, mean {stats['mean'] * 1e3:.1f} ms, "
            f"std {stats['std'] * 1e3:.1f} ms, {stats['fps']:.2f} fps ({args.repeats} repeats)"
        )
    if len(results) == 2:
        t0, t1 = results[0][2]["median"], results[1][2]["median"]
        faster = results[1][0] if t1 < t0 else results[0][0]
        reduction = abs(t0 - t1) / max(t0, t1)
        print(f"faster: {faster} ({100 * reduction:.1f}% median wall-time reduction)")
    return EXIT_OK


def cmd_synthesize(args) -> int:
    clean_dir = Path(args.clean_dir)
    files = sorted(clean_dir.glob("*.png")) if clean_dir.is_dir() else []
    if not files:
        print(f"error: no PNG images found in {args.clean_dir}", file=sys.stderr)
        return EXIT_INPUT
    out_root = Path(args.out_dir)
    (out_root / "hazy").mkdir(parents=True, exist_ok=True)
    (out_root / "clean").mkdir(parents=True, exist_ok=True)
    recipe_log = out_root / "recipes.csv"
    with open(recipe_log, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "seed", "airlight_r", "airlight_g", "airlight_b", "t_min", "t_max", "t_mean"])
        for k, path in enumerate(files):
            clean = data_mod.read_image(path)
            _, h, w = clean.shape
            seed = int(np.random.SeedSequence([args.seed, k]).generate_state(1)[0])
            if args.no_haze:
                recipe = data_mod.HazeRecipe(
                    airlight=np.full(3, 0.8, dtype=np.float32),
                    transmission=np.ones((1, 1, h, w), dtype=np.float32),
                    seed=seed,
                )
            else:
                recipe = data_mod.random_recipe(h, w, seed=seed, t_min=args.t_min)
            hazy = data_mod.synthesize_haze(clean, recipe)
            data_mod.write_image(out_root / "hazy" / path.name, hazy)
            data_mod.write_image(out_root / "clean" / path.name, clean)
            a = recipe.airlight.reshape(-1)
            t = recipe.transmission
            writer.writerow(
                [path.name, seed, f"{a[0]:.4f}", f"{a[1 % a.size]:.4f}", f"{a[2 % a.size]:.4f}",
                 f"{t.min():.4f}", f"{t.max():.4f}", f"{t.mean():.4f}"]
            )
    print(f"wrote {len(files)} pairs under {out_root} (recipes in {recipe_log})")
    return EXIT_OK


_COMMANDS = {
    "train": cmd_train,
    "fuse": cmd_fuse,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "benchmark": cmd_benchmark,
    "synthesize": cmd_synthesize,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except StateError as exc:
        print(f"state error: {exc}", file=sys.stderr)
        return EXIT_STATE
    except (ContractError, ConfigError, ShapeError, RephazeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()

"""Command line interface: every subcommand plus the exit-code contract."""

import csv

import numpy as np
import pytest

from rephaze.cli import EXIT_INPUT, EXIT_OK, EXIT_STATE, main
from rephaze.data import read_image, write_image
from rephaze.metrics import PSNR_CAP
from rephaze.network import ModelConfig, build_model, load_model, save_model


@pytest.fixture
def small_model_path(tmp_path):
    cfg = ModelConfig(width=8, num_blocks=2, skip_width=4, sa_hidden=2, ca_ratio=4)
    m = build_model(cfg, seed=1)
    path = tmp_path / "small.erra1"
    save_model(m, path)
    return path


@pytest.fixture
def clean_dir(tmp_path, rng):
    d = tmp_path / "cleans"
    d.mkdir()
    for i in range(3):
        write_image(d / f"img{i}.png", rng.random((3, 48, 48)).astype(np.float32))
    return d


class TestTrainCommand:
    def test_requires_dataset_or_synthetic(self, tmp_path):
        assert main(["train", "--out-dir", str(tmp_path / "o")]) == EXIT_INPUT

    def test_missing_dataset_dir(self, tmp_path):
        code = main(["train", "--dataset", str(tmp_path / "nope"), "--out-dir", str(tmp_path / "o")])
        assert code == EXIT_INPUT

    def test_synthetic_smoke_run_writes_log(self, tmp_path):
        out = tmp_path / "run"
        code = main(
            [
                "train", "--synthetic", "--steps", "4", "--seed", "7",
                "--out-dir", str(out), "--patch-size", "32",
                "--synthetic-pairs", "4", "--synthetic-size", "48",
                "--holdout-pairs", "2", "--checkpoint-every", "0",
                "--variant", "bn_am_lr",
            ]
        )
        assert code == EXIT_OK
        with open(out / "loss_log.csv") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 1 + 4
        assert (out / "model_final.erra1").exists()

    def test_config_file_provides_defaults(self, tmp_path):
        conf = tmp_path / "train.conf"
        conf.write_text("steps = 3\npatch-size = 32\nsynthetic-pairs = 4\nsynthetic-size = 48\nholdout-pairs = 2\ncheckpoint-every = 0\n")
        out = tmp_path / "run"
        code = main(["train", "--synthetic", "--config", str(conf), "--out-dir", str(out)])
        assert code == EXIT_OK
        with open(out / "loss_log.csv") as fh:
            assert len(list(csv.reader(fh))) == 1 + 3

    def test_bad_config_key_rejected(self, tmp_path):
        conf = tmp_path / "bad.conf"
        conf.write_text("bogus-flag = 1\n")
        assert main(["train", "--synthetic", "--config", str(conf), "--out-dir", str(tmp_path / "o")]) == EXIT_INPUT


class TestFuseCommand:
    def test_fuse_writes_model_and_report(self, small_model_path, tmp_path, capsys):
        out = tmp_path / "fused.erra1"
        code = main(["fuse", str(small_model_path), str(out), "--probe-size", "32"])
        assert code == EXIT_OK
        fused = load_model(out)
        assert fused.form == "fused"
        kv = (tmp_path / "fused.report.kv").read_text()
        pairs = dict(line.split("=", 1) for line in kv.strip().splitlines())
        assert float(pairs["end_to_end_deviation"]) <= 1e-4
        assert int(pairs["params_after"]) < int(pairs["params_before"])
        assert "fusion report" in capsys.readouterr().out

    def test_fusing_fused_model_is_state_error(self, small_model_path, tmp_path):
        first = tmp_path / "fused.erra1"
        assert main(["fuse", str(small_model_path), str(first), "--probe-size", "32"]) == EXIT_OK
        again = tmp_path / "fused2.erra1"
        assert main(["fuse", str(first), str(again), "--probe-size", "32"]) == EXIT_STATE

    def test_missing_input_is_input_error(self, tmp_path):
        assert main(["fuse", str(tmp_path / "none.erra1"), str(tmp_path / "out.erra1")]) == EXIT_INPUT


class TestInferCommand:
    def test_zero_model_is_identity_on_png(self, small_model_path, tmp_path, rng):
        img = (rng.integers(0, 256, (3, 64, 64)) / 255.0).astype(np.float32)
        src = tmp_path / "in.png"
        dst = tmp_path / "out.png"
        write_image(src, img)
        assert main(["infer", str(small_model_path), str(src), str(dst)]) == EXIT_OK
        np.testing.assert_array_equal(read_image(dst), read_image(src))

    def test_output_size_preserved_for_non_multiple(self, small_model_path, tmp_path, rng):
        img = rng.random((3, 50, 70)).astype(np.float32)
        src, dst = tmp_path / "in.png", tmp_path / "out.png"
        write_image(src, img)
        assert main(["infer", str(small_model_path), str(src), str(dst)]) == EXIT_OK
        assert read_image(dst).shape == (3, 50, 70)

    def test_training_and_fused_models_agree_within_one_level(self, tmp_path, rng):
        cfg = ModelConfig(width=8, num_blocks=2, skip_width=4, sa_hidden=2, ca_ratio=4)
        m = build_model(cfg, seed=3)
        m.tail.weight.data[:] = rng.normal(0, 0.02, m.tail.weight.shape).astype(np.float32)
        train_path = tmp_path / "train_form.erra1"
        save_model(m, train_path)
        fused_path = tmp_path / "fused.erra1"
        assert main(["fuse", str(train_path), str(fused_path), "--probe-size", "32"]) == EXIT_OK
        src = tmp_path / "in.png"
        write_image(src, rng.random((3, 64, 64)).astype(np.float32))
        out_a, out_b = tmp_path / "a.png", tmp_path / "b.png"
        assert main(["infer", str(train_path), str(src), str(out_a)]) == EXIT_OK
        assert main(["infer", str(fused_path), str(src), str(out_b)]) == EXIT_OK
        a = (read_image(out_a) * 255).round()
        b = (read_image(out_b) * 255).round()
        assert np.max(np.abs(a - b)) <= 1.0

    def test_unreadable_image_is_input_error(self, small_model_path, tmp_path):
        missing = tmp_path / "missing.png"
        assert main(["infer", str(small_model_path), str(missing), str(tmp_path / "o.png")]) == EXIT_INPUT


class TestEvaluateCommand:
    def test_clean_vs_clean_hits_caps(self, small_model_path, tmp_path, rng, capsys):
        root = tmp_path / "data"
        (root / "hazy").mkdir(parents=True)
        (root / "clean").mkdir()
        for i in range(2):
            img = rng.random((3, 48, 48)).astype(np.float32)
            write_image(root / "hazy" / f"p{i}.png", img)
            write_image(root / "clean" / f"p{i}.png", img)
        csv_out = tmp_path / "metrics.csv"
        code = main(["evaluate", str(small_model_path), str(root), "--csv", str(csv_out)])
        assert code == EXIT_OK
        with open(csv_out) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["image", "psnr_db", "ssim"]
        for row in rows[1:-1]:
            assert float(row[1]) == PSNR_CAP
            assert float(row[2]) == pytest.approx(1.0, abs=1e-9)

    def test_empty_dataset_is_input_error(self, small_model_path, tmp_path):
        root = tmp_path / "data"
        (root / "hazy").mkdir(parents=True)
        (root / "clean").mkdir()
        assert main(["evaluate", str(small_model_path), str(root)]) == EXIT_INPUT

    def test_unmatched_pairs_listed_and_skipped(self, small_model_path, tmp_path, rng, capsys):
        root = tmp_path / "data"
        (root / "hazy").mkdir(parents=True)
        (root / "clean").mkdir()
        img = rng.random((3, 48, 48)).astype(np.float32)
        write_image(root / "hazy" / "a.png", img)
        write_image(root / "clean" / "a.png", img)
        write_image(root / "hazy" / "only_hazy.png", img)
        assert main(["evaluate", str(small_model_path), str(root)]) == EXIT_OK
        assert "only_hazy.png" in capsys.readouterr().err


class TestBenchmarkCommand:
    def test_single_model_runs(self, small_model_path, capsys):
        code = main(["benchmark", str(small_model_path), "--width", "64", "--height", "64", "--repeats", "2"])
        assert code == EXIT_OK
        out = capsys.readouterr().out
        assert "median" in out and "fps" in out

    def test_comparison_reports_reduction(self, small_model_path, tmp_path, capsys):
        fused = tmp_path / "fused.erra1"
        main(["fuse", str(small_model_path), str(fused), "--probe-size", "32"])
        code = main(
            ["benchmark", str(small_model_path), "--model2", str(fused),
             "--width", "64", "--height", "64", "--repeats", "3"]
        )
        assert code == EXIT_OK
        assert "wall-time reduction" in capsys.readouterr().out

    def test_rejects_unaligned_size(self, small_model_path):
        assert main(["benchmark", str(small_model_path), "--width", "100", "--height", "64"]) == EXIT_INPUT


class TestSynthesizeCommand:
    def test_deterministic_outputs(self, clean_dir, tmp_path):
        out1, out2 = tmp_path / "o1", tmp_path / "o2"
        assert main(["synthesize", str(clean_dir), str(out1), "--seed", "9"]) == EXIT_OK
        assert main(["synthesize", str(clean_dir), str(out2), "--seed", "9"]) == EXIT_OK
        for name in ("img0.png", "img1.png", "img2.png"):
            a = (out1 / "hazy" / name).read_bytes()
            b = (out2 / "hazy" / name).read_bytes()
            assert a == b

    def test_no_haze_flag_copies_clean(self, clean_dir, tmp_path):
        out = tmp_path / "o"
        assert main(["synthesize", str(clean_dir), str(out), "--no-haze"]) == EXIT_OK
        for name in ("img0.png",):
            hazy = read_image(out / "hazy" / name)
            clean = read_image(out / "clean" / name)
            np.testing.assert_array_equal(hazy, clean)

    def test_pairs_show_density_increase(self, clean_dir, tmp_path):
        from rephaze.losses import haze_density
        from rephaze.tensor import Tensor

        out = tmp_path / "o"
        assert main(["synthesize", str(clean_dir), str(out), "--seed", "3", "--t-min", "0.2"]) == EXIT_OK
        higher = 0
        for name in ("img0.png", "img1.png", "img2.png"):
            hazy = haze_density(Tensor(read_image(out / "hazy" / name)[None])).data.mean()
            clean = haze_density(Tensor(read_image(out / "clean" / name)[None])).data.mean()
            higher += hazy > clean
        assert higher >= 2

    def test_missing_clean_dir_is_input_error(self, tmp_path):
        assert main(["synthesize", str(tmp_path / "none"), str(tmp_path / "o")]) == EXIT_INPUT

    def test_recipe_log_written(self, clean_dir, tmp_path):
        out = tmp_path / "o"
        main(["synthesize", str(clean_dir), str(out), "--seed", "1"])
        with open(out / "recipes.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0][0] == "image" and len(rows) == 4

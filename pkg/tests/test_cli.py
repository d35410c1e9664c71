"""Command-line driver: config resolution, artifacts, error mapping."""

import subprocess
import sys

import numpy as np
import pytest

from hdrmeta import cli, data, unet
from hdrmeta.cli import ConfigError, load_config_file, main


TINY_TRAIN = [
    "train", "--synthetic", "9", "--synth-size", "16", "--iterations", "2",
    "--meta-batch", "1", "--depth", "1", "--base-channels", "4", "--steps", "1",
    "--mode", "fo", "--val-interval", "0",
]


def _run_tiny_train(out_dir, extra=()):
    rc = main(TINY_TRAIN + ["--out", str(out_dir), *extra])
    assert rc == 0
    return out_dir


class TestConfigFile:
    def test_parse_and_types(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text(
            "# comment line\n"
            "iterations = 7\n"
            "outer-lr = 0.25\n"
            "mode = fo\n"
            "\n"
            "synthetic = 12\n"
        )
        vals = load_config_file(p)
        assert vals == {"iterations": 7, "outer_lr": 0.25, "mode": "fo", "synthetic": 12}

    def test_unknown_key_reports_location(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("iterations = 5\nwarp_speed = 9\n")
        with pytest.raises(ConfigError, match=r"run.cfg:2"):
            load_config_file(p)

    def test_bad_value_type(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("iterations = soon\n")
        with pytest.raises(ConfigError):
            load_config_file(p)

    def test_flags_override_file(self, tmp_path, capsys):
        cfgfile = tmp_path / "run.cfg"
        cfgfile.write_text("iterations = 50\nsynth-size = 16\n")
        out = tmp_path / "run"
        rc = main(TINY_TRAIN + ["--config", str(cfgfile), "--out", str(out)])
        assert rc == 0
        manifest = (out / "manifest.txt").read_text()
        assert "iterations=2" in manifest  # flag wins over the file's 50

    def test_file_fills_unset_flags(self, tmp_path):
        cfgfile = tmp_path / "run.cfg"
        cfgfile.write_text("lambda = 2.5\n")
        out = tmp_path / "run"
        rc = main(TINY_TRAIN + ["--config", str(cfgfile), "--out", str(out)])
        assert rc == 0
        assert "lam=2.5" in (out / "manifest.txt").read_text()


class TestTrain:
    def test_writes_artifacts(self, tmp_path, capsys):
        out = _run_tiny_train(tmp_path / "run")
        for name in ("final.params", "best.params", "loss_history.csv", "manifest.txt"):
            assert (out / name).is_file(), name
        hist = (out / "loss_history.csv").read_text().strip().split("\n")
        assert hist[0] == "iteration,loss"
        assert len(hist) == 3  # header + 2 iterations
        assert capsys.readouterr().out.count("iter ") == 2

    def test_checkpoint_is_loadable(self, tmp_path):
        out = _run_tiny_train(tmp_path / "run")
        params = unet.load_params(out / "final.params")
        assert params.config.depth == 1 and params.config.base_channels == 4

    def test_byte_identical_histories_for_same_seed(self, tmp_path):
        a = _run_tiny_train(tmp_path / "a", extra=["--seed", "3"])
        b = _run_tiny_train(tmp_path / "b", extra=["--seed", "3"])
        assert (a / "loss_history.csv").read_bytes() == (b / "loss_history.csv").read_bytes()

    def test_different_seed_changes_history(self, tmp_path):
        a = _run_tiny_train(tmp_path / "a", extra=["--seed", "3"])
        b = _run_tiny_train(tmp_path / "b", extra=["--seed", "4"])
        assert (a / "loss_history.csv").read_bytes() != (b / "loss_history.csv").read_bytes()

    def test_val_history_written_when_validating(self, tmp_path):
        out = tmp_path / "run"
        args = list(TINY_TRAIN)
        args[args.index("--synthetic") + 1] = "12"  # nonempty val partition
        args[args.index("--val-interval") + 1] = "1"
        rc = main(args + ["--out", str(out)])
        assert rc == 0
        lines = (out / "val_history.csv").read_text().strip().split("\n")
        assert lines[0] == "iteration,val_ssim"
        assert len(lines) == 3

    def test_missing_dataset_is_user_error(self, tmp_path, capsys):
        rc = main(["train", "--dataset", str(tmp_path / "nope"), "--out", str(tmp_path / "o")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err

    def test_requires_dataset_or_synthetic(self, tmp_path, capsys):
        rc = main(["train", "--out", str(tmp_path / "o")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestEval:
    @pytest.fixture()
    def ckpt(self, tmp_path):
        out = _run_tiny_train(tmp_path / "train")
        return out / "best.params"

    def test_writes_reports(self, tmp_path, ckpt, capsys):
        out = tmp_path / "ev"
        rc = main([
            "eval", "--checkpoint", str(ckpt), "--synthetic", "12", "--synth-size", "16",
            "--steps", "1", "--out", str(out),
        ])
        assert rc == 0
        summary = (out / "summary.csv").read_text().strip().split("\n")
        assert summary[0] == "mode,mean_ssim,mean_psnr_db,count"
        modes = {line.split(",")[0] for line in summary[1:]}
        assert modes == {"ldr_no_recon", "single_shot", "adapt_true_hdr"}
        details = (out / "details.csv").read_text().strip().split("\n")
        assert details[0] == "scene_id,holdout_ev,mode,ssim,psnr_db"
        printed = capsys.readouterr().out
        assert "single_shot" in printed

    def test_eval_mode_flag(self, tmp_path, ckpt):
        out = tmp_path / "ev"
        rc = main([
            "eval", "--checkpoint", str(ckpt), "--synthetic", "12", "--synth-size", "16",
            "--eval-mode", "single_shot", "--out", str(out),
        ])
        assert rc == 0
        summary = (out / "summary.csv").read_text()
        assert "adapt_true_hdr" not in summary

    def test_eval_scores_only_the_heldout_partition(self, tmp_path, ckpt):
        # same --synthetic/--seed as training: eval must consume exactly the
        # test partition of that split, never scenes the run trained on
        out = tmp_path / "ev"
        rc = main(["eval", "--checkpoint", str(ckpt), "--synthetic", "12", "--synth-size", "16",
                   "--eval-mode", "single_shot", "--out", str(out)])
        assert rc == 0
        scenes = data.make_synthetic_dataset(12, base_seed=0, size=16)
        train_split, _, test_split = data.split_scenes(scenes, seed=0)
        details = (out / "details.csv").read_text().strip().split("\n")[1:]
        eval_ids = {line.split(",")[0] for line in details}
        assert eval_ids == {s.scene_id for s in test_split}
        assert not eval_ids & {s.scene_id for s in train_split}

    def test_previews_written(self, tmp_path, ckpt):
        out = tmp_path / "ev"
        rc = main([
            "eval", "--checkpoint", str(ckpt), "--synthetic", "12", "--synth-size", "16",
            "--eval-mode", "adapt_true_hdr", "--previews", "--out", str(out),
        ])
        assert rc == 0
        pngs = list(out.glob("previews/**/*.png"))
        assert pngs, "no preview images written"

    def test_bad_checkpoint_is_user_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.params"
        bad.write_bytes(b"not a checkpoint")
        rc = main(["eval", "--checkpoint", str(bad), "--synthetic", "12", "--synth-size", "16",
                   "--out", str(tmp_path / "o")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestAdapt:
    def test_adapts_one_scene(self, tmp_path, capsys):
        train_out = _run_tiny_train(tmp_path / "train")
        scene = data.make_synthetic_scene(42, size=16)
        scene_dir = tmp_path / scene.scene_id
        scene_dir.mkdir()
        data.write_scene(scene_dir, scene)
        out = tmp_path / "ad"
        rc = main([
            "adapt", "--checkpoint", str(train_out / "best.params"),
            "--scene-dir", str(scene_dir), "--holdout-ev", "-2",
            "--steps", "1", "--out", str(out),
        ])
        assert rc == 0
        assert (out / "adapted.params").is_file()
        assert (out / "recon.png").is_file()
        metrics = (out / "metrics.csv").read_text().strip().split("\n")
        assert metrics[0] == "scene_id,holdout_ev,ssim,psnr_db"
        assert metrics[1].split(",")[1] == "-2"
        assert "ssim=" in capsys.readouterr().out
        adapted = unet.load_params(out / "adapted.params")
        assert adapted.config.depth == 1

    def test_missing_scene_dir(self, tmp_path, capsys):
        train_out = _run_tiny_train(tmp_path / "train")
        rc = main([
            "adapt", "--checkpoint", str(train_out / "best.params"),
            "--scene-dir", str(tmp_path / "ghost"), "--out", str(tmp_path / "o"),
        ])
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestGradcheck:
    def test_ops_suite_passes(self, capsys):
        rc = main(["gradcheck", "--suite", "ops"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "gradient checks passed" in out
        assert "FAIL" not in out


class TestParser:
    def test_help_via_subprocess(self):
        res = subprocess.run(
            [sys.executable, "-m", "hdrmeta.cli", "--help"],
            capture_output=True, text=True, timeout=60,
        )
        assert res.returncode == 0
        for cmd in ("train", "eval", "adapt", "gradcheck"):
            assert cmd in res.stdout

    def test_version(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["--version"])
        assert e.value.code == 0

    def test_invalid_mode_rejected_by_parser(self):
        with pytest.raises(SystemExit):
            main(TINY_TRAIN + ["--mode", "third_order"])

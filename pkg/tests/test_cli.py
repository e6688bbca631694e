import json
import os
import re

import numpy as np
import pytest
from PIL import Image

from changedet.cli import main
from changedet.core import load_dataset
from changedet.net import load_checkpoint
from changedet.trainer import TrainLog

TINY_BACKBONE = {"widths": [8, 8, 16, 16], "strides": [1, 2, 1, 2], "tap_layer": 4}


def synth_args(out, seed="1", count="8", split="train"):
    return [
        "synth", "--count", count, "--size", "32", "64",
        "--cutout-size", "8", "12", "--seed", seed, "--split", split,
        "--out", out,
    ]


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """Shared workspace: tiny config, synthetic train/test data, a checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({
        "backbone": TINY_BACKBONE,
        "train": {"image_size": [32, 64], "batch_size": 2},
    }))
    train_dir, test_dir = str(root / "train"), str(root / "test")
    assert main(synth_args(train_dir, seed="1")) == 0
    assert main(synth_args(test_dir, seed="2", count="4", split="test")) == 0
    run = str(root / "run")
    rc = main(["train", "--config", str(cfg), "--data", train_dir,
               "--iters", "3", "--seed", "5", "--out", run])
    assert rc == 0
    return {
        "root": root,
        "config": str(cfg),
        "train_data": train_dir,
        "test_data": test_dir,
        "ckpt": os.path.join(run, "model.ckpt"),
        "run": run,
    }


def digest_of(out: str) -> str:
    match = re.search(r"digest (\w+)", out)
    assert match, out
    return match.group(1)


class TestExitCodes:
    def test_no_command_is_usage_error(self, capsys):
        assert main([]) == 1

    def test_unknown_command(self, capsys):
        assert main(["transmogrify"]) == 1

    def test_missing_required_flag(self, capsys):
        assert main(["synth"]) == 1

    def test_help_exits_zero(self, capsys):
        assert main(["--help"]) == 0
        assert "synth" in capsys.readouterr().out

    def test_bad_config_value_is_one(self, tmp_path, capsys):
        rc = main(synth_args(str(tmp_path / "d")) + ["--paste-rate", "-2"])
        assert rc == 1

    def test_missing_data_dir_is_two(self, ws, capsys):
        rc = main(["train", "--config", ws["config"],
                   "--data", str(ws["root"] / "nope"), "--iters", "1",
                   "--out", str(ws["root"] / "x")])
        assert rc == 2

    def test_missing_config_file_is_two(self, tmp_path, capsys):
        rc = main(synth_args(str(tmp_path / "d"))
                  + ["--config", str(tmp_path / "absent.json")])
        assert rc == 2

    def test_unparseable_config_is_one(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(synth_args(str(tmp_path / "d")) + ["--config", str(bad)]) == 1

    def test_unknown_config_key_is_one(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"synth": {"paste_speed": 1}}))
        assert main(synth_args(str(tmp_path / "d")) + ["--config", str(bad)]) == 1

    def test_numerical_abort_is_three(self, ws, tmp_path, capsys):
        # absurd lr blows the logits up to inf within an iteration or two
        rc = main(["train", "--config", ws["config"], "--data", ws["train_data"],
                   "--iters", "6", "--lr", "1e12", "--seed", "1",
                   "--out", str(tmp_path / "run")])
        assert rc == 3
        assert "non-finite" in capsys.readouterr().err


class TestSynth:
    def test_writes_dataset_and_digest(self, ws, tmp_path, capsys):
        out = str(tmp_path / "d")
        assert main(synth_args(out)) == 0
        printed = digest_of(capsys.readouterr().out)
        samples = load_dataset(out)
        assert len(samples) == 8
        assert all(s.mask is not None for s in samples)
        assert all(s.pair.shape == (32, 64) for s in samples)
        assert len(printed) == 64

    def test_deterministic_digest(self, tmp_path, capsys):
        outs = []
        for name in ("a", "b"):
            assert main(synth_args(str(tmp_path / name), seed="9")) == 0
            outs.append(digest_of(capsys.readouterr().out))
        assert outs[0] == outs[1]

    def test_seed_changes_digest(self, tmp_path, capsys):
        outs = []
        for name, seed in (("a", "3"), ("b", "4")):
            assert main(synth_args(str(tmp_path / name), seed=seed)) == 0
            outs.append(digest_of(capsys.readouterr().out))
        assert outs[0] != outs[1]

    def test_validation_precedes_side_effects(self, tmp_path, capsys):
        out = tmp_path / "d"
        rc = main(synth_args(str(out)) + ["--paste-rate", "-1"])
        assert rc == 1
        assert not out.exists()

    def test_config_file_layering_flags_win(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"synth": {"paste_rate": 0.0}}))
        no_paste = str(tmp_path / "empty")
        assert main(synth_args(no_paste) + ["--config", str(cfg)]) == 0
        assert all(s.mask.data.sum() == 0 for s in load_dataset(no_paste))
        pasted = str(tmp_path / "full")
        rc = main(synth_args(pasted)
                  + ["--config", str(cfg), "--paste-rate", "4.0"])
        assert rc == 0
        assert any(s.mask.data.sum() > 0 for s in load_dataset(pasted))


class TestTrain:
    def test_zero_iters_saves_initial_checkpoint(self, ws, tmp_path, capsys):
        out = str(tmp_path / "run0")
        rc = main(["train", "--config", ws["config"], "--data", ws["train_data"],
                   "--iters", "0", "--seed", "5", "--out", out])
        assert rc == 0
        assert "trained 0 iters" in capsys.readouterr().out
        model = load_checkpoint(os.path.join(out, "model.ckpt"))
        assert model.spec.tap_layer == 4
        assert not os.path.exists(os.path.join(out, "train_log.jsonl"))

    def test_checkpoint_and_log_written(self, ws):
        assert os.path.exists(ws["ckpt"])
        log = TrainLog.load(os.path.join(ws["run"], "train_log.jsonl"))
        assert [r["iter"] for r in log.records] == [0, 1, 2]

    def test_flag_mapping_reaches_checkpoint(self, ws, tmp_path):
        out = str(tmp_path / "run")
        rc = main(["train", "--config", ws["config"], "--data", ws["train_data"],
                   "--iters", "1", "--tied", "true", "--tail", "2",
                   "--seed", "5", "--out", out])
        assert rc == 0
        model = load_checkpoint(os.path.join(out, "model.ckpt"))
        assert model.weight_tying == "tied"
        assert model.encoder_b is model.encoder_a
        assert model.trainable_tail_k == 2

    def test_combined_flag_set(self, ws, tmp_path):
        out = str(tmp_path / "run")
        rc = main(["train", "--config", ws["config"], "--data", ws["train_data"],
                   "--iters", "1", "--loss", "bce+dice", "--tail", "3",
                   "--tied", "false", "--seed", "5", "--out", out])
        assert rc == 0
        model = load_checkpoint(os.path.join(out, "model.ckpt"))
        assert model.weight_tying == "untied"
        assert model.encoder_b is not model.encoder_a
        assert model.trainable_tail_k == 3
        row = TrainLog.load(os.path.join(out, "train_log.jsonl")).final
        assert row["loss_total"] == row["loss_bce"] + row["loss_dice"]

    def test_loss_flag_selects_mode(self, ws, tmp_path):
        out = str(tmp_path / "run")
        rc = main(["train", "--config", ws["config"], "--data", ws["train_data"],
                   "--iters", "2", "--loss", "bce", "--seed", "5", "--out", out])
        assert rc == 0
        for row in TrainLog.load(os.path.join(out, "train_log.jsonl")).records:
            assert row["loss_total"] == row["loss_bce"]

    def test_identical_runs_identical_losses(self, ws, tmp_path):
        seqs = []
        for name in ("r1", "r2"):
            out = str(tmp_path / name)
            rc = main(["train", "--config", ws["config"], "--data", ws["train_data"],
                       "--iters", "3", "--seed", "7", "--out", out])
            assert rc == 0
            log = TrainLog.load(os.path.join(out, "train_log.jsonl"))
            seqs.append([r["loss_total"] for r in log.records])
        assert seqs[0] == seqs[1]


class TestEval:
    def test_report_written_and_echoes_config(self, ws, tmp_path, capsys):
        out = str(tmp_path / "e")
        rc = main(["eval", "--checkpoint", ws["ckpt"], "--data", ws["test_data"],
                   "--tau", "0.5", "--out", out])
        assert rc == 0
        assert re.search(r"P=\d\.\d{3} R=\d\.\d{3} F1=\d\.\d{3}",
                         capsys.readouterr().out)
        text = open(os.path.join(out, "eval_report.tsv")).read()
        assert "iou_tau=0.5" in text
        assert "precision\trecall\tf1\ttp\tfp\tfn" in text

    def test_rerun_byte_identical(self, ws, tmp_path):
        blobs = []
        for name in ("e1", "e2"):
            out = str(tmp_path / name)
            assert main(["eval", "--checkpoint", ws["ckpt"],
                         "--data", ws["test_data"], "--out", out]) == 0
            blobs.append(open(os.path.join(out, "eval_report.tsv"), "rb").read())
        assert blobs[0] == blobs[1]

    def test_threshold_sweep_writes_points(self, ws, tmp_path, capsys):
        out = str(tmp_path / "e")
        rc = main(["eval", "--checkpoint", ws["ckpt"], "--data", ws["test_data"],
                   "--thresholds", "0.3", "0.5", "0.7", "--out", out])
        assert rc == 0
        assert "AUC=" in capsys.readouterr().out
        rows = open(os.path.join(out, "pr_points.csv")).read().strip().splitlines()
        assert rows[0] == "threshold,precision,recall"
        assert len(rows) == 4

    def test_missing_checkpoint_is_two(self, ws, tmp_path, capsys):
        rc = main(["eval", "--checkpoint", str(tmp_path / "no.ckpt"),
                   "--data", ws["test_data"], "--out", str(tmp_path / "e")])
        assert rc == 2


class TestInfer:
    def test_mask_and_regions_written(self, ws, tmp_path, capsys):
        out = str(tmp_path / "i")
        rc = main(["infer", "--checkpoint", ws["ckpt"],
                   "--t0", os.path.join(ws["test_data"], "t0", "00000.png"),
                   "--t1", os.path.join(ws["test_data"], "t1", "00000.png"),
                   "--out", out])
        assert rc == 0
        assert "region(s)" in capsys.readouterr().out
        mask = np.array(Image.open(os.path.join(out, "mask.png")))
        assert mask.shape == (32, 64)
        assert set(np.unique(mask)) <= {0, 255}
        rows = open(os.path.join(out, "mask_regions.csv")).read().splitlines()
        assert rows[0] == "region,area,min_row,min_col,max_row,max_col"

    def test_min_area_filter_empties_mask(self, ws, tmp_path, capsys):
        out = str(tmp_path / "i")
        rc = main(["infer", "--checkpoint", ws["ckpt"],
                   "--t0", os.path.join(ws["test_data"], "t0", "00001.png"),
                   "--t1", os.path.join(ws["test_data"], "t1", "00001.png"),
                   "--min-area", "100000", "--out", out])
        assert rc == 0
        assert "0 region(s), 0 changed pixel(s)" in capsys.readouterr().out
        assert np.array(Image.open(os.path.join(out, "mask.png"))).sum() == 0

    def test_config_file_min_area_honored(self, ws, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"eval": {"min_area": 100000}}))
        out = str(tmp_path / "i")
        rc = main(["infer", "--checkpoint", ws["ckpt"], "--config", str(cfg),
                   "--t0", os.path.join(ws["test_data"], "t0", "00001.png"),
                   "--t1", os.path.join(ws["test_data"], "t1", "00001.png"),
                   "--out", out])
        assert rc == 0
        assert "0 region(s)" in capsys.readouterr().out

    def test_size_mismatch_is_one(self, ws, tmp_path, capsys):
        small = tmp_path / "small.png"
        Image.fromarray(
            np.zeros((16, 16, 3), dtype=np.uint8), mode="RGB"
        ).save(str(small))
        rc = main(["infer", "--checkpoint", ws["ckpt"],
                   "--t0", os.path.join(ws["test_data"], "t0", "00000.png"),
                   "--t1", str(small), "--out", str(tmp_path / "i")])
        assert rc == 1

    def test_mask_out_flag(self, ws, tmp_path):
        target = str(tmp_path / "custom.png")
        rc = main(["infer", "--checkpoint", ws["ckpt"],
                   "--t0", os.path.join(ws["test_data"], "t0", "00000.png"),
                   "--t1", os.path.join(ws["test_data"], "t1", "00000.png"),
                   "--mask-out", target, "--out", str(tmp_path / "i")])
        assert rc == 0
        assert os.path.exists(target)
        assert os.path.exists(str(tmp_path / "custom_regions.csv"))


class TestAblate:
    def test_loss_mode_table(self, ws, tmp_path, capsys):
        out = str(tmp_path / "a")
        rc = main(["ablate", "--config", ws["config"], "--axis", "loss_mode",
                   "--values", "bce,dice", "--data", ws["train_data"],
                   "--test-data", ws["test_data"], "--iters", "2",
                   "--seed", "3", "--out", out])
        assert rc == 0
        lines = open(os.path.join(out, "ablation_loss_mode.tsv")).read().strip().splitlines()
        assert lines[0] == "value\tprecision\trecall\tf1"
        assert len(lines) == 3
        assert lines[1].startswith("bce\t")
        assert lines[2].startswith("dice\t")

    def test_unknown_axis_is_usage_error(self, ws, tmp_path, capsys):
        rc = main(["ablate", "--config", ws["config"], "--axis", "optimizer",
                   "--values", "a", "--data", ws["train_data"],
                   "--test-data", ws["test_data"], "--out", str(tmp_path / "a")])
        assert rc == 1

    def test_shadow_axis_parses_booleans(self, ws, tmp_path, capsys):
        out = str(tmp_path / "a")
        rc = main(["ablate", "--config", ws["config"], "--axis", "shadow_aug",
                   "--values", "off,on", "--data", ws["train_data"],
                   "--test-data", ws["test_data"], "--iters", "1",
                   "--seed", "3", "--out", out])
        assert rc == 0
        lines = open(os.path.join(out, "ablation_shadow_aug.tsv")).read().strip().splitlines()
        assert lines[1].startswith("False\t")
        assert lines[2].startswith("True\t")


class TestPrPlot:
    def _points_file(self, path, rows):
        with open(path, "w") as f:
            f.write("threshold,precision,recall\n")
            for row in rows:
                f.write(",".join(f"{v:.6f}" for v in row) + "\n")

    def test_plot_written_with_auc(self, tmp_path, capsys):
        pts = str(tmp_path / "curve.csv")
        self._points_file(pts, [(0.3, 0.6, 0.9), (0.5, 0.8, 0.7), (0.7, 0.9, 0.4)])
        img = str(tmp_path / "pr.png")
        rc = main(["pr-plot", pts, "--out-image", img])
        assert rc == 0
        assert "AUC curve =" in capsys.readouterr().out
        assert os.path.getsize(img) > 0

    def test_two_curves(self, tmp_path, capsys):
        a, b = str(tmp_path / "a.csv"), str(tmp_path / "b.csv")
        self._points_file(a, [(0.5, 0.8, 0.7)])
        self._points_file(b, [(0.5, 0.6, 0.9)])
        rc = main(["pr-plot", a, b, "--out-image", str(tmp_path / "pr.png")])
        assert rc == 0
        out = capsys.readouterr().out
        assert "AUC a =" in out
        assert "AUC b =" in out

    def test_empty_file_is_two(self, tmp_path, capsys):
        empty = tmp_path / "empty.csv"
        empty.write_text("")
        rc = main(["pr-plot", str(empty), "--out-image", str(tmp_path / "pr.png")])
        assert rc == 2

    def test_bad_header_is_two(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("a,b,c\n1,2,3\n")
        rc = main(["pr-plot", str(bad), "--out-image", str(tmp_path / "pr.png")])
        assert rc == 2

    def test_missing_file_is_two(self, tmp_path, capsys):
        rc = main(["pr-plot", str(tmp_path / "absent.csv"),
                   "--out-image", str(tmp_path / "pr.png")])
        assert rc == 2

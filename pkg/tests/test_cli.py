"""Command-line behavior: exit codes, run artifacts, preset resolution."""

import dataclasses
import json

import numpy as np
import pytest

from rau.cli import (
    EXIT_BAD_CONFIG,
    PRESETS,
    RunConfig,
    build_parser,
    main,
    resolve_config,
)
from rau.linalg import Rng
from rau.models import build_classifier, save_checkpoint


def _train_args(tmp_path, *extra):
    return ["train", "--task", "synthetic", "--cell", "rau", "--epochs", "1",
            "--seed", "7", "--out", str(tmp_path), *extra]


def _read_metrics(out_dir):
    path = out_dir / "synthetic-rau-seed7" / "metrics.jsonl"
    return [json.loads(line) for line in path.read_text().splitlines()]


class TestTrainCommand:
    def test_smoke_produces_three_files(self, tmp_path):
        assert main(_train_args(tmp_path, "--max-steps", "3")) == 0
        run_dir = tmp_path / "synthetic-rau-seed7"
        assert sorted(p.name for p in run_dir.iterdir()) == ["config.json", "metrics.jsonl", "model.bin"]

    def test_rerun_identical_metrics_modulo_wall_ms(self, tmp_path):
        main(_train_args(tmp_path / "a", "--max-steps", "5"))
        main(_train_args(tmp_path / "b", "--max-steps", "5"))
        rec_a = _read_metrics(tmp_path / "a")
        rec_b = _read_metrics(tmp_path / "b")
        for r in rec_a + rec_b:
            del r["wall_ms"]
        assert rec_a == rec_b

    def test_bad_task_exits_2(self, tmp_path, capsys):
        rc = main(["train", "--task", "ptb", "--out", str(tmp_path)])
        assert rc == EXIT_BAD_CONFIG
        assert "data-dir" in capsys.readouterr().err

    def test_unknown_config_key_exits_2(self, tmp_path):
        cfg_file = tmp_path / "cfg.json"
        cfg_file.write_text(json.dumps({"no_such_knob": 1}))
        rc = main(_train_args(tmp_path, "--config", str(cfg_file)))
        assert rc == EXIT_BAD_CONFIG

    def test_config_file_merged_under_flags(self, tmp_path):
        cfg_file = tmp_path / "cfg.json"
        cfg_file.write_text(json.dumps({"hidden": 32, "lr": 0.5}))
        args = build_parser().parse_args(_train_args(tmp_path, "--config", str(cfg_file), "--lr", "0.25"))
        cfg = resolve_config(args)
        assert cfg.hidden == 32   # from file
        assert cfg.lr == 0.25     # flag wins
        assert cfg.epochs == 1


class TestPresets:
    def test_small_lm_preset_values(self):
        args = build_parser().parse_args(
            ["train", "--preset", "ptb-small", "--data-dir", "unused"])
        cfg = resolve_config(args)
        assert cfg.hidden == 200
        assert cfg.layers == 2
        assert cfg.decay_factor == 0.5
        assert cfg.batch_size == 20
        assert cfg.vocab == 10000
        assert cfg.dropout == 0.0
        assert cfg.init_scale == 0.1
        assert cfg.optimizer == "sgd" and cfg.lr == 1.0
        assert cfg.epochs == 3  # desk-scale epoch budget

    def test_desk_scale_off_keeps_published_epochs(self):
        args = build_parser().parse_args(
            ["train", "--preset", "ptb-small", "--data-dir", "unused", "--no-desk-scale"])
        cfg = resolve_config(args)
        assert cfg.epochs == 13

    def test_medium_large_lm_presets(self):
        assert PRESETS["ptb-medium"]["hidden"] == 650
        assert PRESETS["ptb-medium"]["decay_factor"] == 0.8
        assert PRESETS["ptb-medium"]["dropout"] == 0.5
        assert PRESETS["ptb-medium"]["init_scale"] == 0.05
        assert PRESETS["ptb-large"]["hidden"] == 1500
        assert PRESETS["ptb-large"]["init_scale"] == 0.04
        assert PRESETS["ptb-large"]["dropout"] == 0.65
        assert abs(PRESETS["ptb-large"]["decay_factor"] - 1 / 1.5) < 1e-12

    def test_image_task_presets(self):
        for name in ("mnist", "fashion"):
            p = PRESETS[name]
            assert p["hidden"] == 128
            assert p["batch_size"] == 128
            assert p["optimizer"] == "adam"
            assert p["epochs"] == 213

    def test_sentiment_preset(self):
        p = PRESETS["sentiment"]
        assert p["hidden"] == 128 and p["dropout"] == 0.5 and p["emb_dim"] == 100
        assert p["epochs"] == 100 and p["batch_size"] == 128


class TestImageTaskPath:
    """Drives the IDX image pipeline end to end on crafted, learnable images."""

    @pytest.fixture
    def image_dir(self, tmp_path):
        from conftest import write_idx_pair

        rng = Rng(55)
        def make(n):
            labels = (rng.uniform01(n) * 10).astype(np.uint8)
            images = (rng.uniform01((n, 28, 28)) * 40).astype(np.uint8)
            for i, lbl in enumerate(labels):
                images[i, :, 2 + 2 * int(lbl)] = 250  # one bright column per class
            return images, labels

        d = tmp_path / "idx"
        d.mkdir()
        for split, n in (("train", 256), ("t10k", 64)):
            images, labels = make(n)
            img, lbl = write_idx_pair(d, images, labels)
            img.rename(d / f"{split}-images-idx3-ubyte")
            lbl.rename(d / f"{split}-labels-idx1-ubyte")
        return d

    def test_end_to_end(self, image_dir, tmp_path):
        rc = main(["train", "--task", "mnist-rows", "--cell", "gru", "--data-dir", str(image_dir),
                   "--hidden", "24", "--classes", "10", "--batch-size", "32", "--epochs", "3",
                   "--lr", "0.01", "--init-scale", "0.2", "--seed", "5",
                   "--out", str(tmp_path / "out")])
        assert rc == 0
        run_dir = tmp_path / "out" / "mnist-rows-gru-seed5"
        records = [json.loads(line) for line in (run_dir / "metrics.jsonl").read_text().splitlines()]
        final = [r for r in records if r["split"] == "test"][-1]
        assert final["metric_value"] >= 0.8, final


class TestSentimentTask:
    @pytest.fixture
    def imdb_like(self, tmp_path):
        texts = {
            "pos": ["a wonderful heartfelt film", "brilliant acting and a great story",
                    "loved every minute", "simply excellent"],
            "neg": ["a dull waste of time", "terrible script and worse acting",
                    "i want my money back", "painfully boring"],
        }
        for split in ("train", "test"):
            for label, docs in texts.items():
                d = tmp_path / "imdb" / split / label
                d.mkdir(parents=True)
                for i, doc in enumerate(docs):
                    (d / f"{i}.txt").write_text(doc)
        return tmp_path / "imdb"

    def test_end_to_end(self, imdb_like, tmp_path, capsys):
        rc = main(["train", "--task", "sentiment", "--cell", "gru", "--data-dir", str(imdb_like),
                   "--hidden", "8", "--emb-dim", "8", "--vocab", "40", "--max-len", "6",
                   "--classes", "2", "--batch-size", "4", "--epochs", "1", "--seed", "3",
                   "--out", str(tmp_path / "out")])
        assert rc == 0
        run_dir = tmp_path / "out" / "sentiment-gru-seed3"
        records = [json.loads(line) for line in (run_dir / "metrics.jsonl").read_text().splitlines()]
        assert {r["split"] for r in records} == {"train", "test"}
        ckpt = run_dir / "model.bin"
        capsys.readouterr()
        assert main(["eval", str(ckpt), "--split", "test", "--data-dir", str(imdb_like)]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["metric_name"] == "accuracy"


class TestPtbStyleTask:
    @pytest.fixture
    def corpus_dir(self, tmp_path):
        rng = Rng(44)
        words = [f"w{i}" for i in range(20)]
        def make(n_lines):
            lines = []
            for _ in range(n_lines):
                k = 3 + rng.integers(6)
                lines.append(" ".join(words[rng.integers(20)] for _ in range(k)))
            return "\n".join(lines) + "\n"
        d = tmp_path / "corpus"
        d.mkdir()
        (d / "ptb.train.txt").write_text(make(120))
        (d / "ptb.valid.txt").write_text(make(30))
        (d / "ptb.test.txt").write_text(make(30))
        return d

    def test_end_to_end(self, corpus_dir, tmp_path, capsys):
        rc = main(["train", "--task", "ptb", "--cell", "rau", "--data-dir", str(corpus_dir),
                   "--hidden", "8", "--layers", "2", "--unroll", "5", "--batch-size", "2",
                   "--vocab", "30", "--epochs", "2", "--lr", "0.5", "--optimizer", "sgd",
                   "--seed", "3", "--out", str(tmp_path / "out")])
        assert rc == 0
        run_dir = tmp_path / "out" / "ptb-rau-seed3"
        records = [json.loads(line) for line in (run_dir / "metrics.jsonl").read_text().splitlines()]
        splits = [r["split"] for r in records]
        assert splits.count("train") == 2 and splits.count("valid") == 2 and splits.count("test") == 1
        assert all(r["metric_name"] == "perplexity" for r in records)
        capsys.readouterr()
        assert main(["eval", str(run_dir / "model.bin"), "--split", "valid"]) == 0
        out = json.loads(capsys.readouterr().out)
        final_valid = [r for r in records if r["split"] == "valid"][-1]
        assert out["loss"] == final_valid["loss"]
        assert out["metric_value"] == final_valid["metric_value"]


class TestEvalCommand:
    def test_eval_matches_final_train_record(self, tmp_path, capsys):
        main(_train_args(tmp_path, "--max-steps", "3"))
        capsys.readouterr()
        ckpt = tmp_path / "synthetic-rau-seed7" / "model.bin"
        assert main(["eval", str(ckpt), "--split", "test"]) == 0
        out = json.loads(capsys.readouterr().out)
        final_test = [r for r in _read_metrics(tmp_path) if r["split"] == "test"][-1]
        assert out["loss"] == final_test["loss"]
        assert out["metric_value"] == final_test["metric_value"]

    def test_zero_init_checkpoint_scores_chance(self, tmp_path, capsys):
        mdl = build_classifier("gru", 8, 16, 1, 4, 0.0, Rng(0))
        cfg = dataclasses.asdict(RunConfig(task="synthetic", cell="gru", seed=7))
        ckpt = tmp_path / "zero.bin"
        save_checkpoint(ckpt, mdl, cfg)
        assert main(["eval", str(ckpt), "--split", "test"]) == 0
        out = json.loads(capsys.readouterr().out)
        assert abs(out["metric_value"] - 0.25) < 0.05

    def test_missing_checkpoint_exits_2(self, tmp_path, capsys):
        rc = main(["eval", str(tmp_path / "nope.bin")])
        assert rc == EXIT_BAD_CONFIG
        capsys.readouterr()


class TestGradcheckCommand:
    def test_passes_for_all_cells(self, capsys):
        for cell in ("rau", "gru", "lstm"):
            rc = main(["gradcheck", "--cell", cell, "--m", "2", "--n", "3", "--T", "4",
                       "--trials", "2", "--seed", "9"])
            out = capsys.readouterr().out
            assert rc == 0, out
            assert "gradcheck PASSED" in out

    def test_perturbed_backward_exits_1(self, capsys):
        rc = main(["gradcheck", "--cell", "gru", "--m", "2", "--n", "2", "--T", "3",
                   "--trials", "1", "--seed", "9", "--perturb", "0.01"])
        assert rc == 1
        assert "FAILED" in capsys.readouterr().out

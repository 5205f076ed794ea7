import csv
import json

import numpy as np
import pytest

from conftest import random_model
from src.adapter import ensemble_predict
from src.autodiff.rng import Rng
from src.cli import EXIT_INPUT, EXIT_NUMERICAL, EXIT_OK, INIT_STREAM, main
from src.config import RunConfig
from src.datasets import load_manifest, load_split
from src.nca.checkpoint import load_checkpoint, save_checkpoint, to_bytes
from src.nca.model import MedNcaConfig, MedNcaModel
from src.trainer import initialize_parameters
from utils.image_processing import read_pgm, std_to_uint8, to_uint8, write_pgm

TINY = {
    "model": {"channels": 4, "hidden": 8, "scale_factor": 2, "steps_level1": 2, "steps_level2": 2},
    "train": {"epochs": 1, "batch_size": 4, "patch_size": 16, "val_every": 1},
    "adapt": {"n_runs": 2, "epochs": 1, "batch_size": 4},
    "data": {"size": 16, "train": 4, "val": 2, "test": 3, "seed": 3},
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture
def tiny_checkpoint(tmp_path):
    model = random_model(RunConfig.from_dict(TINY).model, seed=1, dtype=np.float32)
    path = tmp_path / "pretrained.ckpt"
    save_checkpoint(model, path)
    return path


def run(*argv) -> int:
    return main(["-q", *map(str, argv)])


class TestSynth:
    def test_defaults(self, tmp_path, capsys):
        assert run("synth", "--out", tmp_path / "data") == EXIT_OK
        manifest = load_manifest(tmp_path / "data/manifest.json")
        assert len(manifest.entries) == 150
        assert [len(manifest.split(s)) for s in ("train", "val", "test")] == [50, 50, 50]
        assert manifest.working_size == 64
        assert "wrote 150 samples (source)" in capsys.readouterr().out

    def test_same_seed_same_bytes(self, tmp_path, config_file):
        for name in ("a", "b"):
            assert run("synth", "--config", config_file, "--out", tmp_path / name) == EXIT_OK
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.pgm"))
        assert len(files) == 18
        for rel in files:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_shift_keeps_masks(self, tmp_path, config_file):
        out = tmp_path / "data"
        assert run("synth", "--config", config_file, "--out", out, "--shift", "phone_capture") == EXIT_OK
        shifted = load_manifest(out / "phone_capture/manifest.json")
        assert shifted.domains == ["source+phone_capture"]
        for entry in shifted.entries:
            assert (out / entry.mask).read_bytes() == (shifted.root / entry.mask).read_bytes()

    def test_flags_beat_config(self, tmp_path, config_file):
        out = tmp_path / "data"
        assert run("synth", "--config", config_file, "--out", out, "--train", "1", "--size", "24") == EXIT_OK
        manifest = load_manifest(out / "manifest.json")
        assert len(manifest.split("train")) == 1 and manifest.working_size == 24
        echoed = json.loads((out / "config.json").read_text())
        assert echoed["command"] == "synth" and echoed["data"]["size"] == 24

    def test_unknown_shift(self, tmp_path, capsys):
        assert run("synth", "--out", tmp_path, "--shift", "nope") == EXIT_INPUT
        assert "nope" in capsys.readouterr().err

    @pytest.mark.parametrize("text", ['{"moire": {"period": 6}}', "{not json", "[]", '{"contrast_scale": "x"}'])
    def test_malformed_shift_file(self, tmp_path, capsys, text):
        spec = tmp_path / "shift.json"
        spec.write_text(text)
        assert run("synth", "--out", tmp_path / "data", "--shift", spec) == EXIT_INPUT
        assert "shift" in capsys.readouterr().err


class TestTrain:
    def test_zero_epochs_is_initialization(self, synth_dir, tmp_path, config_file):
        out = tmp_path / "run"
        assert run("train", "--data", synth_dir / "manifest.json", "--config", config_file,
                   "--out", out, "--epochs", "0", "--seed", "5") == EXIT_OK
        expected = initialize_parameters(RunConfig.from_dict(TINY).model, Rng(5, INIT_STREAM))
        assert (out / "model.ckpt").read_bytes() == to_bytes(expected)
        sidecar = json.loads((out / "model.json").read_text())
        assert sidecar["train_domain"] == "source" and sidecar["model_id"] == "pretrained"
        assert sidecar["parameters"] == expected.count_parameters()

    def test_same_seed_same_checkpoint(self, synth_dir, tmp_path, config_file):
        for name in ("a", "b"):
            assert run("train", "--data", synth_dir / "manifest.json", "--config", config_file,
                       "--out", tmp_path / name) == EXIT_OK
        assert (tmp_path / "a/model.ckpt").read_bytes() == (tmp_path / "b/model.ckpt").read_bytes()
        report = json.loads((tmp_path / "a/train_report.json").read_text())
        assert len(report["train_loss"]) == 1 and report["best_epoch"] == 0

    def test_missing_manifest(self, tmp_path, capsys):
        missing = tmp_path / "nowhere/manifest.json"
        assert run("train", "--data", missing, "--out", tmp_path / "run") == EXIT_INPUT
        assert str(missing) in capsys.readouterr().err

    @pytest.mark.parametrize("payload", ["[]", '{"version": 1, "entries": [3]}'])
    def test_malformed_manifest(self, tmp_path, capsys, payload):
        manifest = tmp_path / "manifest.json"
        manifest.write_text(payload)
        assert run("train", "--data", manifest, "--out", tmp_path / "run") == EXIT_INPUT
        assert str(manifest) in capsys.readouterr().err

    def test_wrong_type_config_value(self, synth_dir, tmp_path):
        path = tmp_path / "typed.json"
        path.write_text(json.dumps({"model": {"fire_rate": "half"}}))
        assert run("train", "--data", synth_dir / "manifest.json", "--config", path,
                   "--out", tmp_path / "run") == EXIT_INPUT

    def test_bad_config_value(self, synth_dir, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"model": {"fire_rate": 2.0}}))
        assert run("train", "--data", synth_dir / "manifest.json", "--config", path,
                   "--out", tmp_path / "run") == EXIT_INPUT


class TestAdapt:
    def test_zero_epochs_keeps_weights(self, synth_dir, tmp_path, config_file, tiny_checkpoint):
        out = tmp_path / "adapted"
        assert run("adapt", "--model", tiny_checkpoint, "--data", synth_dir / "scanner_b/manifest.json",
                   "--config", config_file, "--out", out, "--epochs", "0") == EXIT_OK
        assert (out / "model.ckpt").read_bytes() == tiny_checkpoint.read_bytes()
        assert json.loads((out / "model.json").read_text())["adapted_on"] == "source+scanner_b"

    def test_maps_match_standalone_ensemble(self, synth_dir, tmp_path, config_file, tiny_checkpoint):
        out = tmp_path / "adapted"
        data = synth_dir / "scanner_b/manifest.json"
        assert run("adapt", "--model", tiny_checkpoint, "--data", data, "--config", config_file,
                   "--out", out, "--epochs", "0") == EXIT_OK
        model = load_checkpoint(tiny_checkpoint)
        cfg = RunConfig.from_dict(TINY)
        for index, record in enumerate(load_split(load_manifest(data), "test")):
            stats = ensemble_predict(model, record.image, cfg.adapt.n_runs, cfg.adapt.seed, stream=(0, 0, index))
            assert np.array_equal(read_pgm(out / f"maps/{record.id}_mean.pgm"), to_uint8(stats.mean[0, 0]))
            assert np.array_equal(read_pgm(out / f"maps/{record.id}_std.pgm"), std_to_uint8(stats.std[0, 0]))

    def test_short_run_outputs(self, synth_dir, tmp_path, config_file, tiny_checkpoint, capsys):
        out = tmp_path / "adapted"
        assert run("adapt", "--model", tiny_checkpoint, "--data", synth_dir / "scanner_b/manifest.json",
                   "--config", config_file, "--out", out, "--vwsl-gamma", "5") == EXIT_OK
        echoed = json.loads((out / "config.json").read_text())
        assert echoed["adapt"]["vwsl_gamma"] == echoed["loss"]["vwsl_gamma"] == 5.0
        report = json.loads((out / "adapt_report.json").read_text())
        assert report["vwsl_gamma"] == 5.0 and len(report["loss"]) == 1
        assert (out / "overlays/test_0000_before.pgm").is_file()
        assert (out / "overlays/test_0000_after.pgm").is_file()
        assert "dice before" in capsys.readouterr().out

    def test_nan_model_exits_numerical(self, synth_dir, tmp_path, config_file, capsys):
        model = random_model(RunConfig.from_dict(TINY).model, seed=1, dtype=np.float32)
        model.level2.fc1_w.data[...] = np.nan
        save_checkpoint(model, tmp_path / "nan.ckpt")
        assert run("adapt", "--model", tmp_path / "nan.ckpt", "--data", synth_dir / "manifest.json",
                   "--config", config_file, "--out", tmp_path / "adapted") == EXIT_NUMERICAL
        assert "epoch=0" in capsys.readouterr().err

    def test_corrupt_checkpoint(self, synth_dir, tmp_path, tiny_checkpoint, capsys):
        blob = bytearray(tiny_checkpoint.read_bytes())
        blob[-1] ^= 0xFF
        tiny_checkpoint.write_bytes(bytes(blob))
        assert run("adapt", "--model", tiny_checkpoint, "--data", synth_dir / "manifest.json",
                   "--out", tmp_path / "adapted") == EXIT_INPUT
        assert "CRC" in capsys.readouterr().err


def test_info_default_config(tmp_path, capsys):
    path = tmp_path / "default.ckpt"
    save_checkpoint(MedNcaModel.zeros(MedNcaConfig()), path)
    assert run("info", "--model", path) == EXIT_OK
    out = capsys.readouterr().out
    assert "parameters: 26432" in out
    assert "file size: 107822 bytes" in out
    assert "fire_rate: 0.5" in out


def test_predict_writes_maps_and_overlay(tmp_path, tiny_checkpoint, blob_record):
    image_path = tmp_path / "scan.pgm"
    write_pgm(image_path, to_uint8(blob_record.image[0, 0]))
    out = tmp_path / "pred"
    assert run("predict", "--model", tiny_checkpoint, "--image", image_path, "--out", out) == EXIT_OK
    assert read_pgm(out / "scan_prob.pgm").shape == (16, 16)
    assert read_pgm(out / "scan_overlay.pgm").shape == (16, 16)
    logits, probs = read_pgm(out / "scan_logits.pgm"), read_pgm(out / "scan_prob.pgm")
    assert logits.shape == (16, 16)
    # Logit 0 and probability 0.5 both land on gray 128.
    assert np.array_equal(logits >= 128, probs >= 128)


def test_predict_resizes(tmp_path, tiny_checkpoint):
    image_path = tmp_path / "big.pgm"
    write_pgm(image_path, np.full((20, 20), 100, dtype=np.uint8))
    out = tmp_path / "pred"
    assert run("predict", "--model", tiny_checkpoint, "--image", image_path, "--out", out,
               "--size", "16", "--mode", "ensemble-mean", "--n-runs", "2") == EXIT_OK
    assert read_pgm(out / "big_prob.pgm").shape == (16, 16)


def test_eval_appends_results(synth_dir, tmp_path, tiny_checkpoint, capsys):
    out = tmp_path / "eval"
    argv = ["eval", "--model", tiny_checkpoint, "--data", synth_dir / "manifest.json",
            synth_dir / "scanner_b/manifest.json", "--out", out]
    assert run(*argv) == EXIT_OK
    assert run(*argv) == EXIT_OK
    with open(out / "results.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert [r["eval_domain"] for r in rows] == ["source", "source+scanner_b"] * 2
    assert all(r["n"] == "3" and r["model"] == "pretrained" for r in rows)
    assert (out / "eval_source_scanner_b.json").is_file()
    assert "(n=3)" in capsys.readouterr().out


def test_ablate_writes_table(synth_dir, tmp_path, config_file, tiny_checkpoint):
    out = tmp_path / "ablation"
    assert run("ablate", "--model", tiny_checkpoint, "--data", synth_dir / "scanner_b/manifest.json",
               "--config", config_file, "--out", out, "--gammas", "0,10") == EXIT_OK
    with open(out / "ablation.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert [r["gamma"] for r in rows] == ["0", "10"]
    assert all(0.0 <= float(r["dice_mean"]) <= 1.0 for r in rows)


def test_ablate_bad_gammas(synth_dir, tmp_path, tiny_checkpoint):
    assert run("ablate", "--model", tiny_checkpoint, "--data", synth_dir / "manifest.json",
               "--out", tmp_path / "ablation", "--gammas", "a,b") == EXIT_INPUT

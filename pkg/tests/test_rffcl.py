#!/usr/bin/env python
"""Tests for the `rffcl` pipeline and command line."""
import json
import unittest

import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner

from rffcl import ConfigError, FormatError, cli
from rffcl.pipeline import generate_dataset, load_config, read_dataset, write_dataset
from rffcl.pipeline.config import from_dict
from rffcl.signals.chanest import Mode
from rffcl.signals.channel import ChannelConfig
from rffcl.signals.waveform import DeviceSet
from rffcl.tensornet.model import read_manifest

TINY_RUN = {
    "devices": {"count": 2},
    "dataset": {"packets_per_device": 20, "mmse_samples": 10000},
    "backbone": {"widths": [4, 4, 4, 8], "projection_dim": 8, "prediction_hidden": 4, "classifier_hidden": 4},
    "pretrain": {
        "epochs": 2,
        "batch_size": 8,
        "train_fraction": 0.6,
        "val_fraction": 0.4,
        "nmi_restarts": 2,
        "nmi_window": 1,
    },
    "finetune": {"finetune_batch": 4, "max_epochs": 3, "patience": 2, "label_fraction": 0.2},
    "eval": {"snr_grid_db": [5, 20], "batch_size": 64},
    "deterministic": True,
}


class ConfigTestCase(unittest.TestCase):
    def test_defaults(self):
        cfg = from_dict({})
        self.assertEqual(cfg.mode, Mode.MIXED)
        self.assertEqual(cfg.n_devices, 7)
        self.assertEqual(cfg.pretrain.batch_size, 128)
        self.assertEqual(cfg.finetune.patience, 30)
        self.assertNotEqual(cfg.source_channel, cfg.target_channel)
        self.assertEqual(len(cfg.hash), 16)

    def test_overrides_reach_phases(self):
        cfg = from_dict({"seed": 1}, seed=5, mode="ls_only", deterministic=True)
        self.assertEqual(cfg.seed, 5)
        self.assertEqual(cfg.pretrain.seed, 5)
        self.assertEqual(cfg.finetune.seed, 5)
        self.assertEqual(cfg.pretrain.mode, Mode.LS_ONLY)
        self.assertEqual(cfg.pretrain.workers, 1)

    def test_none_overrides_ignored(self):
        self.assertEqual(from_dict({"seed": 3}, seed=None).seed, 3)

    def test_hash(self):
        self.assertEqual(from_dict({"out": "a"}).hash, from_dict({"out": "b"}).hash)
        self.assertNotEqual(from_dict({"seed": 0}).hash, from_dict({"seed": 1}).hash)

    def test_rejects_bad_documents(self):
        for document in (
            {"bogus": 1},
            {"pretrain": {"epochz": 3}},
            {"pretrain": {"epochs": 0}},
            {"dataset": {"mmse_samples": 10}},
            {"mode": "sideways"},
            {"backbone": {"widths": [1, 2]}},
            {"source_channel": {"rms_delay_ns": -1}},
            {"devices": "seven"},
        ):
            with self.assertRaises(ConfigError, msg=str(document)):
                from_dict(document)

    def test_load_from_file(self):
        runner = CliRunner()
        with runner.isolated_filesystem():
            with open("run.json", "w") as fh:
                json.dump({"devices": {"count": 3}, "seed": 2}, fh)
            cfg = load_config("run.json", out="elsewhere")
            self.assertEqual(cfg.n_devices, 3)
            self.assertEqual(str(cfg.out_dir), "elsewhere")


@pytest.fixture(scope="module")
def small_dataset():
    return generate_dataset(DeviceSet.default(3), ChannelConfig(), 4, seed=9, role="target", max_workers=1)


def test_dataset_round_trip(small_dataset, tmp_path):
    path = write_dataset(small_dataset, tmp_path / "target.rffd")
    loaded = read_dataset(path)
    assert len(loaded) == 12
    assert loaded.role == "target"
    assert loaded.counts() == {0: 4, 1: 4, 2: 4}
    assert loaded.devices == small_dataset.devices
    assert loaded.channel == small_dataset.channel
    np.testing.assert_array_equal(loaded.labels, small_dataset.labels)
    for a, b in zip(loaded.frames, small_dataset.frames):
        np.testing.assert_allclose(a.stacked(), b.stacked(), rtol=1e-6, atol=1e-7)
        assert a.snr_db == 20.0


def test_dataset_is_worker_independent(small_dataset):
    threaded = generate_dataset(DeviceSet.default(3), ChannelConfig(), 4, seed=9, role="target", max_workers=3)
    for a, b in zip(threaded.frames, small_dataset.frames):
        np.testing.assert_array_equal(a.stacked(), b.stacked())


def test_truncated_dataset(small_dataset, tmp_path):
    path = write_dataset(small_dataset, tmp_path / "target.rffd")
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(FormatError):
        read_dataset(path)


def test_command_line_interface():
    """Test the CLI."""
    runner = CliRunner()
    help_result = runner.invoke(cli.main, ["--help"])
    assert help_result.exit_code == 0
    assert "--help" in help_result.output
    for command in ("gen", "pretrain", "finetune", "eval", "inspect"):
        assert command in help_result.output


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    """One full gen -> pretrain -> finetune -> eval pass on a tiny configuration"""
    root = tmp_path_factory.mktemp("run")
    config = root / "run.json"
    config.write_text(json.dumps(TINY_RUN))
    out = root / "out"
    runner = CliRunner()
    results = {}
    for command in ("gen", "pretrain", "finetune", "eval"):
        results[command] = runner.invoke(cli.main, ["--config", str(config), "--out", str(out), command])
    return out, results, load_config(config, out=str(out))


def test_pipeline_exit_codes(tiny_run):
    _, results, _ = tiny_run
    for command, result in results.items():
        assert result.exit_code == 0, (command, result.output)


def test_pipeline_outputs(tiny_run):
    out, _, cfg = tiny_run
    for name in (
        "source.rffd",
        "target.rffd",
        "source.mmse",
        "target.mmse",
        "pretrain_last.ckpt",
        "backbone_best.ckpt",
        "pretrain_report.csv",
        "model.ckpt",
        "finetune_report.csv",
        "confusion.csv",
        "snr_sweep.csv",
        "features.csv",
        "metrics.json",
        "timings.json",
    ):
        assert (out / name).exists(), name
    # nmi_window 1 keeps only the last epoch's backbone
    assert sorted(p.name for p in (out / "checkpoints").iterdir()) == ["epoch_001.ckpt"]

    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["config_hash"] == cfg.hash
    assert metrics["mode"] == "mixed"
    assert 0.0 <= metrics["accuracy"] <= 1.0
    assert set(metrics["branch_accuracy"]) == {"ls", "mmse", "hybrid"}
    assert metrics["n_validation"] == 32

    sweep = pd.read_csv(out / "snr_sweep.csv", comment="#")
    assert sweep["snr_db"].tolist() == [5.0, 20.0]
    assert list(sweep.columns) == ["snr_db", "ls_accuracy", "mmse_accuracy", "hybrid_accuracy"]

    confusion = pd.read_csv(out / "confusion.csv", comment="#", index_col="truth")
    assert confusion["support"].tolist() == [16, 16, 32]
    assert int(confusion.loc["predicted"].drop("support").sum()) == 32

    features = pd.read_csv(out / "features.csv", comment="#")
    assert features.shape == (32, 9)
    assert (out / "features.csv").read_text().startswith(f"# config_hash={cfg.hash}")

    timings = json.loads((out / "timings.json").read_text())
    assert {"gen_source", "mmse_target", "pretrain_mixed", "finetune_mixed", "eval"} <= set(timings)

    manifest, _ = read_manifest(out / "backbone_best.ckpt")
    assert manifest["components"] == ["backbone"]
    manifest, _ = read_manifest(out / "model.ckpt")
    assert manifest["components"] == ["backbone", "classifier"]
    assert manifest["extra"]["config_hash"] == cfg.hash


def test_eval_matches_finetune_at_base_snr(tiny_run):
    out, _, _ = tiny_run
    sweep = pd.read_csv(out / "snr_sweep.csv", comment="#")
    summary = json.loads((out / "finetune_summary.json").read_text())
    assert sweep["hybrid_accuracy"].iloc[-1] == pytest.approx(summary["final_accuracy"])


def test_inspect(tiny_run):
    out, _, _ = tiny_run
    runner = CliRunner()
    for name, expected in (
        ("source.rffd", "dataset (source)"),
        ("target.mmse", "MMSE statistics"),
        ("model.ckpt", "checkpoint"),
    ):
        result = runner.invoke(cli.main, ["inspect", str(out / name)])
        assert result.exit_code == 0, result.output
        assert expected in result.output
    result = runner.invoke(cli.main, ["inspect", str(out / "metrics.json")])
    assert result.exit_code == 4


def test_missing_inputs_exit_code(tmp_path):
    runner = CliRunner()
    result = runner.invoke(cli.main, ["--out", str(tmp_path / "empty"), "pretrain"])
    assert result.exit_code == 4


def test_bad_config_exit_code(tmp_path):
    config = tmp_path / "bad.json"
    config.write_text(json.dumps({"pretrain": {"epochs": -1}}))
    runner = CliRunner()
    result = runner.invoke(cli.main, ["--config", str(config), "--out", str(tmp_path), "gen"])
    assert result.exit_code == 3


def test_supervised_mode(tmp_path):
    config = tmp_path / "run.json"
    config.write_text(json.dumps(TINY_RUN))
    out = tmp_path / "sup"
    runner = CliRunner()
    for command in ("gen", "pretrain", "finetune", "eval"):
        result = runner.invoke(
            cli.main, ["--config", str(config), "--out", str(out), "--mode", "supervised", command]
        )
        assert result.exit_code == 0, (command, result.output)
    assert not (out / "backbone_best.ckpt").exists()
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["mode"] == "supervised"
    # 30% of 20 packets for each of the two devices
    assert metrics["n_validation"] == 12

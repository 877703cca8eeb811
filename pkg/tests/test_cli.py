"""CLI subcommands, config plumbing, and exit codes."""

import json

import numpy as np
import pytest

from contrastad.cli import main
from contrastad.harness import ExperimentConfig, PhantomSettings
from contrastad.extractor import ExtractorConfig
from contrastad.trainer import TrainConfig


@pytest.fixture(scope="module")
def cfg_json(tmp_path_factory):
    cfg = ExperimentConfig(
        k_shots=2, seed=0, image_size=64,
        phantom=PhantomSettings(pool_size=5, test_healthy=3, test_anomalous=3),
        n_normal_aug=3, n_anomalous=3, n_heatmaps=1,
        extractor=ExtractorConfig(pretrained=False),
        train=TrainConfig(epochs=1, iters_per_epoch=1, batch_size=1),
    )
    path = tmp_path_factory.mktemp("cfg") / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    return path


def test_cli_pipeline(tmp_path, cfg_json):
    data = tmp_path / "data"
    assert main(["--out-dir", str(data), "--seed", "1",
                 "phantom-gen", "--pool", "4", "--test-healthy", "2",
                 "--test-anomalous", "2", "--size", "64"]) == 0
    assert len(list((data / "train" / "good").glob("*.png"))) == 4

    corpus = tmp_path / "corpus"
    assert main(["--config", str(cfg_json), "--out-dir", str(corpus),
                 "synth", "--few-dir", str(data / "train" / "good")]) == 0
    assert (corpus / "manifest.json").exists()

    trained = tmp_path / "trained"
    assert main(["--config", str(cfg_json), "--out-dir", str(trained),
                 "train", "--dataset-dir", str(corpus)]) == 0
    weights = trained / "weights.cadw"
    assert weights.exists() and (trained / "epoch_stats.csv").exists()

    bank_dir = tmp_path / "bankdir"
    assert main(["--config", str(cfg_json), "--out-dir", str(bank_dir),
                 "build-bank", "--few-dir", str(data / "train" / "good"),
                 "--weights", str(weights)]) == 0
    bank = bank_dir / "bank.cslt"
    assert bank.exists()

    scored = tmp_path / "scored"
    images = sorted((data / "test" / "bad").glob("*.png"))
    assert main(["--out-dir", str(scored), "score", "--bank", str(bank),
                 "--weights", str(weights), "--tau", "0.5",
                 str(images[0])]) == 0
    entries = json.loads((scored / "scores.json").read_text())
    assert len(entries) == 1
    assert {"image", "score", "raw_score", "is_anomaly"} <= set(entries[0])
    assert list(scored.glob("*_heatmap.png"))


def test_cli_eval_and_exit_codes(tmp_path, cfg_json):
    out = tmp_path / "eval"
    assert main(["--config", str(cfg_json), "--out-dir", str(out), "eval"]) == 0
    report = json.loads((out / "report.json").read_text())
    assert 0.0 <= report["auroc"] <= 1.0

    # config error: k_shots below 1
    bad = tmp_path / "bad.json"
    cfg = json.loads(cfg_json.read_text())
    cfg["k_shots"] = 0
    bad.write_text(json.dumps(cfg))
    assert main(["--config", str(bad), "--out-dir", str(tmp_path / "x"), "eval"]) == 2

    # data error: missing data directory
    cfg = json.loads(cfg_json.read_text())
    cfg["data_dir"] = str(tmp_path / "nowhere")
    missing = tmp_path / "missing.json"
    missing.write_text(json.dumps(cfg))
    assert main(["--config", str(missing), "--out-dir", str(tmp_path / "y"), "eval"]) == 3


def test_cli_fingerprint_mismatch_is_config_error(tmp_path, cfg_json):
    from contrastad.bank import build_bank
    from contrastad.extractor import initial_weights
    from contrastad.phantom import phantom_brain

    cfg = ExtractorConfig(pretrained=False)
    w0 = initial_weights(cfg, seed=0)
    w1 = initial_weights(cfg, seed=1)
    bank = build_bank([phantom_brain(64, 1)], w0, cfg, 0.1)
    bank_path = tmp_path / "b.cslt"
    bank.save(bank_path)
    w1_path = tmp_path / "w1.cadw"
    w1.save(w1_path)
    from contrastad.io import write_image
    img = tmp_path / "q.png"
    write_image(img, phantom_brain(64, 2))
    code = main(["--out-dir", str(tmp_path / "s"), "score",
                 "--bank", str(bank_path), "--weights", str(w1_path), str(img)])
    assert code == 2


def test_cli_sweep(tmp_path, cfg_json):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"loss": ["tritanh", "anchor"]}))
    out = tmp_path / "sweep"
    assert main(["--config", str(cfg_json), "--out-dir", str(out),
                 "sweep", "--grid", str(grid)]) == 0
    rows = (out / "sweep.csv").read_text().strip().splitlines()
    assert len(rows) == 3


def test_cli_synth_empty_dir_is_data_error(tmp_path, cfg_json):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["--config", str(cfg_json), "--out-dir", str(tmp_path / "o"),
                 "synth", "--few-dir", str(empty)]) == 3

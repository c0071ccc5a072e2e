import csv
import json

import numpy as np
import pytest

from marsdust import config as config_mod
from marsdust.cli import main
from marsdust.filter_pipeline import read_archive
from synthetic import write_dataset


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    write_dataset(root, {"train": 12, "val": 4, "test": 4}, seed=1)
    return root


@pytest.fixture
def cfg_file(tmp_path, dataset):
    p = tmp_path / "c.toml"
    p.write_text(f'data_root = "{dataset}"\n\n[classifier]\nepochs = 2\nbatch_size = 8\n')
    return p


def test_help_and_usage_errors(capsys):
    assert main(["--help"]) == 0
    assert "train-pix2pix" in capsys.readouterr().out
    assert main(["frobnicate"]) == 1
    assert main([]) == 1
    assert main(["train", "--model", "xgboost", "--out", "x"]) == 1


def test_filter_missing_dir(tmp_path, capsys):
    code = main(["filter", "--in", str(tmp_path / "missing_dir"), "--model-dir", str(tmp_path), "--out", str(tmp_path / "o.npz")])
    assert code == 2
    assert "missing_dir" in capsys.readouterr().err


def test_bad_config_key_is_usage_error(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("[classifier]\nnope = 1\n")
    assert main(["ingest", "--config", str(p), "--out", str(tmp_path / "o")]) == 1


def test_config_precedence(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("seed = 3\n[autoencoder]\nepochs = 7\n")
    env = {"MARSDUST_AUTOENCODER__EPOCHS": "9", "MARSDUST_FULL": "1", "OTHER": "x"}
    cfg = config_mod.resolve(p, {"autoencoder": {"batch_size": 5}}, env)
    assert cfg["seed"] == 3
    assert cfg["autoencoder"]["epochs"] == 9 and cfg["autoencoder"]["batch_size"] == 5
    assert config_mod.resolve(None, None, {"MARSDUST_CLASSIFIER__ALLOW_DOWNLOAD": "true"})["classifier"]["allow_download"] is True
    with pytest.raises(config_mod.ConfigError):
        config_mod.resolve(None, None, {"MARSDUST_SEED": "abc"})


def test_ingest(tmp_path, cfg_file):
    out = tmp_path / "ingest"
    assert main(["ingest", "--config", str(cfg_file), "--out", str(out), "--cache-size", "64"]) == 0
    summary = json.loads((out / "ingest.json").read_text())
    assert summary["counts"] == {"train": 24, "val": 8, "test": 8}
    assert (out / "cache" / "train_unit_64x64_seed0_x.npy").exists()
    assert json.loads((out / "config_resolved.json").read_text())["command"] == "ingest"


def test_train_cnn_repeat_is_deterministic(tmp_path, cfg_file):
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", "--model", "cnn", "--config", str(cfg_file), "--seed", "7", "--out", str(out)]) == 0
        runs.append((out / "metrics.json").read_text())
    assert runs[0] == runs[1]
    metrics = json.loads(runs[0])
    assert metrics["seed"] == 7 and len(metrics["history"]) == 2
    for f in ("history.csv", "loss_curve.png", "confusion.png", "model/weights.pt", "config_resolved.json"):
        assert (tmp_path / "a" / f).exists()
    # replaying the resolved config reproduces the run
    resolved = tmp_path / "a" / "config_resolved.json"
    assert main(["train", "--model", "cnn", "--config", str(resolved), "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "metrics.json").read_text() == runs[0]

    ev = tmp_path / "eval"
    assert main(["eval", "--config", str(cfg_file), "--model-dir", str(tmp_path / "a" / "model"), "--out", str(ev)]) == 0
    assert json.loads((ev / "metrics.json").read_text())["accuracy"] == metrics["test"]["accuracy"]


def test_train_svm_and_filter(tmp_path, cfg_file, dataset):
    out = tmp_path / "svm"
    assert main(["train", "--model", "svm", "--config", str(cfg_file), "--out", str(out)]) == 0
    assert (out / "pca_variance.png").exists()
    archive = tmp_path / "arch" / "out.npz"
    folder = dataset / "images"
    assert main(["filter", "--in", str(folder), "--model-dir", str(out / "model"), "--out", str(archive)]) == 0
    arrays, m = read_archive(archive)
    assert m.n_dusty + m.n_not_dusty == len(list(folder.iterdir()))
    assert (archive.parent / "config_resolved.json").exists()
    (tmp_path / "empty").mkdir()
    assert main(["filter", "--in", str(tmp_path / "empty"), "--model-dir", str(out / "model"), "--out", str(tmp_path / "e.npz")]) == 2


def test_noise_and_analyze(tmp_path, cfg_file):
    out = tmp_path / "noise"
    assert main(["noise", "--config", str(cfg_file), "--level", "0.3", "--seed", "4", "--out", str(out)]) == 0
    noisy, clean = np.load(out / "noisy.npy"), np.load(out / "clean.npy")
    side = json.loads((out / "noise.json").read_text())
    assert noisy.shape == clean.shape and noisy.dtype == np.uint8
    assert side["level"] == 0.3 and side["seed"] == 4 and side["n"] == len(clean)
    assert np.all((noisy != clean).sum(axis=(1, 2)) <= 3000)
    an = tmp_path / "hist"
    assert main(["analyze-noise", "--config", str(cfg_file), "--out", str(an)]) == 0
    assert json.loads((an / "peaks.json").read_text())["peaks"]
    assert (an / "histogram.png").exists()


def test_denoiser_commands(tmp_path, cfg_file):
    ae = tmp_path / "ae"
    args = ["--config", str(cfg_file), "--noise-level", "0.3", "--epochs", "2", "--base-filters", "4"]
    assert main(["train-ae", *args, "--variant", "down64", "--batch-size", "8", "--out", str(ae)]) == 0
    hist = json.loads((ae / "history.json").read_text())
    assert len(hist["denoising"]) == 2
    gan = tmp_path / "gan"
    assert main(["train-pix2pix", *args[:-4], "--epochs", "1", "--base-filters", "4", "--max-train", "3", "--out", str(gan)]) == 0
    assert (gan / "checkpoints" / "generator_epoch001.pt").exists()

    noise = tmp_path / "noise"
    assert main(["noise", "--config", str(cfg_file), "--split", "test", "--level", "0.3", "--out", str(noise)]) == 0
    restored = tmp_path / "r" / "restored.npz"
    assert main(["denoise", "--model-dir", str(ae / "model"), "--in", str(noise / "noisy.npy"), "--out", str(restored)]) == 0
    with np.load(restored) as z:
        assert z["restored"].shape[1:] == (64, 64)
    assert main(["denoise", "--model-dir", str(ae / "model"), "--backend", "pix2pix", "--in", str(noise / "noisy.npy"), "--out", str(restored)]) == 1

    met = tmp_path / "met"
    assert main(["metrics", "--restored", str(restored), "--clean", str(noise / "clean.npy"), "--match-resolution", "--out", str(met)]) == 0
    rows = list(csv.reader((met / "per_pair.csv").open()))
    assert rows[0] == ["pair_id", "mae", "psnr", "ssim", "msssim"]

    for model in (ae, gan):
        sw = tmp_path / f"sweep_{model.name}"
        assert main(["sweep", "--config", str(cfg_file), "--model-dir", str(model / "model"), "--levels", "0.1,0.5", "--max-images", "2", "--out", str(sw)]) == 0
        lines = (sw / "sweep.csv").read_text().splitlines()
        assert lines[0] == "level,mae,psnr,ssim,msssim" and len(lines) == 3
    assert main(["sweep", "--config", str(cfg_file), "--model-dir", str(ae / "model"), "--levels", "0.5,0.1", "--out", str(tmp_path / "bad")]) == 1

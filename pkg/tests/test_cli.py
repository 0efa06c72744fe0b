import csv
import filecmp
import os

import numpy as np
import pytest

from inverse_flow.cli import resolve_config, run, ConfigError
from inverse_flow.data import load_points
from inverse_flow.noise import PoissonGaussian
from inverse_flow.tensorio import load_tensor, read_kv, save_tensor

TINY_TRAIN = ["--set", "train.epochs=2", "--set", "train.hidden=16,16", "--set", "train.embed_dim=8",
              "--set", "train.batch_size=64"]


def _files(d):
    return sorted(os.listdir(d))


def _same_tree(a, b):
    assert _files(a) == _files(b)
    match, mismatch, errors = filecmp.cmpfiles(a, b, _files(a), shallow=False)
    assert not mismatch and not errors, mismatch


def test_grid_csv(tmp_path, capsys):
    assert run(["grid", "--eps", "0.002", "--rho", "7", "--n", "11", "--out", str(tmp_path)]) == 0
    rows = list(csv.reader(open(tmp_path / "grid.csv")))
    assert rows[0] == ["index", "t"]
    assert (int(rows[1][0]), float(rows[1][1])) == (1, 0.002)
    assert (int(rows[-1][0]), float(rows[-1][1])) == (11, 1.0)
    assert "11,1.0" in capsys.readouterr().out
    assert read_kv(tmp_path / "grid.config")["n"] == "11"


def test_grid_bad_value_is_config_error(capsys):
    assert run(["grid", "--eps", "2"]) == 2


@pytest.fixture(scope="module")
def toy_dirs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert run(["gen-data", "8gaussians", "--seed", "7", "--n-train", "256", "--n-test", "64",
                "--out", str(data)]) == 0
    return root, data


def test_gen_data_bitwise_deterministic(toy_dirs, tmp_path):
    _, data = toy_dirs
    assert run(["gen-data", "8gaussians", "--seed", "7", "--n-train", "256", "--n-test", "64",
                "--out", str(tmp_path)]) == 0
    _same_tree(data, tmp_path)
    assert run(["gen-data", "8gaussians", "--seed", "8", "--n-train", "256", "--n-test", "64",
                "--out", str(tmp_path / "other")]) == 0
    assert not filecmp.cmp(data / "train_noisy.iftn", tmp_path / "other" / "train_noisy.iftn", shallow=False)


def test_gen_data_outputs(toy_dirs):
    _, data = toy_dirs
    noisy = load_points(data / "train_noisy.iftn")
    clean = load_points(data / "train_clean.iftn")
    assert noisy.points.shape == (256, 2) and noisy.labels == clean.labels


def test_gaussian_toy_dataset(tmp_path):
    assert run(["gen-data", "gaussian-toy", "--n-train", "100", "--n-test", "10", "--out", str(tmp_path)]) == 0
    assert load_tensor(tmp_path / "train_noisy.iftn").shape == (100, 1)


def _snapshot(*dirs):
    return {(str(d), f): (d / f).read_bytes() for d in dirs for f in _files(d)}


@pytest.mark.parametrize("method", ["icm", "ifm", "gct"])
def test_train_denoise_eval_deterministic(toy_dirs, tmp_path, method):
    # the second pass writes into the same directories, so path-valued config keys agree
    _, data = toy_dirs
    src = "train_clean.iftn" if method == "gct" else "train_noisy.iftn"
    tdir, ddir, edir = (tmp_path / s for s in ("train", "denoise", "eval"))
    snaps = []
    for _ in range(2):
        args = ["train", method, "--data", str(data / src), "--seed", "3", "--out", str(tdir),
                "--set", "noise.sigma=0.15", *TINY_TRAIN]
        assert run(args) == 0
        assert run(["denoise", "--checkpoint", str(tdir / "model.ckpt"), "--input", str(data / "test_noisy.iftn"),
                    "--out", str(ddir)]) == 0
        assert run(["eval", "--pred", str(ddir / "denoised.iftn"), "--ref", str(data / "test_clean.iftn"),
                    "--centers", "8gaussians", "--out", str(edir)]) == 0
        snaps.append(_snapshot(tdir, ddir, edir))
    assert snaps[0] == snaps[1]
    assert {"model.ckpt", "model.ckpt.meta", "train_summary.txt", "train_loss.csv", "train.config"} <= set(_files(tdir))
    snap = read_kv(tdir / "train.config")
    assert snap["train.epochs"] == "2" and snap["noise.sigma"] == "0.15" and snap["seed"] == "3"
    metrics = {r["metric"]: float(r["value"]) for r in csv.DictReader(open(edir / "metrics.csv"))}
    assert {"energy_distance", "mse", "psnr", "nn_accuracy", "nn_accuracy_se", "mean_center_distance"} <= set(metrics)


def test_resolved_snapshot_reproduces_run(toy_dirs, tmp_path):
    _, data = toy_dirs
    first = tmp_path / "first"
    assert run(["train", "icm", "--data", str(data / "train_noisy.iftn"), "--seed", "4", "--out", str(first),
                *TINY_TRAIN]) == 0
    before = _snapshot(first)
    again = tmp_path / "again"
    assert run(["train", "icm", "--config", str(first / "train.config"), "--out", str(again)]) == 0
    _same_tree(first, again)
    assert _snapshot(first) == before


def test_simulate_ns_deterministic(tmp_path):
    args = ["simulate-ns", "--family", "shear", "--count", "2", "--M", "16", "--seed", "1"]
    assert run(args + ["--out", str(tmp_path / "a")]) == 0
    assert run(args + ["--out", str(tmp_path / "b")]) == 0
    _same_tree(tmp_path / "a", tmp_path / "b")
    assert load_tensor(tmp_path / "a" / "initial.iftn").shape == (2, 2 * 16 * 16)
    assert run(["simulate-ns", "--family", "stream", "--count", "1", "--M", "16", "--out", str(tmp_path / "c")]) == 0


def test_fit_noise_deterministic(tmp_path, rng):
    f = np.kron(rng.uniform(0, 2000, (32, 32)), np.ones((4, 4)))
    save_tensor(tmp_path / "img.iftn", PoissonGaussian(0.5, 0.1, 2.0).sample(f, rng))
    for d in ("a", "b"):
        assert run(["fit-noise", "--input", str(tmp_path / "img.iftn"), "--out", str(tmp_path / d)]) == 0
    _same_tree(tmp_path / "a", tmp_path / "b")
    fit = read_kv(tmp_path / "a" / "noise_fit.txt")
    assert float(fit["gamma"]) == pytest.approx(0.5, abs=0.15)


def test_precedence_defaults_file_flags(tmp_path):
    cfg_file = tmp_path / "c.cfg"
    cfg_file.write_text("# test\nn_train=50\nsigma=0.3\n")
    cfg = resolve_config("gen-data", str(cfg_file), {"sigma": 0.1, "n_test": None})
    assert cfg["n_train"] == "50" and cfg["sigma"] == "0.1" and cfg["n_test"] == "1600"


def test_unknown_key_exit_2_names_key(tmp_path, capsys):
    assert run(["gen-data", "--set", "bogus_key=1", "--out", str(tmp_path)]) == 2
    assert "bogus_key" in capsys.readouterr().err
    cfg_file = tmp_path / "c.cfg"
    cfg_file.write_text("train.lrate=1\n")
    assert run(["train", "icm", "--config", str(cfg_file), "--data", "x", "--out", str(tmp_path)]) == 2
    assert "train.lrate" in capsys.readouterr().err
    assert run(["train", "icm", "--data", "x", "--set", "noise.sgima=1", "--out", str(tmp_path)]) == 2
    assert "noise.sgima" in capsys.readouterr().err
    with pytest.raises(ConfigError):
        resolve_config("eval", None, {"nope": 1})


def test_missing_or_corrupt_data_exit_3(tmp_path, capsys):
    assert run(["train", "icm", "--data", str(tmp_path / "missing.iftn"), "--out", str(tmp_path)]) == 3
    (tmp_path / "bad.iftn").write_bytes(b"IFTN" + b"\x01\x00\x00\x00" + b"\x02\x00")
    assert run(["fit-noise", "--input", str(tmp_path / "bad.iftn"), "--out", str(tmp_path)]) == 3
    assert "byte offset 4" in capsys.readouterr().err


def test_domain_violation_exit_3(toy_dirs, tmp_path):
    _, data = toy_dirs
    args = ["train", "gct", "--data", str(data / "train_noisy.iftn"), "--set", "noise.kind=jacobi",
            "--out", str(tmp_path), *TINY_TRAIN]
    assert run(args) == 3


def test_numerical_failure_exit_4(tmp_path, capsys):
    big = np.full((64, 1), 1e30, np.float32)
    save_tensor(tmp_path / "big.iftn", big)
    with np.errstate(all="ignore"):
        code = run(["train", "ifm", "--data", str(tmp_path / "big.iftn"), "--set", "noise.sigma=1e30",
                    "--set", "train.lr=1000", "--out", str(tmp_path), *TINY_TRAIN])
    assert code == 4
    assert "step" in capsys.readouterr().err


def test_if_out_environment_root(tmp_path, monkeypatch):
    monkeypatch.setenv("IF_OUT", str(tmp_path))
    assert run(["gen-data", "--n-train", "10", "--n-test", "5"]) == 0
    assert (tmp_path / "gen-data" / "train_noisy.iftn").exists()

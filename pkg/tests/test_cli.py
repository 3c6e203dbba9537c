import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from thetarbm.cli import main, read_config_file
from thetarbm.data import ImageDataset, write_amat
from thetarbm.plotting import read_pgm
from thetarbm.rbm import ThetaRBM

SIDE = 8


@pytest.fixture
def amat_pair(tmp_path):
    rng = np.random.default_rng(5)
    paths = []
    for name, n in (("train", 120), ("test", 80)):
        ds = ImageDataset(rng.random((n, SIDE * SIDE)), rng.integers(0, 3, n), SIDE)
        p = tmp_path / f"{name}.amat"
        write_amat(p, ds)
        paths.append(str(p))
    return paths


def _rows(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def _train(out, train_amat, *extra):
    return main(["train", "--amat", train_amat, "--model", "theta", "--angles", "0,90,180,270",
                 "--rotation-mode", "exact", "--epochs", "5", "--hidden", "6", "--batch-size", "20",
                 "--out-dir", str(out), *extra])


def test_train_writes_checkpoint_and_metrics(tmp_path, amat_pair):
    out = tmp_path / "run"
    assert _train(out, amat_pair[0]) == 0
    m = ThetaRBM.load(out / "model.ckpt")
    assert m.W.shape == (4, 6, 64) and m.angles == (0.0, 90.0, 180.0, 270.0)
    rows = _rows(out / "metrics.csv")
    assert len(rows) == 5 and list(rows[0]) == ["epoch", "recon_error", "mean_activation", "lemma_residual"]
    assert all(float(r["lemma_residual"]) == 0.0 for r in rows)
    assert len(list((out / "checkpoints").glob("epoch_*.ckpt"))) == 5
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["arguments"]["seed"] == 0 and amat_pair[0] in manifest["input_digests"]
    assert json.loads((out / "config.json").read_text())["n_hidden"] == 6


def test_rerun_is_bit_identical(tmp_path, amat_pair):
    _train(tmp_path / "a", amat_pair[0])
    _train(tmp_path / "b", amat_pair[0])
    for name in ("model.ckpt", "metrics.csv", "config.json", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes().replace(b"/a", b"") == \
            (tmp_path / "b" / name).read_bytes().replace(b"/b", b"")
    _train(tmp_path / "c", amat_pair[0], "--seed", "1")
    assert (tmp_path / "a/model.ckpt").read_bytes() != (tmp_path / "c/model.ckpt").read_bytes()


def test_missing_dataset_names_flag(tmp_path, capsys):
    assert main(["train", "--amat", str(tmp_path / "nope.amat"), "--out-dir", str(tmp_path)]) == 2
    assert "--amat" in capsys.readouterr().err
    assert main(["train", "--out-dir", str(tmp_path)]) == 2
    assert main(["train", "--train-images", str(tmp_path)]) == 2  # no labels
    assert main(["classify", "--train-features", "x.bin", "--test-features", "y.bin"]) == 2
    assert main(["train", "--epochs", "many"]) == 2


def test_data_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.amat"
    bad.write_text("0 1 0 1 x\n")
    assert main(["train", "--amat", str(bad), "--out-dir", str(tmp_path)]) == 3
    assert "data error" in capsys.readouterr().err


def test_numerical_failure_exit_code(tmp_path, amat_pair):
    code = main(["train", "--amat", amat_pair[0], "--epochs", "30", "--hidden", "6", "--eta", "1e6",
                 "--momentum-rule", "literal", "--out-dir", str(tmp_path)])
    assert code == 4


def test_rotation_mode_usage_error(tmp_path, amat_pair):
    assert main(["train", "--amat", amat_pair[0], "--angles", "0,40", "--rotation-mode", "exact",
                 "--out-dir", str(tmp_path)]) == 2


def test_gamma_zero_shift_and_report(tmp_path, amat_pair):
    _train(tmp_path, amat_pair[0])
    ck = str(tmp_path / "model.ckpt")
    assert main(["gamma", "--checkpoint", ck, "--test-amat", amat_pair[1], "--delta", "0",
                 "--out-dir", str(tmp_path / "g")]) == 0
    rep = json.loads((tmp_path / "g/gamma_test.json").read_text())
    assert len(rep["gamma"]) == 6
    assert rep["mean_gamma"] == pytest.approx(1.0, abs=1e-9)
    rows = _rows(tmp_path / "g/gamma.csv")
    assert rows[0]["split"] == "test" and rows[0]["delta"] == "0"
    assert main(["gamma", "--checkpoint", ck, "--test-amat", amat_pair[1], "--angles", "0,90",
                 "--out-dir", str(tmp_path / "g")]) == 3


def test_extract_classify_pipeline(tmp_path, amat_pair):
    _train(tmp_path, amat_pair[0])
    assert main(["extract", "--checkpoint", str(tmp_path / "model.ckpt"), "--amat", amat_pair[0],
                 "--test-amat", amat_pair[1], "--out-dir", str(tmp_path / "f")]) == 0
    assert main(["classify", "--train-features", str(tmp_path / "f/train_features.bin"),
                 "--test-features", str(tmp_path / "f/test_features.bin"), "--kernel-gamma", "0.02,0.5",
                 "--kernel-sigma", "5", "--out-dir", str(tmp_path / "c")]) == 0
    rows = _rows(tmp_path / "c/classify.csv")
    assert [r["kernel"] for r in rows] == ["gamma=0.02", "gamma=0.5", "sigma=5"]
    assert float(rows[2]["kernel_gamma"]) == pytest.approx(0.02)


def test_export_filters(tmp_path, amat_pair):
    _train(tmp_path, amat_pair[0])
    assert main(["export-filters", "--checkpoint", str(tmp_path / "model.ckpt"), "--grid", "6x4",
                 "--out-dir", str(tmp_path), "--png", "false"]) == 0
    assert read_pgm(tmp_path / "filters.pgm").shape == (6 * 9 - 1, 4 * 9 - 1)
    assert not (tmp_path / "filters.png").exists()
    assert main(["export-filters", "--checkpoint", str(tmp_path / "model.ckpt"), "--slices", "4",
                 "--out-dir", str(tmp_path)]) == 2


def test_perturb_command(tmp_path, amat_pair):
    assert main(["perturb", "--amat", amat_pair[0], "--angles", "0,40,80,120,160,200,240,280,320",
                 "--rotation-mode", "nn", "--perturb-n", "1", "--perturb-p", "1", "--out-dir", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "orientations.csv")
    assert len(rows) == 120
    assert all((int(r["perturbed_index"]) - int(r["index"])) % 9 in (1, 8) for r in rows)


def test_config_file_and_env_precedence(tmp_path, amat_pair, monkeypatch):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# defaults\nepochs = 2\nhidden = 3\neta = 0.02\nseed = 4\n")
    monkeypatch.setenv("THETARBM_ETA", "0.03")
    monkeypatch.setenv("THETARBM_UNRELATED", "ignored")
    assert main(["--config", str(cfg), "train", "--amat", amat_pair[0], "--hidden", "5",
                 "--out-dir", str(tmp_path / "o")]) == 0
    c = json.loads((tmp_path / "o/config.json").read_text())
    assert (c["epochs"], c["n_hidden"], c["eta"], c["seed"]) == (2, 5, 0.03, 4)


def test_global_flags_before_subcommand(tmp_path, amat_pair):
    assert main(["--seed", "7", "--out-dir", str(tmp_path / "x"), "train", "--amat", amat_pair[0],
                 "--epochs", "1", "--hidden", "2"]) == 0
    assert json.loads((tmp_path / "x/config.json").read_text())["seed"] == 7


def test_config_file_errors(tmp_path, amat_pair):
    bad = tmp_path / "bad.cfg"
    bad.write_text("no equals sign here\n")
    assert main(["--config", str(bad), "train", "--amat", amat_pair[0]]) == 2
    bad.write_text("not_an_option = 1\n")
    assert main(["--config", str(bad), "train", "--amat", amat_pair[0]]) == 2
    assert main(["--config", str(tmp_path / "missing.cfg"), "train", "--amat", amat_pair[0]]) == 2
    js = tmp_path / "c.json"
    js.write_text('{"epochs": 1, "hidden": 2}')
    assert read_config_file(js) == {"epochs": 1, "hidden": 2}


def test_experiment_lemma_check(tmp_path):
    assert main(["experiment", "--name", "lemma-check", "--lemma-steps", "20", "--out-dir", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "lemma_residuals.csv")
    assert len(rows) == 20
    assert json.loads((tmp_path / "manifest.json").read_text())["status"] == "ok"


def test_experiment_table3_layout(tmp_path, amat_pair):
    code = main(["experiment", "--name", "table3", "--amat", amat_pair[0], "--test-amat", amat_pair[1],
                 "--angles", "0,40,80,120,160,200,240,280,320", "--rotation-mode", "nn",
                 "--epochs", "1", "--hidden", "4", "--batch-size", "40", "--kernel-gamma", "0.5",
                 "--no-figures", "--out-dir", str(tmp_path)])
    assert code == 0
    rows = _rows(tmp_path / "table3.csv")
    assert [r["n"] for r in rows] == ["1", "2", "3", "4", "unperturbed"]
    assert all(r[f"p={p}"] for r in rows[:4] for p in (0.1, 0.2, 0.3, 0.4))
    assert "p = 0.4" in (tmp_path / "table3.txt").read_text()


def test_experiment_needs_test_split(tmp_path, amat_pair):
    assert main(["experiment", "--name", "table1", "--amat", amat_pair[0], "--out-dir", str(tmp_path)]) == 2
    assert main(["experiment", "--name", "table1", "--amat", amat_pair[0], "--test-amat", amat_pair[1],
                 "--models", "rbm,tirbm", "--out-dir", str(tmp_path)]) == 2


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "thetarbm", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "export-filters" in out.stdout

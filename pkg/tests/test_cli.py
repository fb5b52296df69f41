import csv

import pytest

from isgib.cli import (
    EXIT_BAD_CONFIG, EXIT_MISSING_CHECKPOINT, EXIT_MISSING_DATA, EXIT_OK, EXIT_USAGE, main,
)
from isgib.trainer import RunConfig


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "data"
    assert main(["prepare", "--out", str(d), "--seed", "0"]) == EXIT_OK
    return d


def rows(path):
    return [r for r in csv.reader(line for line in open(path) if not line.startswith("#"))]


def test_prepare_train_eval(data_dir, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--dataset", str(data_dir), "--out", str(out), "--epochs", "2"]) == EXIT_OK
    res = rows(out / "results.csv")
    assert res[0][:3] == ["config_hash", "method", "seed"] and len(res) == 2
    assert RunConfig.from_toml(out / "config.toml").epochs == 2
    assert main(["eval", "--dataset", str(data_dir), "--out", str(out)]) == EXIT_OK
    assert [r[0] for r in rows(out / "eval.csv")] == ["split", "train", "val", "test"]
    assert main(["heatmap", "--out", str(out), "--batch", "16"]) == EXIT_OK
    for k in ("inputs", "reps", "labels"):
        assert (out / f"heatmap_{k}.csv").exists()


def test_rerun_from_effective_config_is_identical(data_dir, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    argv = ["--dataset", str(data_dir), "--epochs", "2", "--seed", "3", "--gammas", "0.5,0.1,0.5"]
    assert main(["train", "--out", str(a)] + argv) == EXIT_OK
    assert main(["train", "--out", str(b), "--config", str(a / "config.toml")]) == EXIT_OK
    assert (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()


def test_ablate_rows_in_ladder_order(data_dir, tmp_path):
    out = tmp_path / "ab"
    argv = ["ablate", "--dataset", str(data_dir), "--out", str(out), "--epochs", "1", "--seeds", "1"]
    assert main(argv) == EXIT_OK
    table = rows(out / "ablation.csv")
    assert [r[0] for r in table[1:]] == ["0.0 0.0 0.0", "0.5 0.0 0.0", "0.5 0.1 0.0", "0.5 0.1 0.5"]
    assert len(rows(out / "results.csv")) == 5


def test_sweep(tmp_path):
    out = tmp_path / "sw"
    argv = ["sweep", "--out", str(out), "--epochs", "1", "--seeds", "1", "--grid", "0/1;1/2"]
    assert main(argv) == EXIT_OK
    table = rows(out / "sweep.csv")
    assert table[0][:2] == ["mu", "sigma"] and len(table) == 3


def test_unknown_verb(capsys):
    assert main(["frobnicate"]) == EXIT_USAGE
    assert "usage" in capsys.readouterr().err


def test_missing_dataset(tmp_path):
    assert main(["train", "--dataset", str(tmp_path / "nope"), "--out", str(tmp_path)]) \
        == EXIT_MISSING_DATA
    assert main(["train", "--out", str(tmp_path)]) == EXIT_MISSING_DATA


@pytest.mark.parametrize("text", ["[run]\nlr = 'fast'\n", "[run]\nnot_a_key = 1\n", "[run\n"])
def test_malformed_config(text, data_dir, tmp_path):
    cfg = tmp_path / "bad.toml"
    cfg.write_text(text)
    assert main(["train", "--config", str(cfg), "--dataset", str(data_dir), "--out", str(tmp_path)]) \
        == EXIT_BAD_CONFIG


def test_bad_gammas(data_dir, tmp_path):
    assert main(["train", "--gammas", "1,2", "--dataset", str(data_dir), "--out", str(tmp_path)]) \
        == EXIT_BAD_CONFIG


def test_missing_checkpoint(data_dir, tmp_path):
    argv = ["eval", "--checkpoint", str(tmp_path / "none"), "--dataset", str(data_dir)]
    assert main(argv) == EXIT_MISSING_CHECKPOINT

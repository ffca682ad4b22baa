"""End-to-end runs of the ``mamapp`` command line."""
import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from mamapp import data as D
from mamapp.cli import main
from mamapp.evaluation import ConfusionMatrix
from mamapp.model import read_checkpoint

TINY = ["--set", "input_size=32, 32, 3", "--set", "num_blocks=1", "--batch-size", "8"]


@pytest.fixture(scope="module")
def run_dir(leaf_root, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(["train", "--data", str(leaf_root), "--out", str(out), "--epochs", "1", "--seed", "0", *TINY])
    assert code == 0
    return out


class TestSplit:
    def test_table_and_manifest(self, leaf_root, tmp_path, capsys):
        assert main(["split", "--data", str(leaf_root), "--seed", "1", "--out", str(tmp_path / "m.csv")]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0].split() == ["Class", "Train", "Val", "Test", "Total"]
        total = lines[-1].split()
        assert total[0] == "Total" and int(total[-1]) == 56
        idx = D.read_manifest(tmp_path / "m.csv")
        assert [r[1:] for r in idx.split_table()] == [D.split_counts(n) + (n,) for n in (12, 10, 20, 14)]

    def test_same_seed_same_bytes(self, leaf_root, tmp_path):
        for name in ("a.csv", "b.csv"):
            main(["split", "--data", str(leaf_root), "--seed", "4", "--out", str(tmp_path / name)])
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_missing_dir(self, tmp_path, capsys):
        missing = tmp_path / "nowhere"
        assert main(["split", "--data", str(missing), "--out", str(tmp_path / "m.csv")]) == 2
        assert str(missing) in capsys.readouterr().err

    def test_env_seed(self, leaf_root, tmp_path, monkeypatch):
        main(["split", "--data", str(leaf_root), "--seed", "9", "--out", str(tmp_path / "flag.csv")])
        monkeypatch.setenv("MAMAPP_SEED", "9")
        main(["split", "--data", str(leaf_root), "--out", str(tmp_path / "env.csv")])
        assert (tmp_path / "flag.csv").read_bytes() == (tmp_path / "env.csv").read_bytes()

    def test_bad_env_seed(self, leaf_root, tmp_path, monkeypatch):
        monkeypatch.setenv("MAMAPP_SEED", "abc")
        assert main(["split", "--data", str(leaf_root), "--out", str(tmp_path / "m.csv")]) == 2


class TestTrain:
    def test_artifacts(self, run_dir):
        for name in ("best.ckpt", "last.ckpt", "trainlog.csv", "summary.json", "split.csv", "manifest.json"):
            assert (run_dir / name).exists(), name
        listed = json.loads((run_dir / "manifest.json").read_text())["files"]
        assert "best.ckpt" in listed and "trainlog.csv" in listed

    def test_config_file_and_resume(self, leaf_root, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(f"# tiny run\ndata = {leaf_root}\nout = {tmp_path / 'out'}\n"
                       "input_size = 32, 32, 3\nnum_blocks = 1\nbatch_size = 8\nepochs = 1\n")
        assert main(["train", "--config", str(cfg)]) == 0
        step1 = read_checkpoint(tmp_path / "out" / "last.ckpt")[1]["optimizer_step"]
        assert main(["train", "--config", str(cfg), "--epochs", "2",
                     "--resume", str(tmp_path / "out" / "last.ckpt")]) == 0
        _, meta, _ = read_checkpoint(tmp_path / "out" / "last.ckpt")
        assert meta["optimizer_step"] == 2 * step1 and meta["epoch"] == 2
        assert len((tmp_path / "out" / "trainlog.csv").read_text().splitlines()) == 3

    def test_unknown_key(self, leaf_root, tmp_path, capsys):
        code = main(["train", "--data", str(leaf_root), "--out", str(tmp_path), "--set", "learning_rat=0.1"])
        assert code == 2 and "learning_rat" in capsys.readouterr().err

    def test_invalid_value(self, leaf_root, tmp_path, capsys):
        code = main(["train", "--data", str(leaf_root), "--out", str(tmp_path), "--set", "num_classes=1"])
        assert code == 2 and "num_classes" in capsys.readouterr().err

    def test_missing_data(self, tmp_path):
        assert main(["train", "--out", str(tmp_path)]) == 2


class TestEval:
    def test_accuracy_is_confusion_trace(self, run_dir, tmp_path, capsys):
        out = tmp_path / "ev"
        assert main(["eval", "--ckpt", str(run_dir / "best.ckpt"), "--data", str(run_dir / "split.csv"),
                     "--out", str(out)]) == 0
        m = json.loads((out / "metrics.json").read_text())
        cm = ConfusionMatrix.read_csv(out / "confusion.csv")
        assert m["accuracy"] == np.trace(cm.counts) / cm.total
        assert cm.total == len(D.read_manifest(run_dir / "split.csv").indices("test"))
        assert "accuracy" in capsys.readouterr().out

    def test_directory_uses_checkpoint_seed(self, run_dir, leaf_root, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["eval", "--ckpt", str(run_dir / "best.ckpt"), "--data", str(run_dir / "split.csv"), "--out", str(a)])
        main(["eval", "--ckpt", str(run_dir / "best.ckpt"), "--data", str(leaf_root), "--out", str(b)])
        assert (a / "confusion.csv").read_bytes() == (b / "confusion.csv").read_bytes()

    def test_config_mismatch_names_tensor(self, run_dir, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("input_size = 32, 32, 3\nnum_blocks = 1\nnum_classes = 3\n")
        code = main(["eval", "--ckpt", str(run_dir / "best.ckpt"), "--config", str(cfg),
                     "--data", str(run_dir / "split.csv"), "--out", str(tmp_path)])
        assert code == 2 and "head.weight" in capsys.readouterr().err

    def test_corrupt_checkpoint(self, run_dir, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"garbage" * 10)
        assert main(["eval", "--ckpt", str(bad), "--data", str(run_dir / "split.csv")]) == 2


class TestPredictFeaturesParams:
    def test_predict(self, run_dir, leaf_root, capsys):
        image = sorted((leaf_root / "healthy").iterdir())[0]
        assert main(["predict", "--ckpt", str(run_dir / "best.ckpt"), "--image", str(image)]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] in D.index_dataset(leaf_root).classes
        probs = [float(line.split(":")[1]) for line in lines[1:]]
        assert len(probs) == 4 and abs(sum(probs) - 1) < 1e-5

    def test_features_with_pca(self, run_dir, tmp_path):
        assert main(["features", "--ckpt", str(run_dir / "best.ckpt"), "--data", str(run_dir / "split.csv"),
                     "--split", "val", "--pca", "2", "--out", str(tmp_path)]) == 0
        rows = list(csv.reader(open(tmp_path / "features.csv")))
        assert len(rows[0]) == 34
        assert len(rows) - 1 == len(D.read_manifest(run_dir / "split.csv").indices("val"))
        info = json.loads((tmp_path / "pca2.json").read_text())
        assert len(info["explained_variance_ratio"]) == 2 and sum(info["explained_variance_ratio"]) <= 1

    def test_params(self, capsys):
        assert main(["params"]) == 0
        last = capsys.readouterr().out.splitlines()[-1]
        assert "paper: 51,000" in last
        total = int(last.split()[1].replace(",", ""))
        assert total == 30_980 and total <= 60_000

    def test_console_script(self):
        done = subprocess.run([sys.executable, "-m", "mamapp.cli", "params"], capture_output=True, text=True)
        assert done.returncode == 0 and "total: 30,980" in done.stdout

import csv
import subprocess
import sys

import numpy as np
import pytest

from rgmorph.cli import run_cli
from rgmorph.persistence import load_checkpoint, load_dataset, load_gmm, read_pgm

SMALL = ["--widths", "32,16", "--code-len", "4", "--batch-size", "20"]


def _csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """A small dataset and a trained checkpoint shared by the read-only tests."""
    d = tmp_path_factory.mktemp("cli")
    assert run_cli(["synth", "--n-per-class", "20", "--out", str(d / "data.rgds"), "--seed", "3"]) == 0
    assert run_cli(
        ["train", "--data", str(d / "data.rgds"), "--out", str(d / "m.dnae"), "--epochs", "3", "--seed", "3"] + SMALL
    ) == 0
    return d


class TestSynth:
    def test_record_count(self, tmp_path):
        out = tmp_path / "data.rgds"
        assert run_cli(["synth", "--n-per-class", "200", "--out", str(out), "--seed", "7"]) == 0
        ds = load_dataset(out)
        assert len(ds) == 400
        assert np.bincount(ds.labels).tolist() == [200, 200]

    def test_aug_factors(self, tmp_path):
        out = tmp_path / "d.rgds"
        argv = ["synth", "--n-per-class", "10", "--out", str(out), "--aug-factor-fri", "3", "--aug-factor-frii", "2"]
        assert run_cli(argv) == 0
        ds = load_dataset(out)
        # per class: 2 test, 2 val, 6 train originals
        assert np.sum(ds.labels == 0) == 2 + 8 * 3
        assert np.sum(ds.labels == 1) == 2 + 8 * 2

    def test_too_few(self, tmp_path):
        assert run_cli(["synth", "--n-per-class", "2", "--out", str(tmp_path / "x")]) == 2


class TestPrep:
    def test_from_raw_dir(self, tmp_path):
        raw = tmp_path / "raw"
        argv = ["synth", "--n-per-class", "6", "--out", str(tmp_path / "s.rgds"), "--raw-size", "150", "--raw-dir", str(raw)]
        assert run_cli(argv) == 0
        rows = _csv(raw / "labels.csv")
        assert rows[0] == ["filename", "label"] and len(rows) == 13
        assert read_pgm(raw / rows[1][0]).shape == (150, 150)
        out = tmp_path / "p.rgds"
        argv = ["prep", "--images", str(raw), "--labels", str(raw / "labels.csv"), "--out", str(out)]
        assert run_cli(argv + ["--aug-factor-fri", "2", "--aug-factor-frii", "3"]) == 0
        ds = load_dataset(out)
        assert ds.images.shape[1:] == (40, 40)
        assert np.sum(ds.labels == 0) == 1 + 5 * 2
        assert np.sum(ds.labels == 1) == 1 + 5 * 3

    def test_bad_labels_csv(self, tmp_path):
        (tmp_path / "l.csv").write_text("name,class\n")
        argv = ["prep", "--images", str(tmp_path), "--labels", str(tmp_path / "l.csv"), "--out", str(tmp_path / "o")]
        assert run_cli(argv) == 2

    def test_missing_image(self, tmp_path):
        (tmp_path / "l.csv").write_text("filename,label\nnope.pgm,FRI\n")
        argv = ["prep", "--images", str(tmp_path), "--labels", str(tmp_path / "l.csv"), "--out", str(tmp_path / "o")]
        assert run_cli(argv) == 1


class TestTrain:
    def test_metrics_rows(self, work):
        rows = _csv(str(work / "m.dnae") + ".metrics.csv")
        assert rows[0] == ["epoch", "lr", "train_mse", "train_ce", "val_mse", "val_ce"]
        assert [r[0] for r in rows[1:]] == ["1", "2", "3"]
        assert float(rows[2][1]) == pytest.approx(0.001 * 0.95)

    def test_checkpoint_arch(self, work):
        m = load_checkpoint(work / "m.dnae")
        assert m.arch.encoder_widths == (32, 16) and m.arch.code_len == 4 and m.epochs_done == 3

    def test_config_file_and_override(self, tmp_path, work):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# small run\nepochs = 2\ncode_len = 5\nwidths = 32,16\nbatch-size = 20\nreg = dropout\n")
        assert run_cli(["train", "--config", str(cfg), "--data", str(work / "data.rgds"), "--out", "x"]) == 2
        cfg.write_text("epochs = 2\ncode_len = 5\nwidths = 32,16\nbatch_size = 20\nregularizer = dropout\n")
        out = tmp_path / "c.dnae"
        argv = ["train", "--config", str(cfg), "--data", str(work / "data.rgds"), "--out", str(out), "--code-len", "6"]
        assert run_cli(argv) == 0
        m = load_checkpoint(out)
        assert m.arch.code_len == 6 and m.arch.regularizer == "dropout" and m.epochs_done == 2

    def test_resume(self, tmp_path, work):
        data = str(work / "data.rgds")
        full, part = tmp_path / "full.dnae", tmp_path / "part.dnae"
        common = ["--data", data, "--seed", "1", "--checkpoint-every", "2"] + SMALL
        assert run_cli(["train", "--out", str(full), "--epochs", "4"] + common) == 0
        assert run_cli(["train", "--out", str(part), "--epochs", "2"] + common) == 0
        assert run_cli(["train", "--out", str(part), "--epochs", "4", "--resume", str(part)] + common) == 0
        assert full.read_bytes() == part.read_bytes()
        assert _csv(str(full) + ".metrics.csv") == _csv(str(part) + ".metrics.csv")

    def test_missing_data(self, tmp_path):
        assert run_cli(["train", "--data", str(tmp_path / "none.rgds"), "--out", str(tmp_path / "m")]) == 1

    def test_batch_larger_than_train_set(self, work, tmp_path):
        argv = ["train", "--data", str(work / "data.rgds"), "--out", str(tmp_path / "m"), "--batch-size", "5000"]
        assert run_cli(argv + ["--widths", "8", "--code-len", "2", "--epochs", "1"]) == 1


class TestUsage:
    def test_generate_zero(self, work):
        assert run_cli(["generate", "--class", "fri", "-n", "0", "--gmm", "g", "--ckpt", str(work / "m.dnae")]) == 2

    def test_unknown_subcommand(self):
        assert run_cli(["frobnicate"]) == 2

    def test_unknown_config_key(self, tmp_path, work):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("learning_rate = 0.1\n")
        assert run_cli(["eval", "--config", str(cfg), "--ckpt", str(work / "m.dnae"), "--data", "x"]) == 2

    def test_bad_class(self):
        assert run_cli(["fit-gmm", "--class", "FRIII"]) == 2

    def test_module_entry_point(self, work):
        proc = subprocess.run([sys.executable, "-m", "rgmorph", "generate", "--class", "fri", "-n", "0"], capture_output=True)
        assert proc.returncode == 2


class TestDownstream:
    def test_eval_deterministic(self, work, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        for out in (a, b):
            assert run_cli(["eval", "--ckpt", str(work / "m.dnae"), "--data", str(work / "data.rgds"), "--out", str(out)]) == 0
        assert a.read_bytes() == b.read_bytes()
        rows = _csv(a)
        assert rows[0] == ["split", "n", "mse", "mse_per_pixel", "ce", "mse_fri", "mse_frii", "accuracy"]
        assert rows[1][0] == "test" and rows[1][1] == "8"
        assert float(rows[1][3]) == pytest.approx(float(rows[1][2]) / 1600)

    def test_encode(self, work, tmp_path):
        out = tmp_path / "codes.csv"
        argv = ["encode", "--ckpt", str(work / "m.dnae"), "--data", str(work / "data.rgds"), "--split", "train", "--out", str(out)]
        assert run_cli(argv) == 0
        rows = _csv(out)
        assert rows[0] == ["label", "split", "origin_id", "aug_index", "f0", "f1", "f2", "f3"]
        assert len(rows) == 1 + 2 * 13
        assert all(float(v) >= 0 for r in rows[1:] for v in r[4:])

    def test_fit_gmm_and_generate(self, work, tmp_path):
        g = tmp_path / "fri.gmm"
        argv = ["fit-gmm", "--ckpt", str(work / "m.dnae"), "--data", str(work / "data.rgds"), "--class", "FRI"]
        assert run_cli(argv + ["--k", "2", "--out", str(g)]) == 0
        model = load_gmm(g)
        assert model.means.shape == (2, 4) and model.cov_type == "diag"
        dirs = [tmp_path / "g1", tmp_path / "g2"]
        for d in dirs:
            argv = ["generate", "--gmm", str(g), "--ckpt", str(work / "m.dnae"), "--class", "fri", "-n", "3"]
            assert run_cli(argv + ["--out-dir", str(d), "--seed", "5"]) == 0
        names = sorted(p.name for p in dirs[0].iterdir())
        assert names == ["fri_0000.pgm", "fri_0001.pgm", "fri_0002.pgm"]
        for n in names:
            assert (dirs[0] / n).read_bytes() == (dirs[1] / n).read_bytes()
            img = read_pgm(dirs[0] / n)
            assert img.shape == (40, 40)

    def test_generate_dimension_mismatch(self, work, tmp_path):
        g = tmp_path / "k.gmm"
        argv = ["fit-gmm", "--ckpt", str(work / "m.dnae"), "--data", str(work / "data.rgds"), "--class", "frii"]
        assert run_cli(argv + ["--k", "1", "--out", str(g)]) == 0
        other = tmp_path / "o.dnae"
        argv = ["train", "--data", str(work / "data.rgds"), "--out", str(other), "--epochs", "0", "--widths", "8", "--batch-size", "10"]
        assert run_cli(argv + ["--code-len", "3"]) == 0
        assert run_cli(["generate", "--gmm", str(g), "--ckpt", str(other), "--class", "frii", "--out-dir", str(tmp_path)]) == 1

    def test_reconstruct(self, work, tmp_path):
        argv = ["reconstruct", "--ckpt", str(work / "m.dnae"), "--data", str(work / "data.rgds"), "-n", "2"]
        assert run_cli(argv + ["--out-dir", str(tmp_path / "r")]) == 0
        assert len(list((tmp_path / "r").glob("*_input.pgm"))) == 2
        assert len(list((tmp_path / "r").glob("*_recon.pgm"))) == 2

    def test_sweep(self, work, tmp_path):
        out = tmp_path / "sweep.csv"
        argv = ["sweep", "--data", str(work / "data.rgds"), "--code-lens", "2,4", "--epochs", "2", "--widths", "16"]
        assert run_cli(argv + ["--batch-size", "20", "--out", str(out), "--ckpt-dir", str(tmp_path / "ck")]) == 0
        rows = _csv(out)
        assert rows[0] == ["code_len", "test_mse", "test_mse_fri", "test_mse_frii"]
        assert [r[0] for r in rows[1:]] == ["2", "4"]
        assert load_checkpoint(tmp_path / "ck" / "code4.dnae").arch.code_len == 4


@pytest.mark.slow
def test_default_architecture_train(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run_cli(["synth", "--n-per-class", "200", "--out", "data.rgds", "--seed", "7"]) == 0
    assert run_cli(["train", "--data", "data.rgds", "--loss", "mse_ce", "--reg", "bn", "--code-len", "256", "--epochs", "30"]) == 0
    assert len(_csv("model.dnae.metrics.csv")) == 31
    assert load_checkpoint("model.dnae").arch.encoder_widths == (2048, 1024, 1024)

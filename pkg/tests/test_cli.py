import csv
import subprocess
import sys

import numpy as np
import pytest

from lbn import cli
from lbn.checkpoint import save_checkpoint
from lbn.denoise import psnr, read_pgm, write_pgm
from lbn.estimators import ReLURegressor
from lbn.likelihood import LOG_2PI


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy") / "run"
    assert run("train", "--task", "toy", "--epochs", 5, "--seed", 7, "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def image_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("imgs")
    rng = np.random.default_rng(0)
    for i in range(5):
        base = np.cumsum(np.cumsum(rng.normal(size=(24, 24)), axis=0), axis=1)
        write_pgm(root / f"img{i}.pgm", (base - base.min()) / (base.max() - base.min()))
    return root


@pytest.fixture(scope="module")
def denoise_run(tmp_path_factory, image_dir):
    cfg = tmp_path_factory.mktemp("cfg") / "small.cfg"
    cfg.write_text("# tiny run\nn_patches = 64\nchannels = 2\nkernel_size = 3\n"
                   "n_blocks = 1\ngating_layers = 2\nbatch_size = 8\nvalidation_fraction = 0.1\n")
    out = cfg.parent / "run"
    assert run("train", "--task", "denoise", "--config", cfg, "--data", image_dir,
               "--epochs", 1, "--out", out) == 0
    return out


class TestTrain:
    def test_outputs(self, toy_run):
        rows = list(csv.reader(open(toy_run / "metrics.csv")))
        assert rows[0] == ["epoch", "train_nll", "val_metric"]
        assert len(rows) == 6
        assert (toy_run / "model.ckpt").is_file() and (toy_run / "run.json").is_file()

    def test_rerun_is_byte_identical(self, toy_run, tmp_path):
        assert run("train", "--task", "toy", "--epochs", 5, "--seed", 7, "--out", tmp_path / "b") == 0
        assert (tmp_path / "b" / "metrics.csv").read_bytes() == (toy_run / "metrics.csv").read_bytes()
        assert (tmp_path / "b" / "run.json").read_bytes() == (toy_run / "run.json").read_bytes()

    def test_record_time_column(self, tmp_path):
        assert run("train", "--task", "toy", "--epochs", 1, "--record-time", "--out", tmp_path) == 0
        assert (tmp_path / "metrics.csv").read_text().startswith("epoch,train_nll,val_metric,wall_seconds")

    def test_k_zero_is_usage_error(self, tmp_path, capsys):
        assert run("train", "--task", "toy", "--k", 0, "--out", tmp_path / "x") == 1
        assert "--k" in capsys.readouterr().err
        assert not (tmp_path / "x").exists()

    def test_bad_flag(self, capsys):
        assert run("train", "--task", "nope", "--out", "x") == 1

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("colour = blue\n")
        assert run("train", "--task", "toy", "--config", cfg, "--out", tmp_path / "o") == 1

    def test_denoise_needs_data(self, tmp_path):
        assert run("train", "--task", "denoise", "--out", tmp_path / "o") == 1
        assert not (tmp_path / "o").exists()

    def test_denoise_run_records_split(self, denoise_run):
        import json

        meta = json.loads((denoise_run / "run.json").read_text())
        assert meta["test_images"] and not set(meta["test_images"]) & set(meta["train_images"])
        assert meta["config"]["channels"] == 2


class TestEval:
    def test_missing_checkpoint(self, tmp_path):
        assert run("eval", "--model", tmp_path / "none.ckpt", "--csv", tmp_path / "o" / "r.csv") == 1
        assert not (tmp_path / "o").exists()

    def test_perfect_fit_k1(self, tmp_path, capsys):
        x = np.linspace(-1, 1, 10)[:, None]
        est = ReLURegressor(hidden_layer_sizes=(3,), epochs=1).fit(x, np.zeros(10))
        for p in est.model_.parameters().values():
            p[...] = 0.0
        est.model_.output_bias[...] = 0.75
        save_checkpoint(tmp_path / "m.ckpt", est)
        (tmp_path / "pairs.csv").write_text("x,y\n" + "".join(f"{v},0.75\n" for v in x[:, 0]))
        assert run("eval", "--model", tmp_path / "m.ckpt", "--data", tmp_path, "--k", 1) == 0
        line = capsys.readouterr().out.splitlines()[0]
        assert float(line.split("=")[1]) == pytest.approx(-0.5 * LOG_2PI, abs=1e-12)

    def test_larger_k_not_worse(self, toy_run, capsys):
        scores = {}
        for k in (1, 50):
            assert run("eval", "--model", toy_run / "model.ckpt", "--k", k, "--n", 1000) == 0
            scores[k] = float(capsys.readouterr().out.split("=")[1])
        assert scores[50] >= scores[1] - 0.05

    def test_csv(self, toy_run, tmp_path):
        assert run("eval", "--model", toy_run / "model.ckpt", "--k", 5, "--csv", tmp_path / "r.csv") == 0
        assert (tmp_path / "r.csv").read_text().startswith("metric,value\nmean_log_likelihood,")

    def test_denoiser_eval(self, denoise_run, image_dir, tmp_path, capsys):
        assert run("eval", "--model", denoise_run / "model.ckpt", "--data", image_dir,
                   "--sigma", 25, 50, "--csv", tmp_path / "p.csv") == 0
        out = capsys.readouterr().out
        assert "sigma=25 mean_psnr_db=" in out and "sigma=50 mean_psnr_db=" in out
        rows = list(csv.reader(open(tmp_path / "p.csv")))
        assert rows[0] == ["image", "sigma", "mode", "psnr_db"] and len(rows) == 11


class TestDenoise:
    def test_mean_mode_reproducible(self, denoise_run, image_dir, tmp_path):
        img = image_dir / "img0.pgm"
        for d in ("a", "b"):
            assert run("denoise", "--model", denoise_run / "model.ckpt", "--input", img,
                       "--sigma", 25, "--mode", "mean", "--out", tmp_path / d) == 0
        a = (tmp_path / "a" / "denoised_mean.pgm").read_bytes()
        assert a == (tmp_path / "b" / "denoised_mean.pgm").read_bytes()
        assert (tmp_path / "a" / "noisy.pgm").is_file()

    def test_sample_count(self, denoise_run, image_dir, tmp_path):
        assert run("denoise", "--model", denoise_run / "model.ckpt", "--input", image_dir / "img1.pgm",
                   "--mode", "sample", "--samples", 3, "--out", tmp_path) == 0
        assert len(list(tmp_path.glob("sample_*.pgm"))) == 3

    def test_printed_psnr_matches_file(self, denoise_run, image_dir, tmp_path, capsys):
        clean = image_dir / "img2.pgm"
        assert run("denoise", "--model", denoise_run / "model.ckpt", "--input", clean, "--sigma", 25,
                   "--mode", "map", "--clean", clean, "--out", tmp_path) == 0
        printed = float(capsys.readouterr().out.strip().split("=")[1])
        actual = psnr(read_pgm(tmp_path / "denoised_map.pgm"), read_pgm(clean))
        assert abs(printed - actual) < 0.01

    def test_wrong_checkpoint_kind(self, toy_run, image_dir, tmp_path):
        assert run("denoise", "--model", toy_run / "model.ckpt", "--input", image_dir / "img0.pgm",
                   "--out", tmp_path / "o") == 1

    def test_missing_input(self, denoise_run, tmp_path):
        assert run("denoise", "--model", denoise_run / "model.ckpt", "--input", tmp_path / "no.pgm",
                   "--out", tmp_path / "o") == 1
        assert not (tmp_path / "o").exists()


class TestSample:
    def test_toy_csv(self, toy_run, tmp_path):
        assert run("sample", "--model", toy_run / "model.ckpt", "--input", "0,0.5",
                   "--samples", 4, "--out", tmp_path) == 0
        rows = list(csv.reader(open(tmp_path / "samples.csv")))
        assert rows[0] == ["sample", "x", "y"] and len(rows) == 9

    def test_zero_samples_rejected(self, toy_run, tmp_path):
        assert run("sample", "--model", toy_run / "model.ckpt", "--input", "0",
                   "--samples", 0, "--out", tmp_path / "o") == 1
        assert not (tmp_path / "o").exists()

    def test_deterministic_model_gives_identical_samples(self, tmp_path):
        x = np.linspace(-1, 1, 10)[:, None]
        est = ReLURegressor(hidden_layer_sizes=(3,), epochs=1).fit(x, x[:, 0])
        save_checkpoint(tmp_path / "m.ckpt", est)
        assert run("sample", "--model", tmp_path / "m.ckpt", "--input", "0.3",
                   "--samples", 5, "--out", tmp_path / "s") == 0
        ys = {r["y"] for r in csv.DictReader(open(tmp_path / "s" / "samples.csv"))}
        assert len(ys) == 1

    def test_image_samples(self, denoise_run, image_dir, tmp_path):
        assert run("sample", "--model", denoise_run / "model.ckpt", "--input", image_dir / "img3.pgm",
                   "--samples", 2, "--out", tmp_path) == 0
        assert read_pgm(tmp_path / "sample_001.pgm").shape == (24, 24)


def test_internal_error_exit_code(monkeypatch, toy_run, capsys):
    def boom(args):
        raise RuntimeError("kaboom")

    monkeypatch.setattr(cli, "cmd_eval", boom)
    assert run("eval", "--model", toy_run / "model.ckpt") == 2
    assert "kaboom" in capsys.readouterr().err


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "lbn", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("lbn ")

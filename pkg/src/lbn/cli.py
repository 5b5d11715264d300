"""Command line interface: ``lbn train | eval | denoise | sample``.

Exit codes: 0 success, 1 user error (bad flags, missing or malformed
inputs), 2 internal error. Outputs are staged in a temporary directory and
moved into ``--out`` only when the command succeeds.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import shutil
import sys
import tempfile
import warnings
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, config_digest, load_checkpoint, save_checkpoint
from .denoise import (
    NoiseSpec,
    corrupt,
    extract_patches,
    load_image_dir,
    psnr,
    quantize,
    read_pgm,
    split_images,
    toy_bimodal_dataset,
    write_pgm,
)
from .estimators import (
    ConvLBNDenoiser,
    CSBNRegressor,
    LBNRegressor,
    PatchDenoiser,
    ReLURegressor,
    _Denoiser,
)
from .optim import TrainingDiverged
from .tensor import Rng


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UserError(message)


# --------------------------------------------------------------------------
# config


TOY_DEFAULTS = {
    "model": "lbn",
    "n_samples": 10000,
    "hidden": "32",
    "gating_hidden": 2,
    "stochastic_gating": True,
    "target_scale": 0.1,
    "epochs": 90,
    "batch_size": 100,
    "k": 20,
    "k_eval": 100,
    "lr": 1e-3,
    "validation_fraction": 0.2,
    "seed": 0,
    "max_seconds": None,
}

DENOISE_DEFAULTS = {
    "model": "lbn",
    "data": None,
    "patch_size": 16,
    "n_patches": 20000,
    "sigma": 25.0,
    "test_fraction": 0.2,
    "channels": 16,
    "kernel_size": 5,
    "n_blocks": 2,
    "gating_layers": 3,
    "stochastic_gating": False,
    "hidden": "256",
    "epochs": 1,
    "batch_size": 16,
    "k": 1,
    "lr": 3e-3,
    "validation_fraction": 0.02,
    "seed": 0,
    "max_seconds": None,
}


def _coerce(value, like):
    if like is None:
        if value in ("", "none", "None"):
            return None
        try:
            return float(value)
        except ValueError:
            return value
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise UserError(f"expected a boolean, got {value!r}")
    try:
        return type(like)(value)
    except ValueError as exc:
        raise UserError(f"bad config value {value!r}: {exc}") from exc


def read_config(path, defaults) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    cfg = dict(defaults)
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UserError(f"cannot read config {path}: {exc.strerror}") from exc
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UserError(f"{path}:{n}: expected key = value")
        key, value = (t.strip() for t in line.split("=", 1))
        if key not in defaults:
            raise UserError(f"{path}:{n}: unknown key {key!r}")
        cfg[key] = _coerce(value, defaults[key])
    return cfg


def _hidden(text) -> tuple:
    try:
        return tuple(int(t) for t in str(text).replace(";", ",").split(",") if t.strip())
    except ValueError as exc:
        raise UserError(f"bad layer sizes {text!r}") from exc


# --------------------------------------------------------------------------
# output staging


@contextmanager
def staged_output(out):
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.tmp-", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    out.mkdir(exist_ok=True)
    for f in sorted(tmp.iterdir()):
        f.replace(out / f.name)
    tmp.rmdir()


def _load(path):
    if not Path(path).is_file():
        raise UserError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise UserError(f"{path}: {exc}") from exc


def _read_image(path):
    try:
        return read_pgm(path)
    except FileNotFoundError as exc:
        raise UserError(f"image not found: {path}") from exc
    except ValueError as exc:
        raise UserError(str(exc)) from exc


# --------------------------------------------------------------------------
# train


def _toy_estimator(cfg):
    common = dict(
        epochs=int(cfg["epochs"]), batch_size=int(cfg["batch_size"]),
        learning_rate=float(cfg["lr"]), validation_fraction=float(cfg["validation_fraction"]),
        target_scale=float(cfg["target_scale"]), random_state=int(cfg["seed"]),
        max_seconds=cfg["max_seconds"],
    )
    hidden = _hidden(cfg["hidden"])
    if cfg["model"] == "lbn":
        return LBNRegressor(hidden_layer_sizes=hidden, gating_hidden=int(cfg["gating_hidden"]),
                            stochastic_gating=bool(cfg["stochastic_gating"]), k=int(cfg["k"]),
                            k_eval=int(cfg["k_eval"]), **common)
    if cfg["model"] == "relu":
        return ReLURegressor(hidden_layer_sizes=hidden, **common)
    if cfg["model"] == "csbn":
        return CSBNRegressor(hidden_layer_sizes=hidden, k=int(cfg["k"]), k_eval=int(cfg["k_eval"]),
                             **common)
    raise UserError(f"unknown toy model {cfg['model']!r}")


def _train_toy(cfg):
    x, y = toy_bimodal_dataset(int(cfg["n_samples"]), Rng(int(cfg["seed"])).split(100))
    est = _toy_estimator(cfg)
    est.fit(x, y)
    return est, {}


def _train_denoise(cfg):
    if not cfg["data"]:
        raise UserError("denoise training needs --data DIR (a folder of .pgm images)")
    try:
        named = load_image_dir(cfg["data"])
    except FileNotFoundError as exc:
        raise UserError(str(exc)) from exc
    root = Rng(int(cfg["seed"]))
    train_imgs, test_imgs = split_images(named, float(cfg["test_fraction"]), root.split(101))
    size = int(cfg["patch_size"])
    clean = extract_patches([im for _, im in train_imgs], size, int(cfg["n_patches"]),
                            root.split(102)).patches[:, 0]
    noisy = corrupt(clean, NoiseSpec(float(cfg["sigma"])), root.split(103))
    common = dict(k=int(cfg["k"]), epochs=int(cfg["epochs"]), batch_size=int(cfg["batch_size"]),
                  learning_rate=float(cfg["lr"]),
                  validation_fraction=float(cfg["validation_fraction"]),
                  random_state=int(cfg["seed"]), max_seconds=cfg["max_seconds"])
    if cfg["model"] == "lbn":
        est = ConvLBNDenoiser(channels=int(cfg["channels"]), kernel_size=int(cfg["kernel_size"]),
                              n_blocks=int(cfg["n_blocks"]),
                              gating_layers=int(cfg["gating_layers"]),
                              stochastic_gating=bool(cfg["stochastic_gating"]), **common)
    elif cfg["model"] in ("csbn", "relu"):
        est = PatchDenoiser(model=cfg["model"], hidden_layer_sizes=_hidden(cfg["hidden"]), **common)
    else:
        raise UserError(f"unknown denoise model {cfg['model']!r}")
    est.fit(noisy, clean)
    return est, {"train_images": [n for n, _ in train_imgs],
                 "test_images": [n for n, _ in test_imgs]}


def cmd_train(args):
    defaults = TOY_DEFAULTS if args.task == "toy" else DENOISE_DEFAULTS
    cfg = read_config(args.config, defaults) if args.config else dict(defaults)
    for key in ("seed", "k", "epochs", "lr", "data"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if int(cfg["k"]) < 1:
        raise UserError("--k must be >= 1")
    if int(cfg["epochs"]) < 1:
        raise UserError("--epochs must be >= 1")
    if float(cfg["lr"]) <= 0:
        raise UserError("--lr must be positive")
    with staged_output(args.out) as tmp:
        est, extra = (_train_toy if args.task == "toy" else _train_denoise)(cfg)
        digest = config_digest(cfg)
        meta = {"task": args.task, "seed": int(cfg["seed"]), "config_digest": digest}
        save_checkpoint(tmp / "model.ckpt", est, extra=meta)
        (tmp / "metrics.csv").write_text(est.metric_log_.to_csv(include_time=args.record_time))
        run = {"lbn_version": __version__, "task": args.task, "config": cfg,
               "config_digest": digest, "best_epoch": est.metric_log_.best().epoch, **extra}
        (tmp / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n")
    print(f"best_val_metric={est.metric_log_.best().val_metric!r}")
    return 0


# --------------------------------------------------------------------------
# eval


def _read_pairs(path, n_in):
    path = Path(path)
    if path.is_dir():
        path = path / "pairs.csv"
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise UserError(f"cannot read {path}: {exc.strerror}") from exc
    header, body = rows[0], rows[1:]
    xcols = [i for i, h in enumerate(header) if h.strip().startswith("x")]
    ycols = [i for i, h in enumerate(header) if h.strip().startswith("y")]
    if len(xcols) != n_in or not ycols or not body:
        raise UserError(f"{path}: need {n_in} x* column(s), y* column(s) and at least one row")
    data = np.array(body, dtype=np.float64)
    return data[:, xcols], data[:, ycols]


def cmd_eval(args):
    est, manifest = _load(args.model)
    if args.k < 1:
        raise UserError("--k must be >= 1")
    rng = Rng(args.seed)
    lines, rows = [], []
    if isinstance(est, _Denoiser):
        if not args.data:
            raise UserError("denoiser evaluation needs --data DIR of clean .pgm images")
        try:
            named = load_image_dir(args.data)
        except FileNotFoundError as exc:
            raise UserError(str(exc)) from exc
        lls = []
        for sigma in args.sigma:
            scores = []
            for i, (name, clean) in enumerate(named):
                noisy = corrupt(clean, NoiseSpec(sigma), rng.split(i))
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    pred = est.predict(noisy[None], mode="mean", random_state=rng.split(1000 + i))[0]
                scores.append(psnr(pred, clean))
                lls.append(est.log_likelihood(noisy[None], clean[None], k=args.k,
                                              random_state=rng.split(2000 + i))[0])
                rows.append((name, sigma, "mean", scores[-1]))
            lines.append(f"sigma={sigma:g} mean_psnr_db={np.mean(scores):.4f}")
        mean_ll = float(np.mean(lls))
    else:
        if args.data:
            x, y = _read_pairs(args.data, est.n_features_in_)
        else:
            x, y = toy_bimodal_dataset(args.n, rng.split(0))
        mean_ll = float(np.mean(est.log_likelihood(x, y, k=args.k, random_state=rng.split(1))))
    print(f"mean_log_likelihood={mean_ll!r}")
    for line in lines:
        print(line)
    if args.csv:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if rows:
            w.writerow(["image", "sigma", "mode", "psnr_db"])
            w.writerows((n, f"{s:g}", m, repr(float(p))) for n, s, m, p in rows)
        else:
            w.writerow(["metric", "value"])
            w.writerow(["mean_log_likelihood", repr(mean_ll)])
        out = Path(args.csv)
        with staged_output(out.parent if str(out.parent) else ".") as tmp:
            (tmp / out.name).write_text(buf.getvalue())
    return 0


# --------------------------------------------------------------------------
# denoise / sample


def cmd_denoise(args):
    est, _ = _load(args.model)
    if not isinstance(est, _Denoiser):
        raise UserError("checkpoint is not a denoiser")
    if args.samples < 1:
        raise UserError("--samples must be >= 1")
    if args.sigma < 0:
        raise UserError("--sigma must be >= 0")
    image = _read_image(args.input)
    clean = _read_image(args.clean) if args.clean else None
    if clean is not None and clean.shape != image.shape:
        raise UserError("--clean image size differs from --input")
    rng = Rng(args.seed)
    noisy = corrupt(image, NoiseSpec(args.sigma), rng.split(0)) if args.sigma > 0 else image
    with staged_output(args.out) as tmp:
        if args.sigma > 0:
            write_pgm(tmp / "noisy.pgm", noisy)
        if args.mode == "sample":
            outs = list(est.sample(noisy[None], n_samples=args.samples,
                                   random_state=rng.split(1))[:, 0])
            names = [f"sample_{i:03d}.pgm" for i in range(len(outs))]
        else:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", RuntimeWarning)
                outs = [est.predict(noisy[None], mode=args.mode, random_state=rng.split(1))[0]]
            for w in caught:
                print(f"warning: {w.message}", file=sys.stderr)
            names = [f"denoised_{args.mode}.pgm"]
        for name, img in zip(names, outs):
            write_pgm(tmp / name, img)
    if clean is not None:
        for img in outs:
            print(f"psnr_db={psnr(quantize(img) / 255.0, clean):.4f}")
    return 0


def _parse_vectors(text, n_in):
    rows = [r for r in text.split(";") if r.strip()]
    try:
        vals = [[float(v) for v in r.split(",") if v.strip()] for r in rows]
    except ValueError as exc:
        raise UserError(f"--input must be numbers or an image path: {exc}") from exc
    if n_in == 1 and len(vals) == 1:
        return np.array(vals[0])[:, None]
    arr = np.array(vals)
    if arr.ndim != 2 or arr.shape[1] != n_in:
        raise UserError(f"each input row needs {n_in} comma-separated values")
    return arr


def cmd_sample(args):
    est, _ = _load(args.model)
    if args.samples < 1:
        raise UserError("--samples must be >= 1")
    rng = Rng(args.seed)
    with staged_output(args.out) as tmp:
        if isinstance(est, _Denoiser):
            image = _read_image(args.input)
            draws = est.sample(image[None], n_samples=args.samples, random_state=rng)[:, 0]
            for i, img in enumerate(draws):
                write_pgm(tmp / f"sample_{i:03d}.pgm", img)
        else:
            x = _parse_vectors(args.input, est.n_features_in_)
            draws = est.sample(x, n_samples=args.samples, random_state=rng)
            draws = draws.reshape(args.samples, len(x), -1)
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            xs = ["x"] if x.shape[1] == 1 else [f"x{i}" for i in range(x.shape[1])]
            ys = ["y"] if draws.shape[2] == 1 else [f"y{i}" for i in range(draws.shape[2])]
            w.writerow(["sample"] + xs + ys)
            for s in range(args.samples):
                for i in range(len(x)):
                    w.writerow([s] + [repr(float(v)) for v in x[i]]
                               + [repr(float(v)) for v in draws[s, i]])
            (tmp / "samples.csv").write_text(buf.getvalue())
    return 0


# --------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="lbn", description="Linearizing belief nets: train, evaluate, denoise, sample.")
    p.add_argument("--version", action="version", version=f"lbn {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model and write a checkpoint plus metric log")
    t.add_argument("--task", choices=("denoise", "toy"), required=True)
    t.add_argument("--config", help="key = value file; flags override it")
    t.add_argument("--seed", type=int)
    t.add_argument("--k", type=int, help="Monte Carlo samples per example")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--data", help="folder of .pgm images (denoise task)")
    t.add_argument("--out", required=True)
    t.add_argument("--record-time", action="store_true",
                   help="add a wall_seconds column to metrics.csv (makes it non-reproducible)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="mean test log-likelihood (and PSNR for denoisers)")
    e.add_argument("--model", required=True)
    e.add_argument("--data", help="pairs.csv (or its folder) for regressors; .pgm folder for denoisers")
    e.add_argument("--k", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--n", type=int, default=2000, help="generated toy examples when --data is absent")
    e.add_argument("--sigma", type=float, nargs="+", default=[25.0])
    e.add_argument("--csv", help="also write results to this CSV file")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("denoise", help="denoise one graymap")
    d.add_argument("--model", required=True)
    d.add_argument("--input", required=True)
    d.add_argument("--sigma", type=float, default=0.0,
                   help="corrupt --input with this noise level first (0: input is already noisy)")
    d.add_argument("--mode", choices=("mean", "map", "sample"), default="mean")
    d.add_argument("--samples", type=int, default=1)
    d.add_argument("--clean", help="clean reference; prints psnr_db per output")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_denoise)

    s = sub.add_parser("sample", help="draw outputs from p(y|x)")
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True, help="image path, or comma-separated x values")
    s.add_argument("--samples", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UserError as exc:
        print(f"lbn: error: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"lbn: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"lbn: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

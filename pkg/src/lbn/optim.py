"""Initialisation, Adam, and the minibatch training loop."""
from __future__ import annotations

import copy
import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import likelihood
from .model import CONV_DEFAULTS, CONV_DESK, LbnModel, build_conv_lbn
from .tensor import NonFiniteError, Rng

logger = logging.getLogger(__name__)

GATING_BIAS_INIT = -2.0
LEARNING_RATE_GRID = (1e-3, 1e-4, 1e-5)


class TrainingDiverged(RuntimeError):
    """Loss or gradients became non-finite."""

    def __init__(self, step, cause=""):
        self.step = step
        super().__init__(f"training diverged at step {step}" + (f": {cause}" if cause else ""))


def glorot_init(shape, rng: Rng) -> np.ndarray:
    """Uniform Glorot/Xavier draw; conv kernels count their spatial size in both fans."""
    shape = tuple(int(s) for s in shape)
    if len(shape) == 2:
        fan_out, fan_in = shape
    elif len(shape) == 4:
        receptive = shape[2] * shape[3]
        fan_out, fan_in = shape[0] * receptive, shape[1] * receptive
    else:
        raise ValueError(f"cannot infer fan-in/fan-out for shape {shape}")
    if fan_in + fan_out == 0 or 0 in shape:
        raise ValueError(f"degenerate weight shape {shape}")
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(shape, -limit, limit)


PRESETS = {
    # scalar input plus a constant feature -> scalar output
    "toy": lambda: LbnModel.dense(2, [32], 1, gating_hidden=2, stochastic_hidden=True),
    # 19x19 grayscale patches, one gated layer, gating with 3 sigmoid layers
    "patches": lambda: LbnModel.dense(361, [1024], 361, gating_hidden=2),
    "denoise-desk": lambda: build_conv_lbn(CONV_DESK),
    "denoise-full": lambda: build_conv_lbn(CONV_DEFAULTS),
}


def init_model(preset, rng: Rng):
    """Glorot weights, gating biases at -2, every other bias at 0.

    ``preset`` is a name from :data:`PRESETS` or an already-built model,
    which is re-initialised in place and returned.
    """
    if isinstance(preset, str):
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        model = PRESETS[preset]()
    else:
        model = preset
    gating_biases = set(model.gating_bias_names())
    for name, p in model.parameters().items():
        if p.ndim >= 2:
            p[...] = glorot_init(p.shape, rng)
        elif name in gating_biases:
            p[...] = GATING_BIAS_INIT
        else:
            p[...] = 0.0
    return model


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params, grads, clip_norm=None):
    """Bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {params[name].shape}")
    if clip_norm is not None:
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > clip_norm:
            grads = {n: g * (clip_norm / norm) for n, g in grads.items()}
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    k: int = 1
    lr: float = 1e-3
    seed: int = 0
    k_eval: int = 100
    max_steps: int | None = None
    max_seconds: float | None = None
    clip_norm: float | None = None

    def __post_init__(self):
        if self.k < 1 or self.k_eval < 1:
            raise ValueError("k and k_eval must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    train_nll: float
    val_metric: float
    wall_seconds: float


class MetricLog(list):
    """Per-epoch training records."""

    def best(self) -> EpochRecord:
        return max(self, key=lambda r: r.val_metric)

    def to_csv(self, include_time=False) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        cols = ["epoch", "train_nll", "val_metric"] + (["wall_seconds"] if include_time else [])
        writer.writerow(cols)
        for r in self:
            row = [r.epoch, repr(float(r.train_nll)), repr(float(r.val_metric))]
            if include_time:
                row.append(f"{r.wall_seconds:.3f}")
            writer.writerow(row)
        return buf.getvalue()


def mean_log_likelihood(model, x, y, k, rng, batch_size=256) -> float:
    """Mean Monte Carlo log-likelihood over a dataset."""
    total = 0.0
    for start in range(0, len(x), batch_size):
        rep, _ = likelihood.mc_log_likelihood(
            model, x[start:start + batch_size], y[start:start + batch_size], k, rng
        )
        total += float(np.sum(rep.log_likelihood))
    return total / len(x)


def train(model, data, config: TrainConfig, val_data=None, val_metric=None):
    """Fit ``model`` by minibatch Adam on the Monte Carlo negative log-likelihood.

    ``data`` and ``val_data`` are ``(inputs, targets)`` pairs. ``val_metric``
    maps a model to a score where higher is better; by default it is the mean
    held-out log-likelihood with ``config.k_eval`` draws from a fixed stream.
    Returns a copy of the best-validation model and the :class:`MetricLog`.
    """
    x, y = data
    if len(x) == 0:
        raise ValueError("training set is empty")
    if val_data is None:
        val_data = data
    if val_metric is None:
        vx, vy = val_data

        def val_metric(m):
            return mean_log_likelihood(m, vx, vy, config.k_eval, Rng(config.seed).split(2))

    root = Rng(config.seed)
    order_rng, gate_rng = root.split(0), root.split(1)
    state = AdamState(lr=config.lr)
    params = model.parameters()
    log = MetricLog()
    best, best_score = None, -np.inf
    step = 0
    start = time.perf_counter()
    n = len(x)
    for epoch in range(1, config.epochs + 1):
        perm = order_rng.permutation(n)
        nll_sum, seen = 0.0, 0
        stop = False
        for lo in range(0, n, config.batch_size):
            idx = perm[lo:lo + config.batch_size]
            xb, yb = x[idx], y[idx]
            try:
                rep, rec = likelihood.mc_log_likelihood(model, xb, yb, config.k, gate_rng)
                grads = likelihood.backward(model, rep, rec, xb, yb)
                adam_step(state, params, grads, config.clip_norm)
            except (NonFiniteError, FloatingPointError) as exc:
                raise TrainingDiverged(step, str(exc)) from exc
            step += 1
            nll_sum += rep.nll * len(idx)
            seen += len(idx)
            if config.max_steps is not None and step >= config.max_steps:
                stop = True
            if config.max_seconds is not None and time.perf_counter() - start > config.max_seconds:
                stop = True
            if stop:
                break
        score = float(val_metric(model))
        if not np.isfinite(score):
            raise TrainingDiverged(step, "validation metric is not finite")
        log.append(EpochRecord(epoch, nll_sum / seen, score, time.perf_counter() - start))
        logger.info("epoch %d train_nll=%.5f val=%.5f", epoch, nll_sum / seen, score)
        if score > best_score:
            best_score = score
            best = copy.deepcopy(model)
        if stop:
            break
    return best, log

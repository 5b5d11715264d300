"""Comparison networks: a deterministic ReLU MLP and a conditional sigmoid belief net.

Both expose the same ``parameters`` / ``forward`` / ``backward`` surface as
:class:`lbn.model.LbnModel`, so they train through the identical likelihood
and optimiser code. The ReLU net is deterministic, so its k=1 mixture loss is
mean squared error plus a constant.
"""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .model import ForwardRecord, GateTrace, affine, resolve_gates
from .tensor import as_tensor, sigmoid


class _Dense:
    # shared bookkeeping for stacks of dense (W, c) layers plus an affine output

    def __init__(self, weights, biases, output_weight, output_bias):
        self.weights = [as_tensor(w) for w in weights]
        self.biases = [as_tensor(b) for b in biases]
        self.output_weight = as_tensor(output_weight)
        self.output_bias = as_tensor(output_bias)
        dims = [w.shape for w in self.weights] + [self.output_weight.shape]
        for (_, n_in), (n_out, _) in zip(dims[1:], dims[:-1]):
            if n_in != n_out:
                raise ValueError("layer sizes do not chain")
        for w, b in zip(self.weights, self.biases):
            if b.shape != (w.shape[0],):
                raise ValueError("bias shape does not match layer width")

    kind = "dense"

    @classmethod
    def zeros(cls, n_in, hidden, n_out):
        sizes = [n_in] + [int(h) for h in np.atleast_1d(hidden)]
        ws = [np.zeros((sizes[i + 1], sizes[i])) for i in range(len(sizes) - 1)]
        bs = [np.zeros(s) for s in sizes[1:]]
        return cls(ws, bs, np.zeros((n_out, sizes[-1])), np.zeros(n_out))

    def config(self) -> dict:
        return {
            "class": type(self).__name__,
            "n_in": self.weights[0].shape[1],
            "hidden": [w.shape[0] for w in self.weights],
            "n_out": self.output_weight.shape[0],
        }

    @classmethod
    def from_config(cls, cfg):
        return cls.zeros(cfg["n_in"], cfg["hidden"], cfg["n_out"])

    def parameters(self):
        params = OrderedDict()
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f"layers.{i}.weight"] = w
            params[f"layers.{i}.bias"] = b
        params["output.weight"] = self.output_weight
        params["output.bias"] = self.output_bias
        return params

    def gating_bias_names(self):
        return []

    def _check_input(self, x):
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.weights[0].shape[1]:
            raise ValueError(
                f"expected input of shape (batch, {self.weights[0].shape[1]}), got {x.shape}"
            )
        return x


class ReluNet(_Dense):
    """``y = V relu(... relu(W1 x + c1) ...) + b``."""

    n_gated_layers = 0
    has_stochastic_hidden = False

    def forward(self, x, mode="sample", rng=None, residuals=None, gates=None):
        u = self._check_input(x)
        record = ForwardRecord("deterministic", [])
        for w, b in zip(self.weights, self.biases):
            z = affine(u, w, b)
            record.cache.append({"u": u, "z": z})
            u = np.maximum(z, 0.0)
        record.output_input = u
        return affine(u, self.output_weight, self.output_bias), record

    def backward(self, record, dout, gating_path=True):
        dout = as_tensor(dout)
        grads = OrderedDict()
        h = record.output_input
        grads["output.weight"] = dout.T @ h
        grads["output.bias"] = dout.sum(axis=0)
        dh = dout @ self.output_weight
        for i in reversed(range(len(self.weights))):
            c = record.cache[i]
            dz = dh * (c["z"] > 0)
            grads[f"layers.{i}.weight"] = dz.T @ c["u"]
            grads[f"layers.{i}.bias"] = dz.sum(axis=0)
            if i > 0:
                dh = dz @ self.weights[i]
        return OrderedDict((n, grads[n]) for n in self.parameters()), None


class CSBN(_Dense):
    """Conditional sigmoid belief net: every hidden layer is binary.

    Layer ``l`` draws ``g_l ~ Bernoulli(sigmoid(W_l g_{l-1} + c_l))`` with
    ``g_0 = x``; the output is affine in the last binary layer, so for fixed
    gates the prediction does not depend on ``x`` at all.
    """

    has_stochastic_hidden = False

    @property
    def n_gated_layers(self):
        return len(self.weights)

    def forward(self, x, mode="sample", rng=None, residuals=None, gates=None):
        u = self._check_input(x)
        if residuals is not None:
            mode = "replay"
        elif gates is not None:
            mode = "pinned"
        record = ForwardRecord(mode, [])
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            rates = sigmoid(affine(u, w, b))
            s = resolve_gates(
                rates, mode, rng,
                residuals=residuals[i].residuals if residuals is not None else None,
                pinned=gates[i] if gates is not None else None,
            )
            record.traces.append(GateTrace(s.rates, s.gates, s.residuals, []))
            record.cache.append({"u": u})
            u = s.gates
        record.output_input = u
        return affine(u, self.output_weight, self.output_bias), record

    def backward(self, record, dout, gating_path=True):
        dout = as_tensor(dout)
        grads = OrderedDict()
        h = record.output_input
        grads["output.weight"] = dout.T @ h
        grads["output.bias"] = dout.sum(axis=0)
        dh = dout @ self.output_weight
        for i in reversed(range(len(self.weights))):
            r = record.traces[i].rates
            dz = dh * r * (1.0 - r)
            u = record.cache[i]["u"]
            grads[f"layers.{i}.weight"] = dz.T @ u
            grads[f"layers.{i}.bias"] = dz.sum(axis=0)
            if i > 0:
                dh = dz @ self.weights[i]
        return OrderedDict((n, grads[n]) for n in self.parameters()), None

    def stage_rates(self, i, u):
        return None, sigmoid(affine(u, self.weights[i], self.biases[i]))

    def stage_apply(self, i, a, g):
        return g

    def output(self, u):
        return affine(u, self.output_weight, self.output_bias)


def relu_forward(weights, x):
    """Deterministic ReLU network output.

    ``weights`` is a sequence of ``(W, c)`` hidden pairs followed by the
    output ``(V, b)`` pair.
    """
    *hidden, (v, b) = weights
    net = ReluNet([w for w, _ in hidden], [c for _, c in hidden], v, b)
    return net.forward(x)[0]


def sbn_forward(weights, x, rng):
    """One stochastic conditional-SBN pass; same ``weights`` layout as :func:`relu_forward`."""
    *hidden, (v, b) = weights
    net = CSBN([w for w, _ in hidden], [c for _, c in hidden], v, b)
    y, rec = net.forward(x, "sample", rng)
    return y, rec.traces


BASELINES = {"relu": ReluNet, "csbn": CSBN}


def train_baseline(kind, config, data, hidden=(32,), val_data=None, val_metric=None):
    """Build, initialise and train a baseline through the shared training loop.

    ``kind`` is ``"relu"`` or ``"csbn"``; ``config`` is an
    :class:`lbn.optim.TrainConfig`. The ReLU net always trains with one draw
    (its loss is then mean squared error plus a constant) while the C-SBN uses
    ``config.k`` draws exactly like an LBN. Returns ``(model, metric_log)``.
    """
    from dataclasses import replace

    from .optim import init_model, train
    from .tensor import Rng

    if kind not in BASELINES:
        raise ValueError(f"unknown baseline {kind!r}; choose from {sorted(BASELINES)}")
    x, y = data
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or len(x) != len(y):
        raise ValueError("data must be a pair of 2-D arrays with matching rows")
    if kind == "relu":
        config = replace(config, k=1, k_eval=1)
    model = init_model(BASELINES[kind].zeros(x.shape[1], hidden, y.shape[1]),
                       Rng(config.seed).split(3))
    return train(model, (x, y), config, val_data=val_data, val_metric=val_metric)

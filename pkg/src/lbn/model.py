"""Linearizing belief nets: gated linear blocks with sigmoid gating networks.

A block computes ``a = W u`` (a dense product or a same-padded convolution),
asks its gating network for Bernoulli rates ``r = gate(a)``, draws binary
gates ``g`` and emits ``g * a``. The gating network reads the block's own
linear activations, so in a deep stack the second gating network sees
``V (g1 * W x)``. The output map is affine.

Every gate is stored as ``rate + residual``. Replaying a pass with the same
residuals while the rates are recomputed gives the frozen-noise surrogate
whose gradient is what :meth:`LbnModel.backward` returns.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    Rng,
    as_tensor,
    conv2d,
    conv2d_input_grad,
    conv2d_kernel_grad,
    im2col,
    matmul,
    sigmoid,
)

MODES = ("sample", "mean", "map", "replay", "pinned")


@dataclass
class GateSample:
    """Rates, realised gates and residuals (``gates = rates + residuals``) of one layer."""

    rates: np.ndarray
    gates: np.ndarray
    residuals: np.ndarray


@dataclass
class GateTrace(GateSample):
    """Gate record of one block; ``hidden`` holds the stochastic gating-hidden layers."""

    hidden: list = field(default_factory=list)


@dataclass
class ForwardRecord:
    """Result of one forward pass: public gate traces plus the activations backward needs."""

    mode: str
    traces: list
    cache: list = field(repr=False, default_factory=list)
    output_input: np.ndarray | None = field(repr=False, default=None)


def resolve_gates(rates, mode, rng=None, residuals=None, pinned=None) -> GateSample:
    """Turn rates into gates according to ``mode``.

    ``map`` thresholds at 0.5 with ties going to 1. ``replay`` adds stored
    residuals to freshly computed rates; ``pinned`` takes the gate values as
    given.
    """
    if mode == "sample":
        if rng is None:
            raise ValueError("sampling gates needs an rng")
        gates = rng.bernoulli(rates)
        return GateSample(rates, gates, gates - rates)
    if mode == "mean":
        return GateSample(rates, rates, np.zeros_like(rates))
    if mode == "map":
        gates = (rates >= 0.5).astype(np.float64)
        return GateSample(rates, gates, gates - rates)
    if mode == "replay":
        if residuals is None or residuals.shape != rates.shape:
            raise ValueError("replay residuals missing or mis-shaped")
        return GateSample(rates, rates + residuals, residuals)
    if mode == "pinned":
        gates = np.broadcast_to(np.asarray(pinned, dtype=np.float64), rates.shape).copy()
        return GateSample(rates, gates, gates - rates)
    raise ValueError(f"unknown gate mode {mode!r}")


# --------------------------------------------------------------------------
# shared affine helpers: 2-D weights act as dense maps on (batch, features),
# 4-D weights as same-padded convolutions on (batch, channels, h, w).


def affine(u, weight, bias=None, cache=None):
    """Dense or same-padded conv affine map; stores conv columns in ``cache`` if given."""
    if weight.ndim == 2:
        out = matmul(u, weight.T)
        if bias is not None:
            out += bias
    else:
        cols, _ = im2col(u, weight.shape[2:], "same")
        if cache is not None:
            cache.append(cols)
        out = conv2d(u, weight, "same", cols=cols)
        if bias is not None:
            out += bias[:, None, None]
    return out


def affine_weight_grads(u, weight, douts, cols=None):
    if weight.ndim == 2:
        return [d.T @ u for d in douts]
    return conv2d_kernel_grad(u, douts, weight.shape, "same", cols=cols)


def affine_input_grad(dout, weight, input_shape):
    if weight.ndim == 2:
        return dout @ weight
    return conv2d_input_grad(dout, weight, input_shape[2:], "same")


def bias_grad(dout):
    if dout.ndim == 2:
        return dout.sum(axis=0)
    return dout.sum(axis=(0, 2, 3))


# --------------------------------------------------------------------------


@dataclass
class GatingNetwork:
    """Sigmoid network mapping a block's linear activations to gate rates.

    ``stochastic_hidden[j]`` marks hidden layer ``j`` as Bernoulli-sampled.
    """

    weights: list
    biases: list
    stochastic_hidden: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("gating network needs matching, non-empty weight/bias lists")
        n_hidden = len(self.weights) - 1
        if not self.stochastic_hidden:
            self.stochastic_hidden = [False] * n_hidden
        if len(self.stochastic_hidden) != n_hidden:
            raise ValueError("stochastic_hidden needs one flag per hidden layer")

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def any_stochastic(self) -> bool:
        return any(self.stochastic_hidden)


@dataclass
class LinearizingBlock:
    weight: np.ndarray
    gating: GatingNetwork

    def __post_init__(self):
        if self.gating.n_in != self.weight.shape[0] or self.gating.n_out != self.weight.shape[0]:
            raise ValueError(
                f"gating network must read and gate the block's {self.weight.shape[0]} linear units"
            )

    @property
    def kind(self) -> str:
        return "dense" if self.weight.ndim == 2 else "conv"


def _run_gating(net: GatingNetwork, linear_act, mode, rng=None, hidden_residuals=None):
    # returns (rates, hidden samples or None per hidden layer, layer inputs, hidden rates)
    if net.any_stochastic and mode == "sample" and rng is None:
        raise ValueError("gating network has stochastic hidden layers but no rng was given")
    s = linear_act
    inputs, samples, hidden_rates, cols = [], [], [], []
    last = len(net.weights) - 1
    for j, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(s)
        store = []
        rates = sigmoid(affine(s, w, b, cache=store))
        cols.append(store[0] if store else None)
        if j == last:
            return rates, samples, (inputs, cols), hidden_rates
        hidden_rates.append(rates)
        if net.stochastic_hidden[j] and mode in ("sample", "replay", "map"):
            eps = hidden_residuals[j].residuals if mode == "replay" else None
            sample = resolve_gates(rates, mode, rng, residuals=eps)
            s = sample.gates
        else:
            sample = None
            s = rates
        samples.append(sample)


def gating_rates(block: LinearizingBlock, linear_act, rng=None, trace=None, mode="sample"):
    """Rates of ``block``'s gates given its linear activations.

    Hidden layers flagged stochastic are Bernoulli-sampled before feeding the
    next layer (thresholded in ``map`` mode, left at their rates in ``mean``
    mode). When ``trace`` is a list, one entry per hidden layer is appended:
    a :class:`GateSample` for stochastic layers, None otherwise.
    """
    rates, samples, _, _ = _run_gating(block.gating, as_tensor(linear_act), mode, rng)
    if trace is not None:
        trace.extend(samples)
    return rates


class LbnModel:
    """Stack of linearizing blocks followed by an affine output map."""

    def __init__(self, blocks, output_weight, output_bias):
        if not blocks:
            raise ValueError("an LBN needs at least one block")
        self.blocks = list(blocks)
        self.output_weight = as_tensor(output_weight)
        self.output_bias = as_tensor(output_bias)
        kinds = {b.kind for b in self.blocks}
        if len(kinds) != 1:
            raise ValueError("cannot mix dense and conv blocks")
        self.kind = kinds.pop()
        prev = None
        for b in self.blocks:
            if prev is not None and b.weight.shape[1] != prev:
                raise ValueError("block input size does not match previous block output")
            prev = b.weight.shape[0]
        if self.output_weight.shape[1] != prev:
            raise ValueError("output map does not match last block")
        if self.output_bias.shape != (self.output_weight.shape[0],):
            raise ValueError("output bias must have one entry per output unit/channel")

    # -- construction --------------------------------------------------

    @classmethod
    def dense(cls, n_in, hidden, n_out, gating_hidden=2, gating_width=None,
              stochastic_hidden=False):
        """Zero-initialised dense LBN.

        ``hidden`` lists the gated layer widths; each gating network has
        ``gating_hidden`` hidden sigmoid layers of width ``gating_width``
        (default: the block width).
        """
        hidden = [int(h) for h in np.atleast_1d(hidden)]
        blocks = []
        prev = n_in
        for h in hidden:
            width = gating_width or h
            dims = [h] + [width] * gating_hidden + [h]
            weights = [np.zeros((dims[i + 1], dims[i])) for i in range(len(dims) - 1)]
            biases = [np.zeros(d) for d in dims[1:]]
            blocks.append(LinearizingBlock(
                np.zeros((h, prev)),
                GatingNetwork(weights, biases, [bool(stochastic_hidden)] * gating_hidden),
            ))
            prev = h
        return cls(blocks, np.zeros((n_out, prev)), np.zeros(n_out))

    @classmethod
    def conv(cls, in_channels=1, channels=16, kernel_size=5, n_blocks=2, gating_layers=3,
             gating_kernel_size=1, gating_channels=None, out_channels=1, output_kernel_size=None,
             stochastic_hidden=False):
        """Zero-initialised convolutional LBN (same padding, no pooling)."""
        for name, k in (("kernel_size", kernel_size), ("gating_kernel_size", gating_kernel_size)):
            if k < 1 or k % 2 == 0:
                raise ValueError(f"{name} must be a positive odd integer, got {k}")
        if n_blocks < 1 or gating_layers < 1 or channels < 1:
            raise ValueError("n_blocks, gating_layers and channels must be positive")
        gating_channels = gating_channels or channels
        output_kernel_size = output_kernel_size or kernel_size
        blocks = []
        prev = in_channels
        for _ in range(n_blocks):
            chans = [channels] + [gating_channels] * (gating_layers - 1) + [channels]
            weights, biases = [], []
            for j in range(gating_layers):
                ks = kernel_size if j == 0 else gating_kernel_size
                weights.append(np.zeros((chans[j + 1], chans[j], ks, ks)))
                biases.append(np.zeros(chans[j + 1]))
            blocks.append(LinearizingBlock(
                np.zeros((channels, prev, kernel_size, kernel_size)),
                GatingNetwork(weights, biases, [bool(stochastic_hidden)] * (gating_layers - 1)),
            ))
            prev = channels
        out_w = np.zeros((out_channels, prev, output_kernel_size, output_kernel_size))
        return cls(blocks, out_w, np.zeros(out_channels))

    def config(self) -> dict:
        """JSON-friendly architecture description (shapes and flags, no values)."""
        return {
            "class": "LbnModel",
            "blocks": [
                {
                    "weight": list(b.weight.shape),
                    "gating": [list(w.shape) for w in b.gating.weights],
                    "stochastic_hidden": list(b.gating.stochastic_hidden),
                }
                for b in self.blocks
            ],
            "output_weight": list(self.output_weight.shape),
        }

    @classmethod
    def from_config(cls, cfg):
        blocks = []
        for b in cfg["blocks"]:
            ws = [np.zeros(s) for s in b["gating"]]
            bs = [np.zeros(s[0]) for s in b["gating"]]
            blocks.append(LinearizingBlock(np.zeros(b["weight"]),
                                           GatingNetwork(ws, bs, list(b["stochastic_hidden"]))))
        ow = np.zeros(cfg["output_weight"])
        return cls(blocks, ow, np.zeros(ow.shape[0]))

    def parameters(self) -> "OrderedDict[str, np.ndarray]":
        """Named parameter arrays (live references) in a fixed order."""
        params = OrderedDict()
        for i, b in enumerate(self.blocks):
            params[f"blocks.{i}.weight"] = b.weight
            for j, (w, bias) in enumerate(zip(b.gating.weights, b.gating.biases)):
                params[f"blocks.{i}.gating.{j}.weight"] = w
                params[f"blocks.{i}.gating.{j}.bias"] = bias
        params["output.weight"] = self.output_weight
        params["output.bias"] = self.output_bias
        return params

    def gating_bias_names(self) -> list[str]:
        return [n for n in self.parameters() if ".gating." in n and n.endswith(".bias")]

    @property
    def n_gated_layers(self) -> int:
        return len(self.blocks)

    @property
    def has_stochastic_hidden(self) -> bool:
        return any(b.gating.any_stochastic for b in self.blocks)

    # -- forward -------------------------------------------------------

    def _check_input(self, x):
        x = as_tensor(x)
        w = self.blocks[0].weight
        if self.kind == "dense":
            if x.ndim != 2 or x.shape[1] != w.shape[1]:
                raise ValueError(f"expected input of shape (batch, {w.shape[1]}), got {x.shape}")
        elif x.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ValueError(f"expected input of shape (batch, {w.shape[1]}, h, w), got {x.shape}")
        return x

    def forward(self, x, mode="sample", rng=None, residuals=None, gates=None):
        """Run the network; returns ``(output, ForwardRecord)``.

        ``residuals`` (a list of :class:`GateTrace`, e.g. from an earlier
        pass) switches to replay mode. ``gates`` (one array or scalar per
        block) pins the block gates; gating hiddens then run deterministically.
        """
        x = self._check_input(x)
        if residuals is not None:
            mode = "replay"
            if len(residuals) != len(self.blocks):
                raise ValueError("need one trace per block to replay")
        elif gates is not None:
            mode = "pinned"
            if len(gates) != len(self.blocks):
                raise ValueError("need one gate array per block")
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        hidden_mode = "mean" if mode == "pinned" else mode
        record = ForwardRecord(mode, [])
        u = x
        for i, block in enumerate(self.blocks):
            u_cols = []
            a = affine(u, block.weight, cache=u_cols)
            old = residuals[i] if residuals is not None else None
            rates, hidden, inputs, hidden_rates = _run_gating(
                block.gating, a, hidden_mode, rng,
                hidden_residuals=old.hidden if old is not None else None,
            )
            out = resolve_gates(
                rates, mode, rng,
                residuals=old.residuals if old is not None else None,
                pinned=gates[i] if gates is not None else None,
            )
            record.traces.append(GateTrace(out.rates, out.gates, out.residuals, hidden))
            record.cache.append({
                "u": u,
                "u_cols": u_cols[0] if u_cols else None,
                "a": a,
                "inputs": inputs[0],
                "cols": inputs[1],
                "hidden_rates": hidden_rates,
            })
            u = out.gates * a
        record.output_input = u
        out_cols = []
        y = affine(u, self.output_weight, self.output_bias, cache=out_cols)
        record.cache.append({"cols": out_cols[0] if out_cols else None})
        return y, record

    # -- backward ------------------------------------------------------

    def backward(self, record: ForwardRecord, dout, gating_path=True):
        """Surrogate gradients for every parameter given d(loss)/d(output).

        Each gate is differentiated as ``rate + residual`` with the residual
        held fixed. Returns ``(grads, paths)`` where ``paths[i]`` is the pair
        (multiplicative, gating) of terms summing to block ``i``'s weight
        gradient.
        """
        dout = as_tensor(dout)
        if (len(record.traces) != len(self.blocks) or record.output_input is None
                or len(record.cache) != len(self.blocks) + 1):
            raise ValueError("forward record does not belong to this model")
        grads = OrderedDict()
        h = record.output_input
        (grads["output.weight"],) = affine_weight_grads(
            h, self.output_weight, [dout], cols=record.cache[-1]["cols"])
        grads["output.bias"] = bias_grad(dout)
        dh = affine_input_grad(dout, self.output_weight, h.shape)
        paths = [None] * len(self.blocks)
        for i in reversed(range(len(self.blocks))):
            block, trace, cache = self.blocks[i], record.traces[i], record.cache[i]
            u, a = cache["u"], cache["a"]
            da_mult = dh * trace.gates
            net = block.gating
            if gating_path:
                r = trace.rates
                dz = dh * a * r * (1.0 - r)
                for j in reversed(range(len(net.weights))):
                    s_in = cache["inputs"][j]
                    w = net.weights[j]
                    (grads[f"blocks.{i}.gating.{j}.weight"],) = affine_weight_grads(
                        s_in, w, [dz], cols=cache["cols"][j])
                    grads[f"blocks.{i}.gating.{j}.bias"] = bias_grad(dz)
                    ds = affine_input_grad(dz, w, s_in.shape)
                    if j > 0:
                        rh = cache["hidden_rates"][j - 1]
                        dz = ds * rh * (1.0 - rh)
                    else:
                        da_gate = ds
            else:
                for j, (w, b) in enumerate(zip(net.weights, net.biases)):
                    grads[f"blocks.{i}.gating.{j}.weight"] = np.zeros_like(w)
                    grads[f"blocks.{i}.gating.{j}.bias"] = np.zeros_like(b)
                da_gate = np.zeros_like(a)
            g_mult, g_gate = affine_weight_grads(u, block.weight, [da_mult, da_gate],
                                                 cols=cache["u_cols"])
            grads[f"blocks.{i}.weight"] = g_mult + g_gate
            paths[i] = (g_mult, g_gate)
            if i > 0:
                dh = affine_input_grad(da_mult + da_gate, block.weight, u.shape)
        ordered = OrderedDict((name, grads[name]) for name in self.parameters())
        return ordered, paths

    # -- stage view used by exact enumeration ----------------------------

    def stage_rates(self, i, u):
        a = affine(u, self.blocks[i].weight)
        if self.blocks[i].gating.any_stochastic:
            raise ValueError("exact enumeration needs deterministic gating hiddens")
        return a, _run_gating(self.blocks[i].gating, a, "mean")[0]

    def stage_apply(self, i, a, g):
        return g * a

    def output(self, u):
        return affine(u, self.output_weight, self.output_bias)


# --------------------------------------------------------------------------
# public entry points


def forward_sample(model, x, rng: Rng):
    """One stochastic pass; returns ``(y_hat, traces)``."""
    y, rec = model.forward(x, "sample", rng)
    return y, rec.traces


def forward_mean(model, x):
    """Exact conditional mean, available for single-gated-layer models only."""
    if model.n_gated_layers != 1:
        raise ValueError(
            "exact mean prediction needs exactly one gated layer; draw samples instead"
        )
    return model.forward(x, "mean")[0]


def forward_map(model, x):
    """Deterministic pass with every gate thresholded at 0.5 (ties open)."""
    return model.forward(x, "map")[0]


def build_conv_lbn(config=None, **overrides) -> LbnModel:
    """Convolutional LBN from a config mapping; defaults follow the full-size setup."""
    cfg = dict(CONV_DEFAULTS)
    cfg.update(config or {})
    cfg.update(overrides)
    unknown = set(cfg) - set(CONV_DEFAULTS)
    if unknown:
        raise ValueError(f"unknown conv config keys: {sorted(unknown)}")
    return LbnModel.conv(**cfg)


CONV_DEFAULTS = {
    "in_channels": 1,
    "channels": 128,
    "kernel_size": 9,
    "n_blocks": 4,
    "gating_layers": 3,
    "gating_kernel_size": 1,
    "gating_channels": None,
    "out_channels": 1,
    "output_kernel_size": None,
    "stochastic_hidden": False,
}

CONV_DESK = dict(CONV_DEFAULTS, channels=16, kernel_size=5, n_blocks=2)

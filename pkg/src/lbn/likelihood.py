"""Monte Carlo mixture-of-Gaussians likelihood and its gradient.

For an input ``x`` the model defines ``p(y|x) = E_g N(y; f(x, g), I)``. With
``k`` gate draws the estimate is

    log p(y|x) ~= -M/2 log(2 pi) + logsumexp_i(-d_i / 2) - log k,
    d_i = ||f(x, g_i) - y||^2,

and its gradient weights each draw's squared-error gradient by
``softmax(-d / 2)``. Gates are differentiated through their rates with the
sampled residuals held fixed.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .tensor import as_tensor, check_finite, logsumexp

LOG_2PI = float(np.log(2.0 * np.pi))
MAX_ENUMERATED_GATES = 20


@dataclass
class MixtureLossReport:
    """Per-example Monte Carlo quantities for a batch of ``B`` examples and ``k`` draws."""

    k: int
    sq_dist: np.ndarray          # (B, k)
    weights: np.ndarray          # (B, k), rows sum to 1
    log_likelihood: np.ndarray   # (B,)
    n_outputs: int
    outputs: np.ndarray = field(repr=False, default=None)  # (B*k, ...) example-major

    @property
    def nll(self) -> float:
        """Mean negative log-likelihood over the batch."""
        return float(-np.mean(self.log_likelihood))


def _flat(a, batch):
    return a.reshape(batch, -1)


def mixture_report(outputs, y, k) -> MixtureLossReport:
    """Build the report from ``B*k`` outputs (example-major) and ``B`` targets."""
    y = as_tensor(y)
    batch = y.shape[0]
    if outputs.shape[0] != batch * k:
        raise ValueError(f"expected {batch * k} outputs for {batch} targets and k={k}")
    diff = _flat(outputs, batch * k).reshape(batch, k, -1) - _flat(y, batch)[:, None, :]
    m = diff.shape[2]
    d = np.einsum("bkm,bkm->bk", diff, diff)
    lse = logsumexp(-0.5 * d, axis=1)
    ll = check_finite(-0.5 * m * LOG_2PI + lse - np.log(k), "log-likelihood")
    weights = np.exp(-0.5 * d - lse[:, None])
    return MixtureLossReport(k, d, weights, ll, m, outputs)


def mc_log_likelihood(model, x, y, k, rng):
    """Draw ``k`` gate configurations per example and score ``y``.

    Returns ``(report, record)``; the record is the forward pass over the
    example-major repeated batch and feeds :func:`backward`.
    """
    if k < 1:
        raise ValueError(f"need at least one Monte Carlo sample, got k={k}")
    x = as_tensor(x)
    xr = np.repeat(x, k, axis=0) if k > 1 else x
    out, record = model.forward(xr, "sample", rng)
    return mixture_report(out, y, k), record


def _output_grad(report, y):
    y = as_tensor(y)
    batch = y.shape[0]
    if report.outputs is None or report.outputs.shape[0] != batch * report.k:
        raise ValueError("report does not match the targets")
    diff = _flat(report.outputs, batch * report.k).reshape(batch, report.k, -1)
    diff = diff - _flat(y, batch)[:, None, :]
    dout = report.weights[:, :, None] * diff / batch
    return dout.reshape(report.outputs.shape)


def backward(model, report, record, x, y, gating_path=True):
    """Gradients of the batch-mean negative log-likelihood, keyed by parameter name."""
    if len(record.traces) != model.n_gated_layers:
        raise ValueError("traces do not match the model")
    rows = as_tensor(x).shape[0] * report.k
    for t in record.traces:
        if t.rates.shape[0] != rows:
            raise ValueError("traces do not match the report")
    grads, _ = model.backward(record, _output_grad(report, y), gating_path=gating_path)
    return grads


def decompose_gradient(model, report, record, x, y, gating_path=True):
    """Per-block ``(multiplicative_path, gating_path)`` terms of each linear weight gradient.

    The two terms add up (bitwise) to the weight gradient :func:`backward`
    reports. The multiplicative term flows through ``g * a`` with the
    sampled gate; the gating term flows through the rates.
    """
    grads, paths = model.backward(record, _output_grad(report, y), gating_path=gating_path)
    if paths is None:
        raise ValueError(f"{type(model).__name__} has no gated linear weights")
    return paths


def surrogate_nll(model, x, y, record, k):
    """Batch-mean NLL with the gate residuals of ``record`` held fixed.

    Rates are recomputed from the current parameters, so this is the
    deterministic function whose exact gradient :func:`backward` returns.
    """
    xr = np.repeat(as_tensor(x), k, axis=0) if k > 1 else as_tensor(x)
    out, _ = model.forward(xr, residuals=record.traces)
    return mixture_report(out, y, k).nll


def _enumerate(model, x):
    # joint enumeration of every gate configuration: (log masses, outputs)
    u = as_tensor(x)[None]
    logw = np.zeros(1)
    total = 0
    for i in range(model.n_gated_layers):
        a, rates = model.stage_rates(i, u)
        n_gates = rates[0].size
        total += n_gates
        if total > MAX_ENUMERATED_GATES:
            raise ValueError(
                f"exact enumeration limited to {MAX_ENUMERATED_GATES} gates in total"
            )
        configs = np.array(list(itertools.product((0.0, 1.0), repeat=n_gates)))
        configs = configs.reshape((-1,) + rates.shape[1:])
        n_conf = configs.shape[0]
        flat_r = rates.reshape(rates.shape[0], -1)
        flat_c = configs.reshape(n_conf, -1)
        with np.errstate(divide="ignore"):
            log_r, log_1mr = np.log(flat_r), np.log1p(-flat_r)
        # 0 * -inf must count as 0
        mass = (np.where(flat_c[None] == 1.0, log_r[:, None], 0.0)
                + np.where(flat_c[None] == 0.0, log_1mr[:, None], 0.0)).sum(axis=2)
        logw = (logw[:, None] + mass).reshape(-1)
        g = np.broadcast_to(configs[None], (rates.shape[0],) + configs.shape)
        g = g.reshape((-1,) + rates.shape[1:])
        u_rep = np.repeat(u, n_conf, axis=0)
        a_rep = np.repeat(a, n_conf, axis=0) if a is not None else None
        u = model.stage_apply(i, a_rep if a_rep is not None else u_rep, g)
    return logw, model.output(u)


def exact_log_likelihood(model, x, y) -> float:
    """``log p(y|x)`` by summing over every gate configuration (single example).

    Requires deterministic gating hiddens and at most 20 gates in total.
    """
    if model.has_stochastic_hidden:
        raise ValueError("exact enumeration needs deterministic gating hiddens")
    logw, out = _enumerate(model, x)
    diff = out.reshape(out.shape[0], -1) - as_tensor(y).reshape(1, -1)
    m = diff.shape[1]
    log_gauss = -0.5 * m * LOG_2PI - 0.5 * np.einsum("cm,cm->c", diff, diff)
    return float(logsumexp(logw + log_gauss))


def exact_mean(model, x) -> np.ndarray:
    """``E_g f(x, g)`` by enumeration (single example)."""
    if model.has_stochastic_hidden:
        raise ValueError("exact enumeration needs deterministic gating hiddens")
    logw, out = _enumerate(model, x)
    w = np.exp(logw)
    return np.tensordot(w, out, axes=(0, 0))

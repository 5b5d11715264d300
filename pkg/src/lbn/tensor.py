"""Dense float64 array primitives.

Arrays are plain ``numpy.ndarray`` objects with dtype float64 in C order.
The helpers here add the shape checks and finiteness guarantees the rest of
the package relies on: any public op that would produce NaN or Inf raises
:class:`NonFiniteError` instead of returning it.

Convolution is cross-correlation (no kernel flip) with zero padding.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "NonFiniteError",
    "Rng",
    "as_tensor",
    "check_finite",
    "conv2d",
    "conv2d_backward",
    "conv2d_input_grad",
    "conv2d_kernel_grad",
    "ewise",
    "im2col",
    "logsumexp",
    "matmul",
    "sigmoid",
]


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def as_tensor(data) -> np.ndarray:
    """Copy-free float64 C-contiguous view of ``data`` when possible."""
    return np.ascontiguousarray(data, dtype=np.float64)


def check_finite(arr: np.ndarray, what: str = "result") -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return arr


def matmul(a, b) -> np.ndarray:
    """Matrix product of ``a`` (m, k) and ``b`` (k, n).

    Leading batch dimensions on ``a`` are allowed; ``b`` must be 2-D.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    with np.errstate(invalid="ignore", over="ignore"):
        out = a @ b
    return check_finite(out, "matmul")


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}
_UNARY = {
    "sigmoid": sigmoid,
    "exp": np.exp,
    "log": np.log,
}


def ewise(op: str, a, b=None) -> np.ndarray:
    """Elementwise ``op`` on equal-shape operands (a scalar may stand in for either).

    Supported ops: add, sub, mul (binary) and sigmoid, exp, log (unary).
    """
    a = np.asarray(a, dtype=np.float64)
    if op in _BINARY:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        b = np.asarray(b, dtype=np.float64)
        if a.ndim and b.ndim and a.shape != b.shape:
            raise ValueError(f"{op} shape mismatch: {a.shape} vs {b.shape}")
        out = _BINARY[op](a, b)
    elif op in _UNARY:
        if b is not None:
            raise ValueError(f"{op} is unary")
        if op == "log" and (a <= 0).any():
            raise ValueError("log of nonpositive value")
        with np.errstate(over="ignore"):
            out = _UNARY[op](a)
    else:
        raise ValueError(f"unknown elementwise op {op!r}")
    return check_finite(np.asarray(out, dtype=np.float64), op)


def logsumexp(values, axis=-1) -> np.ndarray:
    """Stable ``log(sum(exp(values)))`` along ``axis``.

    ``-inf`` entries are allowed and contribute nothing; an all ``-inf`` slice
    yields ``-inf``.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0 or v.shape[axis] == 0:
        raise ValueError("logsumexp of empty input")
    if np.isnan(v).any() or np.isposinf(v).any():
        raise NonFiniteError("logsumexp input contains NaN or +inf")
    m = np.max(v, axis=axis, keepdims=True)
    shift = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(v - shift), axis=axis, keepdims=True)) + shift
    return np.squeeze(out, axis=axis)


# --------------------------------------------------------------------------
# convolution


def _pad_amount(kh: int, kw: int, padding: str) -> tuple[int, int]:
    if padding == "valid":
        return 0, 0
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"'same' padding needs odd kernel sizes, got {kh}x{kw}")
        return kh // 2, kw // 2
    raise ValueError(f"unknown padding {padding!r}")


def _columns(x: np.ndarray, kh: int, kw: int, ph: int, pw: int):
    # (n, c, h, w) -> (n*oh*ow, c*kh*kw)
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # n, c, oh, ow, kh, kw
    n, c, oh, ow = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return cols, (oh, ow)


def im2col(x, kernel_hw, padding: str = "same"):
    """Patch matrix of batched ``x`` for a ``kernel_hw`` correlation.

    Returns ``(cols, (oh, ow))`` with ``cols`` of shape (n*oh*ow, c*kh*kw).
    """
    kh, kw = kernel_hw
    ph, pw = _pad_amount(kh, kw, padding)
    x = as_tensor(x)
    if kh == kw == 1:
        n, c, h, w = x.shape
        return x.transpose(0, 2, 3, 1).reshape(n * h * w, c), (h, w)
    return _columns(x, kh, kw, ph, pw)


def conv2d(x, kernels, padding: str = "same", cols=None) -> np.ndarray:
    """2-D cross-correlation.

    ``x`` is (c_in, h, w) or batched (n, c_in, h, w); ``kernels`` is
    (c_out, c_in, kh, kw). Returns (c_out, h', w') or (n, c_out, h', w').
    ``cols`` may carry a precomputed :func:`im2col` of ``x``.
    """
    x = as_tensor(x)
    k = as_tensor(kernels)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or k.ndim != 4 or x.shape[1] != k.shape[1]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, kernels {k.shape}")
    c_out, _, kh, kw = k.shape
    ph, pw = _pad_amount(kh, kw, padding)
    if x.shape[2] + 2 * ph < kh or x.shape[3] + 2 * pw < kw:
        raise ValueError(f"kernel {kh}x{kw} larger than input {x.shape[2:]}")
    n = x.shape[0]
    if cols is None:
        cols, (oh, ow) = im2col(x, (kh, kw), padding)
    else:
        oh, ow = x.shape[2] + 2 * ph - kh + 1, x.shape[3] + 2 * pw - kw + 1
    out = cols @ k.reshape(c_out, -1).T
    out = np.ascontiguousarray(out.reshape(n, oh, ow, c_out).transpose(0, 3, 1, 2))
    check_finite(out, "conv2d")
    return out[0] if single else out


def conv2d_kernel_grad(x, grad_outs, kernel_shape, padding: str = "same",
                       cols=None) -> list[np.ndarray]:
    """Kernel gradients of :func:`conv2d` for one or more output gradients.

    The input columns are built once (or taken from ``cols``) and shared, so
    decomposing a gradient into several additive terms costs one extra GEMM
    per term.
    """
    c_out, _, kh, kw = kernel_shape
    if cols is None:
        cols, _ = im2col(x, (kh, kw), padding)
    grads = []
    for g in grad_outs:
        g = as_tensor(g)
        if g.shape[1] != c_out or g.shape[0] * g.shape[2] * g.shape[3] != cols.shape[0]:
            raise ValueError(f"grad_out shape {g.shape} does not match conv output")
        gcols = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        grads.append((gcols.T @ cols).reshape(kernel_shape))
    return grads


def conv2d_input_grad(grad_out, kernels, input_hw, padding: str = "same") -> np.ndarray:
    """Input gradient of batched :func:`conv2d` (adjoint of the cross-correlation).

    Computed as a correlation of the padded output gradient with the
    spatially flipped, channel-transposed kernel bank.
    """
    g = as_tensor(grad_out)
    k = as_tensor(kernels)
    _, _, kh, kw = k.shape
    ph, pw = _pad_amount(kh, kw, padding)
    h, w = input_hw
    flipped = np.ascontiguousarray(k[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    if kh == kw == 1:
        n, c, gh, gw = g.shape
        cols, (oh, ow) = g.transpose(0, 2, 3, 1).reshape(n * gh * gw, c), (gh, gw)
    else:
        cols, (oh, ow) = _columns(g, kh, kw, kh - 1 - ph, kw - 1 - pw)
    if (oh, ow) != (h, w):
        raise ValueError(f"grad_out shape {g.shape} does not match input size {input_hw}")
    out = cols @ flipped.reshape(flipped.shape[0], -1).T
    return np.ascontiguousarray(out.reshape(g.shape[0], h, w, -1).transpose(0, 3, 1, 2))


def conv2d_backward(x, kernels, grad_out, padding: str = "same"):
    """``(grad_input, grad_kernels)`` for batched :func:`conv2d`."""
    x = as_tensor(x)
    k = as_tensor(kernels)
    (grad_k,) = conv2d_kernel_grad(x, [grad_out], k.shape, padding)
    return conv2d_input_grad(grad_out, k, x.shape[2:], padding), grad_k


# --------------------------------------------------------------------------
# random numbers


class Rng:
    """Seeded random stream backed by numpy's PCG64 generator.

    Uniforms come from PCG64 doubles and normals from numpy's ziggurat
    sampler; both are fixed functions of the seed for a given numpy release.
    Sub-streams for parallel work are derived with :meth:`split`.
    """

    def __init__(self, seed: int = 0, stream: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        self.seed = int(seed)
        self.stream = tuple(stream)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.stream))
        )

    def split(self, stream_id: int) -> "Rng":
        """Independent child stream identified by (seed, stream path, stream_id)."""
        return Rng(self.seed, self.stream + (int(stream_id),))

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        if std < 0:
            raise ValueError("normal std must be >= 0")
        return mean + std * self._gen.standard_normal(size=shape)

    def bernoulli(self, rates) -> np.ndarray:
        """0.0/1.0 draws with the given rates (u < p, u uniform on [0, 1))."""
        p = np.asarray(rates, dtype=np.float64)
        if np.isnan(p).any() or (p < 0).any() or (p > 1).any():
            raise ValueError("Bernoulli rates must lie in [0, 1]")
        return (self._gen.random(size=p.shape) < p).astype(np.float64)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

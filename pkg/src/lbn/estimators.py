"""scikit-learn style estimators wrapping the networks and the training loop.

Regressors (:class:`LBNRegressor`, :class:`ReLURegressor`,
:class:`CSBNRegressor`) take 2-D inputs and 1-D or 2-D targets. Their
``score`` is the mean held-out log-likelihood (nats per example), as for
density estimators, not R^2.

Each output is modelled as Gaussian with a fixed standard deviation
``target_scale``: targets are divided by it before training, which keeps
the unit-variance mixture components of the networks. Log-likelihoods are
reported in the original target units.

The networks' linear paths carry no bias, so the dense regressors append a
constant input feature when ``fit_intercept`` is set.
"""
from __future__ import annotations

import warnings

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .baselines import CSBN, ReluNet
from .denoise import deprocess, preprocess, psnr
from .model import LbnModel
from .optim import TrainConfig, init_model, mean_log_likelihood, train
from .tensor import Rng

MODEL_CLASSES = {"LbnModel": LbnModel, "ReluNet": ReluNet, "CSBN": CSBN}


def _rng(random_state, default_seed):
    if isinstance(random_state, Rng):
        return random_state
    return Rng(default_seed if random_state is None else int(random_state))


def _split(n, fraction, rng):
    if fraction <= 0:
        idx = np.arange(n)
        return idx, idx
    n_val = max(1, int(round(n * fraction)))
    if n_val >= n:
        raise ValueError("validation_fraction leaves no training data")
    perm = rng.permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _resolve_mode(model, mode):
    if mode not in ("mean", "map", "sample"):
        raise ValueError(f"mode must be 'mean', 'map' or 'sample', got {mode!r}")
    if mode == "mean" and model.n_gated_layers > 1:
        warnings.warn("mean prediction is exact only for one gated layer; drawing a sample",
                      RuntimeWarning, stacklevel=3)
        return "sample"
    return mode


class PatchScaler(TransformerMixin, BaseEstimator):
    """Fixed affine pixel scaling ``(x - 0.5) / 0.2``; the inverse clips to [0, 1]."""

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return preprocess(X)

    def inverse_transform(self, X):
        return deprocess(X)


class _MixtureRegressor(BaseEstimator):
    # subclasses define __init__ and _build_model(n_in, n_out)

    def _design(self, X):
        X = np.asarray(X, dtype=np.float64)
        if self.fit_intercept:
            X = np.hstack([X, np.ones((X.shape[0], 1))])
        return X

    def _config(self):
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, k=self._train_k(),
            lr=self.learning_rate, seed=self.random_state, k_eval=self.k_eval,
            max_steps=self.max_steps, max_seconds=self.max_seconds,
        )

    def _train_k(self):
        return self.k

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True, dtype=np.float64)
        if self.target_scale <= 0:
            raise ValueError("target_scale must be positive")
        self._y_1d = y.ndim == 1
        Y = y.reshape(len(y), -1) / self.target_scale
        self.n_features_in_ = X.shape[1]
        self.n_outputs_ = Y.shape[1]
        Xd = self._design(X)
        root = Rng(self.random_state)
        tr, va = _split(len(Xd), self.validation_fraction, root.split(7))
        model = init_model(self._build_model(Xd.shape[1], Y.shape[1]), root.split(8))
        self.model_, self.metric_log_ = train(
            model, (Xd[tr], Y[tr]), self._config(), val_data=(Xd[va], Y[va])
        )
        return self

    def _check(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return self._design(X)

    def _unscale(self, out):
        out = out * self.target_scale
        return out[:, 0] if getattr(self, "_y_1d", False) else out

    def predict(self, X, mode="mean", random_state=None):
        """Point prediction: exact mean (one gated layer), MAP gates, or one sample."""
        Xd = self._check(X)
        mode = _resolve_mode(self.model_, mode)
        out, _ = self.model_.forward(Xd, mode, _rng(random_state, self.random_state))
        return self._unscale(out)

    def sample(self, X, n_samples=1, random_state=None):
        """``n_samples`` independent draws from ``p(y|x)``; shape (n_samples, n, ...)."""
        if n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        Xd = self._check(X)
        rng = _rng(random_state, self.random_state)
        return np.stack([self._unscale(self.model_.forward(Xd, "sample", rng)[0])
                         for _ in range(n_samples)])

    def log_likelihood(self, X, y, k=None, random_state=None):
        """Per-example Monte Carlo ``log p(y|x)`` in original target units."""
        Xd = self._check(X)
        Y = np.asarray(y, dtype=np.float64).reshape(len(Xd), -1) / self.target_scale
        k = self.k_eval if k is None else k
        from .likelihood import mc_log_likelihood

        rng = _rng(random_state, self.random_state)
        out = []
        for lo in range(0, len(Xd), 256):
            rep, _ = mc_log_likelihood(self.model_, Xd[lo:lo + 256], Y[lo:lo + 256], k, rng)
            out.append(rep.log_likelihood)
        return np.concatenate(out) - Y.shape[1] * np.log(self.target_scale)

    def score(self, X, y):
        """Mean held-out log-likelihood (nats per example)."""
        return float(np.mean(self.log_likelihood(X, y)))


class LBNRegressor(_MixtureRegressor):
    """Dense linearizing belief net trained by Monte Carlo maximum likelihood.

    Parameters
    ----------
    hidden_layer_sizes : tuple of int
        Width of each gated linear layer.
    gating_hidden : int
        Hidden sigmoid layers in each gating network.
    stochastic_gating : bool
        Sample the gating networks' hidden units as well.
    k : int
        Monte Carlo gate draws per example during training.
    k_eval : int
        Draws used for validation and :meth:`score`.
    target_scale : float
        Fixed output standard deviation (see module docs).
    """

    def __init__(self, hidden_layer_sizes=(32,), gating_hidden=2, stochastic_gating=False,
                 k=20, k_eval=100, epochs=50, batch_size=100, learning_rate=1e-3,
                 validation_fraction=0.2, target_scale=1.0, fit_intercept=True,
                 random_state=0, max_steps=None, max_seconds=None):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.gating_hidden = gating_hidden
        self.stochastic_gating = stochastic_gating
        self.k = k
        self.k_eval = k_eval
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.validation_fraction = validation_fraction
        self.target_scale = target_scale
        self.fit_intercept = fit_intercept
        self.random_state = random_state
        self.max_steps = max_steps
        self.max_seconds = max_seconds

    def _build_model(self, n_in, n_out):
        return LbnModel.dense(n_in, list(self.hidden_layer_sizes), n_out,
                              gating_hidden=self.gating_hidden,
                              stochastic_hidden=self.stochastic_gating)


class ReLURegressor(_MixtureRegressor):
    """Deterministic ReLU network fitted by squared error (one-sample mixture loss)."""

    def __init__(self, hidden_layer_sizes=(32, 32), epochs=50, batch_size=100,
                 learning_rate=1e-3, validation_fraction=0.2, target_scale=1.0,
                 fit_intercept=True, random_state=0, max_steps=None, max_seconds=None):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.validation_fraction = validation_fraction
        self.target_scale = target_scale
        self.fit_intercept = fit_intercept
        self.random_state = random_state
        self.max_steps = max_steps
        self.max_seconds = max_seconds

    k_eval = 1

    def _train_k(self):
        return 1

    def _build_model(self, n_in, n_out):
        return ReluNet.zeros(n_in, list(self.hidden_layer_sizes), n_out)

    def log_likelihood(self, X, y, k=None, random_state=None):
        return super().log_likelihood(X, y, k=1, random_state=random_state)


class CSBNRegressor(_MixtureRegressor):
    """Conditional sigmoid belief net trained with the same estimator as the LBN."""

    def __init__(self, hidden_layer_sizes=(32, 32), k=20, k_eval=100, epochs=50, batch_size=100,
                 learning_rate=1e-3, validation_fraction=0.2, target_scale=1.0,
                 fit_intercept=True, random_state=0, max_steps=None, max_seconds=None):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.k = k
        self.k_eval = k_eval
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.validation_fraction = validation_fraction
        self.target_scale = target_scale
        self.fit_intercept = fit_intercept
        self.random_state = random_state
        self.max_steps = max_steps
        self.max_seconds = max_seconds

    def _build_model(self, n_in, n_out):
        return CSBN.zeros(n_in, list(self.hidden_layer_sizes), n_out)


# --------------------------------------------------------------------------
# denoisers


def check_images(X, name="X"):
    """Validate a stack of grayscale images: (n, h, w) or (n, 1, h, w), finite floats."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 4 and X.shape[1] == 1:
        X = X[:, 0]
    if X.ndim != 3:
        raise ValueError(f"{name} must have shape (n, h, w), got {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains NaN or Inf")
    return X


class _Denoiser(BaseEstimator):
    # maps noisy [0, 1] images to clean ones through preprocess -> network -> deprocess

    _chunk = 64

    def _to_input(self, X):
        raise NotImplementedError

    def _to_image(self, out, shape):
        return deprocess(out.reshape(shape))

    def fit(self, X, y):
        """Fit on noisy inputs ``X`` and clean targets ``y``, both (n, h, w) in [0, 1]."""
        X = check_images(X)
        y = check_images(y, "y")
        if X.shape != y.shape:
            raise ValueError("noisy and clean stacks must have the same shape")
        self.image_shape_ = X.shape[1:]
        root = Rng(self.random_state)
        tr, va = _split(len(X), self.validation_fraction, root.split(7))
        model = init_model(self._build_model(), root.split(8))
        Xin, Yin = self._to_input(X), self._to_input(y)
        val_x, val_clean = X[va], y[va]

        def val_psnr(m):
            self.model_ = m
            return self.score(val_x, val_clean)

        cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, k=self.k,
                          lr=self.learning_rate, seed=self.random_state,
                          max_steps=self.max_steps, max_seconds=self.max_seconds)
        self.model_, self.metric_log_ = train(model, (Xin[tr], Yin[tr]), cfg,
                                              val_data=(Xin[va], Yin[va]), val_metric=val_psnr)
        return self

    def _run(self, X, mode, rng):
        outs = []
        for lo in range(0, len(X), self._chunk):
            chunk = X[lo:lo + self._chunk]
            out, _ = self.model_.forward(self._to_input(chunk), mode, rng)
            outs.append(self._to_image(out, chunk.shape))
        return np.concatenate(outs)

    def predict(self, X, mode="mean", random_state=None):
        """Denoised images in [0, 1]; ``mean`` falls back to one sample for deep models."""
        check_is_fitted(self, "model_")
        X = check_images(X)
        mode = _resolve_mode(self.model_, mode)
        return self._run(X, mode, _rng(random_state, self.random_state))

    def sample(self, X, n_samples=1, random_state=None):
        """(n_samples, n, h, w) independent denoised draws."""
        check_is_fitted(self, "model_")
        if n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        X = check_images(X)
        rng = _rng(random_state, self.random_state)
        return np.stack([self._run(X, "sample", rng) for _ in range(n_samples)])

    def log_likelihood(self, X, y, k=1, random_state=None):
        """Per-image Monte Carlo ``log p(clean | noisy)`` in preprocessed pixel units."""
        check_is_fitted(self, "model_")
        X, y = check_images(X), check_images(y, "y")
        rng = _rng(random_state, self.random_state)
        return np.array([
            mean_log_likelihood(self.model_, self._to_input(X[i:i + 1]),
                                self._to_input(y[i:i + 1]), k, rng)
            for i in range(len(X))
        ])

    def score(self, X, y):
        """Mean PSNR (dB) of ``predict(X)`` against clean ``y``.

        Models with several gated layers are scored on one seeded sample.
        """
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            pred = self.predict(X, mode="mean", random_state=Rng(self.random_state).split(9))
        y = check_images(y, "y")
        return float(np.mean([psnr(p, c) for p, c in zip(pred, y)]))


class ConvLBNDenoiser(_Denoiser):
    """Convolutional LBN denoiser; applies to images of any size once fitted."""

    def __init__(self, channels=16, kernel_size=5, n_blocks=2, gating_layers=3,
                 gating_kernel_size=1, stochastic_gating=False, k=1, epochs=10, batch_size=32,
                 learning_rate=1e-3, validation_fraction=0.1, random_state=0, max_steps=None,
                 max_seconds=None):
        self.channels = channels
        self.kernel_size = kernel_size
        self.n_blocks = n_blocks
        self.gating_layers = gating_layers
        self.gating_kernel_size = gating_kernel_size
        self.stochastic_gating = stochastic_gating
        self.k = k
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.validation_fraction = validation_fraction
        self.random_state = random_state
        self.max_steps = max_steps
        self.max_seconds = max_seconds

    def _build_model(self):
        return LbnModel.conv(1, self.channels, self.kernel_size, self.n_blocks,
                             gating_layers=self.gating_layers,
                             gating_kernel_size=self.gating_kernel_size,
                             stochastic_hidden=self.stochastic_gating)

    def _to_input(self, X):
        return preprocess(X)[:, None]


class PatchDenoiser(_Denoiser):
    """Dense network on flattened fixed-size patches (``model`` is 'lbn', 'csbn' or 'relu')."""

    def __init__(self, model="csbn", hidden_layer_sizes=(64,), k=1, epochs=10, batch_size=32,
                 learning_rate=1e-3, validation_fraction=0.1, random_state=0, max_steps=None,
                 max_seconds=None):
        self.model = model
        self.hidden_layer_sizes = hidden_layer_sizes
        self.k = k
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.validation_fraction = validation_fraction
        self.random_state = random_state
        self.max_steps = max_steps
        self.max_seconds = max_seconds

    def _build_model(self):
        n = int(np.prod(self.image_shape_))
        hidden = list(self.hidden_layer_sizes)
        if self.model == "lbn":
            return LbnModel.dense(n, hidden, n)
        if self.model == "csbn":
            return CSBN.zeros(n, hidden, n)
        if self.model == "relu":
            return ReluNet.zeros(n, hidden, n)
        raise ValueError(f"unknown patch model {self.model!r}")

    def _to_input(self, X):
        if tuple(X.shape[1:]) != tuple(self.image_shape_):
            raise ValueError(f"patch denoiser expects {self.image_shape_} inputs, got {X.shape[1:]}")
        return preprocess(X).reshape(len(X), -1)

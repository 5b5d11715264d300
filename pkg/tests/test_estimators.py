import warnings

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from lbn.denoise import NoiseSpec, corrupt, toy_bimodal_dataset
from lbn.estimators import (
    ConvLBNDenoiser,
    CSBNRegressor,
    LBNRegressor,
    PatchDenoiser,
    PatchScaler,
    ReLURegressor,
)
from lbn.tensor import Rng


@pytest.fixture(scope="module")
def toy():
    return toy_bimodal_dataset(600, Rng(0))


@pytest.fixture(scope="module")
def fitted_lbn(toy):
    x, y = toy
    return LBNRegressor(hidden_layer_sizes=(8,), k=5, k_eval=10, epochs=3, batch_size=50,
                        learning_rate=1e-2, target_scale=0.1).fit(x, y)


class TestRegressorApi:
    @pytest.mark.parametrize("cls", [LBNRegressor, ReLURegressor, CSBNRegressor])
    def test_params_roundtrip(self, cls):
        est = cls(epochs=3, random_state=5)
        params = est.get_params()
        assert params["epochs"] == 3 and params["random_state"] == 5
        assert clone(est).get_params() == params
        est.set_params(epochs=4)
        assert est.epochs == 4

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            LBNRegressor().predict(np.zeros((2, 1)))

    def test_shapes(self, fitted_lbn, toy):
        x, _ = toy
        assert fitted_lbn.predict(x[:5]).shape == (5, 1)
        assert fitted_lbn.sample(x[:5], n_samples=3).shape == (3, 5, 1)
        assert fitted_lbn.log_likelihood(x[:5], toy[1][:5]).shape == (5,)
        assert len(fitted_lbn.metric_log_) == 3

    def test_one_dimensional_targets(self, toy):
        x, y = toy
        est = ReLURegressor(hidden_layer_sizes=(4,), epochs=1).fit(x, y[:, 0])
        assert est.predict(x[:3]).shape == (3,)

    def test_feature_count_checked(self, fitted_lbn):
        with pytest.raises(ValueError):
            fitted_lbn.predict(np.zeros((2, 3)))

    def test_score_is_mean_log_likelihood(self, fitted_lbn, toy):
        x, y = toy
        ll = fitted_lbn.log_likelihood(x, y, random_state=fitted_lbn.random_state)
        assert fitted_lbn.score(x, y) == pytest.approx(ll.mean(), rel=1e-12)

    def test_target_scale_shifts_log_likelihood_units(self, fitted_lbn, toy):
        # scaling targets by c and the scale by c leaves the model unchanged,
        # so the density in original units drops by log c per output
        x, y = toy
        a = fitted_lbn.log_likelihood(x[:20], y[:20], random_state=1)
        est = clone(fitted_lbn).set_params(target_scale=0.2)
        est.model_, est.n_features_in_, est.n_outputs_ = fitted_lbn.model_, 1, 1
        b = est.log_likelihood(x[:20], 2 * y[:20], random_state=1)
        np.testing.assert_allclose(b, a - np.log(2.0), rtol=1e-12)

    def test_mean_on_deep_model_warns(self, toy):
        x, y = toy
        est = LBNRegressor(hidden_layer_sizes=(4, 4), epochs=1, k=2, k_eval=2).fit(x, y)
        with pytest.warns(RuntimeWarning):
            est.predict(x[:2], mode="mean")

    def test_bad_mode(self, fitted_lbn):
        with pytest.raises(ValueError):
            fitted_lbn.predict(np.zeros((1, 1)), mode="median")

    def test_fit_is_deterministic(self, toy):
        x, y = toy
        kw = dict(hidden_layer_sizes=(6,), k=3, k_eval=4, epochs=2, learning_rate=1e-2)
        a = LBNRegressor(**kw).fit(x, y)
        b = LBNRegressor(**kw).fit(x, y)
        assert a.metric_log_.to_csv() == b.metric_log_.to_csv()
        np.testing.assert_array_equal(a.predict(x), b.predict(x))


def test_patch_scaler_roundtrip():
    x = np.random.default_rng(0).uniform(size=(3, 4))
    sc = PatchScaler().fit(x)
    np.testing.assert_allclose(sc.inverse_transform(sc.transform(x)), x, atol=1e-12)


@pytest.fixture(scope="module")
def patches():
    rng = np.random.default_rng(0)
    base = np.cumsum(np.cumsum(rng.normal(size=(40, 8, 8)), axis=1), axis=2)
    clean = (base - base.min()) / (base.max() - base.min())
    return corrupt(clean, NoiseSpec(25), Rng(1)), clean


class TestDenoisers:
    def test_conv_fit_and_any_size(self, patches):
        noisy, clean = patches
        den = ConvLBNDenoiser(channels=2, kernel_size=3, n_blocks=1, gating_layers=2, epochs=2,
                              batch_size=8).fit(noisy, clean)
        assert den.predict(noisy[:3]).shape == (3, 8, 8)
        big = np.full((1, 20, 13), 0.5)
        out = den.predict(big, mode="map")
        assert out.shape == (1, 20, 13) and out.min() >= 0 and out.max() <= 1
        assert den.sample(noisy[:2], n_samples=4).shape == (4, 2, 8, 8)
        assert np.isfinite(den.score(noisy, clean))
        assert den.log_likelihood(noisy[:2], clean[:2]).shape == (2,)

    @pytest.mark.parametrize("kind", ["csbn", "relu", "lbn"])
    def test_patch_denoiser(self, patches, kind):
        noisy, clean = patches
        den = PatchDenoiser(model=kind, hidden_layer_sizes=(6,), epochs=1, batch_size=8,
                            k=2).fit(noisy, clean)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            assert den.predict(noisy[:2]).shape == (2, 8, 8)
        with pytest.raises(ValueError):
            den.predict(np.zeros((1, 9, 9)))

    def test_input_validation(self):
        den = ConvLBNDenoiser(epochs=1)
        with pytest.raises(ValueError):
            den.fit(np.zeros((2, 4, 4)), np.zeros((2, 5, 5)))
        with pytest.raises(ValueError):
            den.fit(np.full((2, 4, 4), np.nan), np.zeros((2, 4, 4)))
        with pytest.raises(NotFittedError):
            den.predict(np.zeros((1, 4, 4)))

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from enspost.data import SyntheticConfig, generate_synthetic
from enspost.estimators import EnsembleTransformer, MemberByMember
from enspost.validation import check_forecasts, check_observations
from enspost.verification import case_crps


@pytest.fixture(scope="module")
def data():
    ds = generate_synthetic(SyntheticConfig(samples=48, k=5, t=3, h=3, w=3, c=2, bias_amplitude=1.0, underdispersion_factor=0.5, seed=12))
    return ds.forecasts[:40], ds.observations[:40], ds.forecasts[40:], ds.observations[40:]


class TestParams:
    def test_get_set_clone(self):
        est = EnsembleTransformer(c_tilde=8, h_n=2)
        params = est.get_params()
        assert params["c_tilde"] == 8 and params["learning_rate"] == 0.001 and params["batch_size"] == 2
        est.set_params(n_blocks=1)
        assert clone(est).get_params() == est.get_params()
        assert MemberByMember().get_params()["predictors"] == "all"

    def test_not_fitted(self, data):
        with pytest.raises(NotFittedError):
            MemberByMember().predict(data[0])
        with pytest.raises(NotFittedError):
            EnsembleTransformer().predict(data[0])


class TestFitPredict:
    def test_mbm(self, data):
        X, y, Xt, yt = data
        est = MemberByMember().fit(X, y)
        pred = est.predict(Xt)
        assert pred.shape == (8, 5, 3, 3, 3)
        assert est.score(Xt, yt) > -case_crps(Xt[..., 0], yt, "gaussian_target").mean()
        assert not est.flagged_.any()

    def test_transformer(self, data):
        X, y, Xt, yt = data
        est = EnsembleTransformer(c_tilde=8, n_blocks=1, h_n=2, max_epochs=3, learning_rate=0.003, validation_fraction=0.2)
        est.fit(X, y)
        assert est.predict(Xt).shape == (8, 5, 3, 3, 3)
        assert len(est.train_loss_) == 3
        raw = -case_crps(Xt[..., 0], yt, "gaussian_target").mean()
        assert est.score(Xt, yt) > raw

    def test_explicit_validation_set(self, data):
        X, y, Xt, yt = data
        est = EnsembleTransformer(c_tilde=4, n_blocks=1, h_n=2, max_epochs=1).fit(X, y, Xt, yt)
        assert len(est.val_loss_) == 1

    def test_feature_count_checked(self, data):
        X, y, Xt, _ = data
        est = MemberByMember(predictors="target").fit(X, y)
        with pytest.raises(ValueError, match="predictors"):
            est.predict(Xt[..., :1])


class TestValidation:
    def test_five_dimensional_input(self):
        assert check_forecasts(np.zeros((2, 3, 1, 1, 1))).shape == (2, 3, 1, 1, 1, 1)

    @pytest.mark.parametrize(
        "shape, match",
        [((2, 3), "dimensions"), ((0, 3, 1, 1, 1, 1), "no samples"), ((2, 1, 1, 1, 1, 1), "members")],
    )
    def test_bad_shapes(self, shape, match):
        with pytest.raises(ValueError, match=match):
            check_forecasts(np.zeros(shape))

    def test_nonfinite(self):
        x = np.zeros((2, 3, 1, 1, 1, 1))
        x[0, 0] = np.nan
        with pytest.raises(ValueError, match="NaN"):
            check_forecasts(x)

    def test_observations(self):
        X = np.zeros((2, 3, 4, 1, 1, 1))
        assert check_observations(np.zeros((2, 4, 1, 1)), X).dtype == np.float32
        with pytest.raises(ValueError, match="expected"):
            check_observations(np.zeros((2, 1, 1)), X)

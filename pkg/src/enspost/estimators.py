"""scikit-learn style wrappers around the transformer and MBM postprocessors.

``X`` is an ensemble forecast array ``(n, k, t, h, w, c)`` whose channel
``target_index`` is the variable being corrected; ``y`` holds the matching
observations ``(n, t, h, w)``. ``predict`` returns the corrected ensemble
``(n, k, t, h, w)`` and ``score`` the negative mean verification CRPS.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import ForecastDataset
from .mbm import MbmFitConfig, apply_mbm, fit_mbm
from .model import ModelConfig, TrainConfig, forward, train
from .scoring import KernelCrpsConfig
from .validation import check_forecasts, check_observations
from .verification import case_crps

__all__ = ["EnsembleTransformer", "MemberByMember"]


def _dataset(X, y, target_index: int) -> ForecastDataset:
    names = tuple(f"x{i}" for i in range(X.shape[-1]))
    return ForecastDataset(X, y, names, target_index)


class _Postprocessor(BaseEstimator):
    _variable_kind = "gaussian_target"

    def score(self, X, y) -> float:
        """Negative mean CRPS of the corrected ensemble (higher is better)."""
        pred = self.predict(X)
        y = check_observations(y, check_forecasts(X))
        return -float(case_crps(pred, y, self._variable_kind).mean())


class EnsembleTransformer(_Postprocessor):
    """Self-attentive ensemble transformer.

    Parameters
    ----------
    c_tilde, n_blocks, h_n, m_n : int
        Embedding width, number of blocks, attention heads and MLP expansion.
    variable_kind : {"gaussian_target", "nonnegative_target"}
    loss_kind : {"auto", "gaussian_crps", "kernel_crps"}
        ``auto`` uses the Gaussian CRPS for ``gaussian_target`` and the
        penalized kernel CRPS otherwise.
    kernel_lambda, kernel_k : float
        Spread penalty of the kernel CRPS loss.
    batch_size, learning_rate, patience, max_epochs
        Adam training schedule with early stopping.
    validation_fraction : float
        Trailing fraction of the training cases used for early stopping
        when ``fit`` gets no explicit validation set.
    target_index : int
    random_state : int
    """

    def __init__(
        self,
        c_tilde: int = 32,
        n_blocks: int = 4,
        h_n: int = 8,
        m_n: int = 4,
        variable_kind: str = "gaussian_target",
        loss_kind: str = "auto",
        kernel_lambda: float = 0.0275,
        kernel_k: float = 2.7,
        batch_size: int = 2,
        learning_rate: float = 0.001,
        patience: int = 5,
        max_epochs: int = 100,
        validation_fraction: float = 0.1,
        target_index: int = 0,
        random_state: int = 0,
    ):
        self.c_tilde = c_tilde
        self.n_blocks = n_blocks
        self.h_n = h_n
        self.m_n = m_n
        self.variable_kind = variable_kind
        self.loss_kind = loss_kind
        self.kernel_lambda = kernel_lambda
        self.kernel_k = kernel_k
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.patience = patience
        self.max_epochs = max_epochs
        self.validation_fraction = validation_fraction
        self.target_index = target_index
        self.random_state = random_state

    @property
    def _variable_kind(self):
        return self.variable_kind

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_forecasts(X)
        y = check_observations(y, X)
        if X_val is None:
            n_val = int(round(X.shape[0] * self.validation_fraction))
            if not 0 < n_val < X.shape[0]:
                raise ValueError(f"validation_fraction={self.validation_fraction} leaves an empty split for {X.shape[0]} samples")
            X, X_val, y, y_val = X[:-n_val], X[-n_val:], y[:-n_val], y[-n_val:]
        else:
            X_val = check_forecasts(X_val, n_features=X.shape[-1])
            y_val = check_observations(y_val, X_val)
        tr = _dataset(X, y, self.target_index)
        va = _dataset(X_val, y_val, self.target_index)
        self.config_ = ModelConfig.for_dataset(
            tr, c_tilde=self.c_tilde, n_blocks=self.n_blocks, h_n=self.h_n, m_n=self.m_n,
            variable_kind=self.variable_kind, seed=self.random_state,
        )
        tc = TrainConfig(
            batch_size=self.batch_size, learning_rate=self.learning_rate, patience=self.patience,
            max_epochs=self.max_epochs, loss_kind=self.loss_kind,
            kernel=KernelCrpsConfig(self.kernel_lambda, self.kernel_k), seed=self.random_state,
        )
        result = train(tr, va, self.config_, tc)
        self.params_ = result.params
        self.train_loss_ = np.asarray(result.train_loss)
        self.val_loss_ = np.asarray(result.val_loss)
        self.best_epoch_ = result.best_epoch
        self.n_features_in_ = X.shape[-1]
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_forecasts(X, n_features=self.n_features_in_)
        return forward(X, self.params_, self.config_).astype(np.float64)


class MemberByMember(_Postprocessor):
    """Member-by-member correction fitted per gridpoint and lead time.

    Parameters
    ----------
    loss_kind : {"gaussian_crps", "abs_crps_nonnegative"}
    predictors : {"all", "target"}
        Whether every predictor's ensemble mean enters the corrected mean.
    max_iter, tol : optimizer controls per gridpoint
    n_jobs : int
    target_index : int
    """

    def __init__(self, loss_kind: str = "gaussian_crps", predictors: str = "all", max_iter: int = 200, tol: float = 1e-7, n_jobs: int = 1, target_index: int = 0):
        self.loss_kind = loss_kind
        self.predictors = predictors
        self.max_iter = max_iter
        self.tol = tol
        self.n_jobs = n_jobs
        self.target_index = target_index

    @property
    def _variable_kind(self):
        return "nonnegative_target" if self.loss_kind == "abs_crps_nonnegative" else "gaussian_target"

    def fit(self, X, y):
        X = check_forecasts(X)
        y = check_observations(y, X)
        cfg = MbmFitConfig(loss_kind=self.loss_kind, predictors=self.predictors, max_iter=self.max_iter, tol=self.tol, n_jobs=self.n_jobs)
        result = fit_mbm(_dataset(X, y, self.target_index), cfg)
        self.params_ = result.params
        self.train_crps_ = result.train_crps
        self.identity_crps_ = result.identity_crps
        self.flagged_ = result.flagged
        self.n_features_in_ = X.shape[-1]
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_forecasts(X, n_features=self.n_features_in_)
        t, h, w = self.params_.shape
        if X.shape[2:5] != (t, h, w):
            raise ValueError(f"forecast grid {X.shape[2:5]} differs from the fitted grid {(t, h, w)}")
        return apply_mbm(X, self.params_)

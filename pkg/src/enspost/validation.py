"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

import numpy as np

__all__ = ["check_forecasts", "check_observations"]


def check_forecasts(X, *, n_features: int | None = None, min_members: int = 2) -> np.ndarray:
    """Validate an ensemble forecast array of shape ``(n, k, t, h, w, c)``.

    A 5-d array is read as a single predictor and gets a trailing channel
    axis. Returns a float32 copy.
    """
    X = np.asarray(X)
    if X.ndim == 5:
        X = X[..., None]
    if X.ndim != 6:
        raise ValueError(f"forecasts must have shape (n, k, t, h, w, c); got {X.ndim} dimensions")
    if X.shape[0] == 0:
        raise ValueError("forecasts contain no samples")
    if X.shape[1] < min_members:
        raise ValueError(f"need at least {min_members} ensemble members, got {X.shape[1]}")
    if not np.issubdtype(X.dtype, np.number):
        raise TypeError(f"forecasts must be numeric, got dtype {X.dtype}")
    if not np.all(np.isfinite(X)):
        raise ValueError("forecasts contain NaN or infinite values")
    if n_features is not None and X.shape[-1] != n_features:
        raise ValueError(f"forecasts have {X.shape[-1]} predictors, estimator was fitted with {n_features}")
    return X.astype(np.float32)


def check_observations(y, X: np.ndarray) -> np.ndarray:
    """Validate observations ``(n, t, h, w)`` aligned with forecasts ``X``."""
    y = np.asarray(y)
    expected = X.shape[:1] + X.shape[2:5]
    if y.shape != expected:
        raise ValueError(f"observations have shape {y.shape}, expected {expected}")
    if not np.all(np.isfinite(y)):
        raise ValueError("observations contain NaN or infinite values")
    return y.astype(np.float32)


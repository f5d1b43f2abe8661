"""Member-by-member ensemble correction with spread scaling.

Each member is corrected as ``alpha + sum_i beta_i * mean_i + tau * (v_m - mean_target)``
with ``tau**2 = gamma1**2 + gamma2**2 / var``, fitted by CRPS minimization
separately at every gridpoint and lead time.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import ndtr

from .data import ForecastDataset
from .scoring import crps_fair, crps_gaussian

__all__ = [
    "MbmParameters",
    "MbmFitConfig",
    "MbmFitResult",
    "DegenerateEnsembleError",
    "compute_tau",
    "mbm_correct",
    "apply_mbm",
    "fit_mbm",
    "save_mbm_csv",
    "load_mbm_csv",
]

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-12
_LOG_GAMMA_BOUNDS = (-30.0, 10.0)
LOSS_KINDS = ("gaussian_crps", "abs_crps_nonnegative")
_INV_SQRT_PI = 1.0 / math.sqrt(math.pi)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class DegenerateEnsembleError(ValueError):
    """Ensemble variance below the floor, so the spread correction is undefined."""


@dataclass
class MbmParameters:
    """Correction coefficients on a ``[t, h, w]`` grid.

    ``beta`` has a trailing predictor axis of length ``c``.
    """

    alpha: np.ndarray
    beta: np.ndarray
    gamma1: np.ndarray
    gamma2: np.ndarray
    converged: np.ndarray
    target_index: int = 0
    nonnegative: bool = False

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.alpha.shape

    @classmethod
    def identity(cls, t: int, h: int, w: int, c: int, target_index: int = 0, nonnegative: bool = False):
        beta = np.zeros((t, h, w, c))
        beta[..., target_index] = 1.0
        return cls(
            np.zeros((t, h, w)),
            beta,
            np.ones((t, h, w)),
            np.zeros((t, h, w)),
            np.ones((t, h, w), dtype=bool),
            target_index,
            nonnegative,
        )


@dataclass(frozen=True)
class MbmFitConfig:
    loss_kind: str = "gaussian_crps"
    predictors: str = "all"
    max_iter: int = 200
    tol: float = 1e-7
    seed: int = 0
    n_jobs: int = 1

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.predictors not in ("all", "target"):
            raise ValueError("predictors must be 'all' or 'target'")
        if self.max_iter < 1 or self.tol <= 0 or self.n_jobs < 1:
            raise ValueError("max_iter, tol and n_jobs must be positive")

    @property
    def nonnegative(self) -> bool:
        return self.loss_kind == "abs_crps_nonnegative"


def compute_tau(gamma1, gamma2, sigma_eps2, floor: float = VARIANCE_FLOOR):
    """Spread factor ``sqrt(gamma1**2 + gamma2**2 / sigma_eps2)``."""
    s2 = np.asarray(sigma_eps2, dtype=float)
    if np.any(s2 < floor):
        raise DegenerateEnsembleError(f"ensemble variance below floor {floor:g}")
    out = np.sqrt(np.asarray(gamma1, float) ** 2 + np.asarray(gamma2, float) ** 2 / s2)
    return out[()] if out.ndim == 0 else out


def _correct(fc: np.ndarray, target: int, alpha, beta, gamma1, gamma2, nonnegative: bool) -> np.ndarray:
    """Vectorized correction; ``fc`` is ``[..., k, c]`` with parameters broadcasting over ``...``."""
    means = fc.mean(axis=-2)
    v = fc[..., target]
    dev = v - means[..., target][..., None]
    s2 = v.var(axis=-1, ddof=1)
    safe = np.where(s2 < VARIANCE_FLOOR, 1.0, s2)
    tau = np.sqrt(gamma1**2 + gamma2**2 / safe)
    tau = np.where(s2 < VARIANCE_FLOOR, 0.0, tau)
    centre = alpha + (beta * means).sum(axis=-1)
    out = centre[..., None] + tau[..., None] * dev
    return np.maximum(out, 0.0) if nonnegative else out


def mbm_correct(ensemble, target_index: int, alpha: float, beta, gamma1: float, gamma2: float, nonnegative: bool = False) -> np.ndarray:
    """Correct one ``[k, c]`` ensemble (members by predictors).

    >>> mbm_correct([[1.0], [3.0]], 0, alpha=1.0, beta=[0.5], gamma1=1.0, gamma2=0.0)
    array([1., 3.])
    """
    x = np.asarray(ensemble, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise ValueError(f"need at least 2 members, got {x.shape[0]}")
    compute_tau(gamma1, gamma2, x[:, target_index].var(ddof=1))
    return _correct(x, target_index, alpha, np.asarray(beta, float), gamma1, gamma2, nonnegative)


def apply_mbm(forecasts, params: MbmParameters) -> np.ndarray:
    """Corrected target ensemble ``[n, k, t, h, w]`` for forecasts ``[n, k, t, h, w, c]``."""
    fc = np.asarray(forecasts, dtype=np.float64)
    if fc.ndim != 6 or fc.shape[2:5] != params.shape or fc.shape[-1] != params.beta.shape[-1]:
        raise ValueError(f"forecasts {fc.shape} do not match parameter grid {params.shape}")
    x = np.moveaxis(fc, 1, -2)  # [n,t,h,w,k,c]
    out = _correct(x, params.target_index, params.alpha, params.beta, params.gamma1, params.gamma2, params.nonnegative)
    return np.moveaxis(out, -1, 1)


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


class _Cell:
    """Objective for one gridpoint and lead time in a standardized parameterization.

    Parameters are ``[a, b_1..b_p, log gamma1, log gamma2]`` acting on
    standardized predictor means ``u = (mean - centre) / scale``.
    """

    def __init__(self, fc: np.ndarray, obs: np.ndarray, target: int, use: np.ndarray, nonnegative: bool):
        self.means = fc.mean(axis=1)[:, use]
        self.centre = self.means.mean(axis=0)
        self.scale = self.means.std(axis=0)
        self.u = (self.means - self.centre) / self.scale
        v = fc[:, :, target]
        self.dev = v - v.mean(axis=1, keepdims=True)
        self.s2 = v.var(axis=1, ddof=1)
        self.y = obs
        self.use = use
        self.target_pos = int(np.flatnonzero(use == target)[0])
        self.nonnegative = nonnegative
        self.k = fc.shape[1]

    def unpack(self, theta):
        p = len(self.use)
        return theta[0], theta[1 : 1 + p], math.exp(theta[1 + p]), math.exp(theta[2 + p])

    def to_physical(self, theta):
        a, b, g1, g2 = self.unpack(theta)
        beta = b / self.scale
        alpha = a - float(beta @ self.centre)
        return alpha, beta, g1, g2

    def identity_theta(self, gamma2: float) -> np.ndarray:
        p = len(self.use)
        theta = np.zeros(p + 3)
        theta[0] = self.centre[self.target_pos]
        theta[1 + self.target_pos] = self.scale[self.target_pos]
        theta[2 + p] = math.log(gamma2) if gamma2 > 0 else -np.inf
        return theta

    def gaussian(self, theta):
        a, b, g1, g2 = self.unpack(theta)
        mu = a + self.u @ b
        var = g1 * g1 * self.s2 + g2 * g2
        sigma = np.sqrt(var)
        z = (self.y - mu) / sigma
        Phi = ndtr(z)
        pdf = _INV_SQRT2PI * np.exp(-0.5 * z * z)
        crps = sigma * (z * (2 * Phi - 1) + 2 * pdf - _INV_SQRT_PI)
        n = len(self.y)
        d_mu = (1 - 2 * Phi) / n
        d_sigma = (2 * pdf - _INV_SQRT_PI) / n
        grad = np.empty_like(theta)
        grad[0] = d_mu.sum()
        grad[1:-2] = self.u.T @ d_mu
        grad[-2] = (d_sigma * g1 * g1 * self.s2 / sigma).sum()
        grad[-1] = (d_sigma * g2 * g2 / sigma).sum()
        return crps.mean(), grad

    def fair(self, theta):
        a, b, g1, g2 = self.unpack(theta)
        mu = a + self.u @ b
        tau = np.sqrt(g1 * g1 + g2 * g2 / self.s2)
        pre = mu[:, None] + tau[:, None] * self.dev
        x = np.maximum(pre, 0.0) if self.nonnegative else pre
        k, n = self.k, len(self.y)
        sign_y = np.sign(x - self.y[:, None])
        pair = np.sign(x[:, :, None] - x[:, None, :])
        crps = np.abs(x - self.y[:, None]).mean(axis=1) - np.abs(x[:, :, None] - x[:, None, :]).sum(axis=(1, 2)) / (2 * k * (k - 1))
        d_x = (sign_y / k - pair.sum(axis=2) / (k * (k - 1))) / n
        if self.nonnegative:
            d_x = d_x * (pre > 0)
        d_mu = d_x.sum(axis=1)
        d_tau = (d_x * self.dev).sum(axis=1)
        grad = np.empty_like(theta)
        grad[0] = d_mu.sum()
        grad[1:-2] = self.u.T @ d_mu
        grad[-2] = (d_tau * g1 * g1 / tau).sum()
        grad[-1] = (d_tau * g2 * g2 / (self.s2 * tau)).sum()
        return crps.mean(), grad

    def objective(self, theta):
        return self.fair(theta) if self.nonnegative else self.gaussian(theta)

    def identity_score(self) -> float:
        # evaluated directly: gamma2 == 0 is outside the log parameterization
        v_mean = self.means[:, self.target_pos]
        if self.nonnegative:
            x = np.maximum(v_mean[:, None] + self.dev, 0.0)
            return float(np.mean(crps_fair(x, self.y)))
        return float(np.mean(crps_gaussian(v_mean, np.sqrt(self.s2), self.y)))


@dataclass
class MbmFitResult:
    params: MbmParameters
    train_crps: np.ndarray
    identity_crps: np.ndarray

    @property
    def flagged(self) -> np.ndarray:
        return ~self.params.converged


def _fit_cell(fc, obs, target, use, config: MbmFitConfig):
    """Fit one cell.

    Returns None when the cell must keep the identity and be flagged,
    otherwise ``(coefficients or None, score, identity_score)`` where None
    coefficients mean the identity scored best.
    """
    v = fc[:, :, target]
    if np.any(v.var(axis=1, ddof=1) < VARIANCE_FLOOR):
        return None
    cell = _Cell(fc, obs, target, use, config.nonnegative)
    ident = cell.identity_score()
    spread = math.sqrt(float(cell.s2.mean()))
    res = minimize(
        cell.objective,
        cell.identity_theta(0.1 * spread),
        jac=True,
        method="L-BFGS-B",
        bounds=[(None, None)] * (len(use) + 1) + [_LOG_GAMMA_BOUNDS] * 2,
        options={"maxiter": config.max_iter, "ftol": config.tol, "gtol": 1e-8},
    )
    if not np.all(np.isfinite(res.x)) or not np.isfinite(res.fun):
        return None
    score = float(cell.objective(res.x)[0])
    # on the kinks of the fair CRPS L-BFGS-B ends with a failed line search
    # (status 2); that end point is accepted when it beats the identity
    if not (res.success or (res.status == 2 and score <= ident)):
        return None
    if score > ident:
        return None, ident, ident
    return cell.to_physical(res.x), score, ident


def fit_mbm(dataset: ForecastDataset, config: MbmFitConfig = MbmFitConfig()) -> MbmFitResult:
    """Fit correction parameters independently at every gridpoint and lead time.

    Every cell starts from (near) the identity correction and is only
    accepted when its training CRPS does not exceed that of the identity;
    cells whose optimizer fails or whose ensemble is degenerate keep the
    identity and are flagged as not converged.
    """
    n, k, T, H, W, C = dataset.dims
    if n == 0:
        raise ValueError("training split is empty")
    if k < 2:
        raise ValueError("member-by-member fitting needs at least 2 members")
    target = dataset.target_index
    use = np.arange(C) if config.predictors == "all" else np.array([target])
    fc = dataset.forecasts.astype(np.float64)
    obs = dataset.observations.astype(np.float64)
    means = fc.mean(axis=1)  # [n,t,h,w,c]
    spread_over_time = means.std(axis=0)
    for i in use:
        if np.any(spread_over_time[..., i] <= 0):
            raise ValueError(
                f"predictor {dataset.predictor_names[i]!r} is constant over the training samples "
                "at some gridpoint; static fields make the regression singular"
            )

    params = MbmParameters.identity(T, H, W, C, target, config.nonnegative)
    train_crps = np.full((T, H, W), np.nan)
    identity_crps = np.full((T, H, W), np.nan)
    cells = [(t, i, j) for i in range(H) for j in range(W) for t in range(T)]

    def work(cell):
        t, i, j = cell
        return _fit_cell(fc[:, :, t, i, j, :], obs[:, t, i, j], target, use, config)

    if config.n_jobs > 1:
        with ThreadPoolExecutor(config.n_jobs) as pool:
            results = list(pool.map(work, cells))
    else:
        results = [work(cell) for cell in cells]

    for (t, i, j), out in zip(cells, results):
        if out is None:
            params.converged[t, i, j] = False
            continue
        coef, score, ident = out
        train_crps[t, i, j] = score
        identity_crps[t, i, j] = ident
        if coef is None:
            continue
        alpha, beta, g1, g2 = coef
        params.alpha[t, i, j] = alpha
        params.beta[t, i, j, :] = 0.0
        params.beta[t, i, j, use] = beta
        params.gamma1[t, i, j] = g1
        params.gamma2[t, i, j] = g2
    n_flag = int((~params.converged).sum())
    if n_flag:
        logger.warning("%d of %d cells flagged; identity parameters retained", n_flag, len(cells))
    return MbmFitResult(params, train_crps, identity_crps)


# ---------------------------------------------------------------------------
# csv io
# ---------------------------------------------------------------------------


def save_mbm_csv(params: MbmParameters, path) -> None:
    """One row per cell: lat_idx, lon_idx, lead_idx, alpha, beta_0..beta_{c-1}, gamma1, gamma2, converged."""
    T, H, W = params.shape
    c = params.beta.shape[-1]
    header = ["lat_idx", "lon_idx", "lead_idx", "alpha"] + [f"beta_{i}" for i in range(c)] + ["gamma1", "gamma2", "converged"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for i in range(H):
            for j in range(W):
                for t in range(T):
                    row = [i, j, t, repr(float(params.alpha[t, i, j]))]
                    row += [repr(float(b)) for b in params.beta[t, i, j]]
                    row += [repr(float(params.gamma1[t, i, j])), repr(float(params.gamma2[t, i, j]))]
                    row.append(int(params.converged[t, i, j]))
                    wr.writerow(row)


def load_mbm_csv(path, target_index: int = 0, nonnegative: bool = False) -> MbmParameters:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty parameter file")
    header, body = rows[0], rows[1:]
    betas = [h for h in header if h.startswith("beta_")]
    expected = ["lat_idx", "lon_idx", "lead_idx", "alpha"] + [f"beta_{i}" for i in range(len(betas))] + ["gamma1", "gamma2", "converged"]
    if header != expected:
        raise ValueError(f"{path}: unexpected header {header}")
    idx = np.array([[int(r[0]), int(r[1]), int(r[2])] for r in body])
    H, W, T = (idx.max(axis=0) + 1) if len(idx) else (0, 0, 0)
    if len(body) != H * W * T:
        raise ValueError(f"{path}: {len(body)} rows do not cover a full {H}x{W}x{T} grid")
    params = MbmParameters.identity(T, H, W, len(betas), target_index, nonnegative)
    for r, (i, j, t) in zip(body, idx):
        vals = [float(x) for x in r[3:-1]]
        params.alpha[t, i, j] = vals[0]
        params.beta[t, i, j] = vals[1 : 1 + len(betas)]
        params.gamma1[t, i, j], params.gamma2[t, i, j] = vals[-2], vals[-1]
        params.converged[t, i, j] = bool(int(r[-1]))
    return params

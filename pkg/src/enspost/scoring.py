"""CRPS formulations for Gaussian and ensemble forecasts.

The plain functions work on numpy arrays and broadcast over leading axes;
the ``*_loss`` variants operate on :class:`~enspost.autodiff.Tensor` and are
differentiable, for use as training objectives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import erf

from .autodiff import Tensor, abs_, custom_op, relu, sqrt

__all__ = [
    "KernelCrpsConfig",
    "KERNEL_CRPS_DEFAULTS",
    "crps_gaussian",
    "crps_kernel",
    "crps_fair",
    "crps_integral_oracle",
    "empirical_cdf",
    "gaussian_crps_loss",
    "kernel_crps_loss",
]

_INV_SQRT_PI = 1.0 / math.sqrt(math.pi)
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class KernelCrpsConfig:
    """Weight and spread multiple of the excess-spread penalty."""

    lam: float = 0.0275
    k_penalty: float = 2.7

    def __post_init__(self):
        if self.lam < 0 or self.k_penalty < 0:
            raise ValueError("lam and k_penalty must be non-negative")


KERNEL_CRPS_DEFAULTS = {
    "w10": KernelCrpsConfig(0.0275, 2.7),
    "w100": KernelCrpsConfig(0.05, 2.0),
}


def _phi(z):
    return _INV_SQRT2PI * np.exp(-0.5 * z * z)


def _Phi(z):
    return 0.5 * (1.0 + erf(z * _INV_SQRT2))


def crps_gaussian(mu, sigma, y):
    """CRPS of a normal predictive distribution ``N(mu, sigma**2)`` at ``y``.

    Parameters
    ----------
    mu, sigma, y : array_like
        Broadcastable arrays; ``sigma`` must be strictly positive.

    Returns
    -------
    ndarray or float
    """
    mu, sigma, y = np.asarray(mu, float), np.asarray(sigma, float), np.asarray(y, float)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be strictly positive")
    z = (y - mu) / sigma
    out = sigma * (z * (2.0 * _Phi(z) - 1.0) + 2.0 * _phi(z) - _INV_SQRT_PI)
    return out[()] if out.ndim == 0 else out


def _check_members(members, minimum: int, name: str) -> np.ndarray:
    x = np.asarray(members, dtype=float)
    if x.ndim == 0:
        x = x[None]
    if x.shape[-1] < minimum:
        raise ValueError(f"{name} needs at least {minimum} member(s), got {x.shape[-1]}")
    return x


def _mean_pair_abs(x: np.ndarray) -> np.ndarray:
    """Sum over i, j of |x_i - x_j| along the last axis, via sorting.

    For sorted values the double sum equals ``2 * sum_i (2i - m + 1) x_(i)``.
    """
    m = x.shape[-1]
    xs = np.sort(x, axis=-1)
    w = 2.0 * np.arange(m) - m + 1.0
    return 2.0 * (xs * w).sum(axis=-1)


def crps_kernel(members, y, config: KernelCrpsConfig | None = None):
    """Kernel (energy) form of the ensemble CRPS with an excess-spread penalty.

    ``members`` has the ensemble on its last axis; ``y`` broadcasts against
    the remaining axes. With ``config.lam == 0`` this is the CRPS of the
    empirical ensemble distribution.
    """
    config = config or KernelCrpsConfig(0.0, 0.0)
    x = _check_members(members, 1, "crps_kernel")
    y = np.asarray(y, dtype=float)
    m = x.shape[-1]
    skill = np.abs(x - y[..., None]).mean(axis=-1)
    spread = _mean_pair_abs(x) / (2.0 * m * m)
    out = skill - spread
    if config.lam > 0:
        dev = np.abs(x - x.mean(axis=-1, keepdims=True))
        sd = x.std(axis=-1, ddof=1) if m > 1 else np.zeros(x.shape[:-1])
        penalty = np.maximum(0.0, dev - config.k_penalty * sd[..., None]).mean(axis=-1)
        out = out + config.lam * penalty
    return out[()] if np.ndim(out) == 0 else out


def crps_fair(members, y):
    """Fair ensemble CRPS, unbiased for the infinite-ensemble score."""
    x = _check_members(members, 2, "crps_fair")
    y = np.asarray(y, dtype=float)
    m = x.shape[-1]
    skill = np.abs(x - y[..., None]).mean(axis=-1)
    out = skill - _mean_pair_abs(x) / (2.0 * m * (m - 1))
    return out[()] if np.ndim(out) == 0 else out


def empirical_cdf(members) -> Callable[[np.ndarray], np.ndarray]:
    """Right-continuous step CDF of a 1-d sample."""
    xs = np.sort(np.asarray(members, dtype=float).ravel())
    n = xs.size
    return lambda t: np.searchsorted(xs, np.asarray(t, float), side="right") / n


def crps_integral_oracle(cdf, y: float, grid) -> float:
    """Trapezoidal quadrature of the squared distance between ``cdf`` and a step at ``y``.

    The grid is sorted and augmented with ``y`` so the indicator jump falls on
    a node. Raises if more than 1e-8 of the mass lies outside the grid.
    """
    t = np.unique(np.append(np.asarray(grid, dtype=float), float(y)))
    F = np.asarray(cdf(t), dtype=float)
    if F[0] > 1e-8 or 1.0 - F[-1] > 1e-8:
        raise ValueError(
            f"integration grid too narrow: mass {F[0]:.3g} below and {1.0 - F[-1]:.3g} above"
        )
    # left and right limits of the integrand on each interval; this keeps
    # step CDFs and the indicator jump exact
    ind = (t >= y).astype(float)
    left = (F[:-1] - ind[:-1]) ** 2
    Fr = np.asarray(cdf(np.nextafter(t[1:], -np.inf)), dtype=float)
    indr = (t[1:] > y).astype(float)
    right = (Fr - indr) ** 2
    return float(np.sum(0.5 * (left + right) * np.diff(t)))


# ---------------------------------------------------------------------------
# differentiable losses
# ---------------------------------------------------------------------------


def _gaussian_crps_op(mu: Tensor, sigma: Tensor, y: np.ndarray) -> Tensor:
    md, sd = mu.data, sigma.data
    z = (y - md) / sd
    Phi = _Phi(z)
    pdf = _phi(z)
    val = sd * (z * (2.0 * Phi - 1.0) + 2.0 * pdf - _INV_SQRT_PI)

    def backward(g):
        return g * (1.0 - 2.0 * Phi), g * (2.0 * pdf - _INV_SQRT_PI)

    return custom_op(val.astype(md.dtype, copy=False), (mu, sigma), backward)


def gaussian_crps_loss(ensemble: Tensor, y, member_axis: int = 1, sigma_floor: float = 1e-6) -> Tensor:
    """Mean Gaussian CRPS using the ensemble mean and unbiased standard deviation.

    ``sigma_floor`` is added to the variance so collapsed ensembles keep a
    finite gradient.
    """
    k = ensemble.shape[member_axis]
    if k < 2:
        raise ValueError("gaussian CRPS loss needs at least two members")
    mu = ensemble.mean(axis=member_axis, keepdims=True)
    dev = ensemble - mu
    var = (dev * dev).sum(axis=member_axis) * (1.0 / (k - 1))
    sigma = sqrt(var + sigma_floor)
    mu = mu.reshape(sigma.shape)
    y = np.asarray(y, dtype=ensemble.dtype)
    return _gaussian_crps_op(mu, sigma, y).mean()


def kernel_crps_loss(ensemble: Tensor, y, config: KernelCrpsConfig, member_axis: int = 1) -> Tensor:
    """Mean kernel CRPS plus spread penalty over all non-member axes."""
    x = ensemble if member_axis == 1 else ensemble.transpose(_move_to_1(ensemble.ndim, member_axis))
    m = x.shape[1]
    rest = x.shape[2:]
    y = np.asarray(y, dtype=x.dtype).reshape((x.shape[0], 1) + tuple(rest))
    skill = abs_(x - y).mean(axis=1)
    xi = x.reshape((x.shape[0], m, 1) + tuple(rest))
    xj = x.reshape((x.shape[0], 1, m) + tuple(rest))
    spread = abs_(xi - xj).sum(axis=(1, 2)) * (1.0 / (2.0 * m * m))
    score = skill - spread
    if config.lam > 0:
        mu = x.mean(axis=1, keepdims=True)
        dev = x - mu
        if m > 1:
            sd = sqrt((dev * dev).sum(axis=1, keepdims=True) * (1.0 / (m - 1)) + 1e-12)
            excess = abs_(dev) - sd * config.k_penalty
        else:
            excess = abs_(dev)
        score = score + relu(excess).mean(axis=1) * config.lam
    return score.mean()


def _move_to_1(ndim: int, axis: int) -> tuple[int, ...]:
    axis = axis % ndim
    order = [0, axis] + [i for i in range(1, ndim) if i != axis]
    return tuple(order)

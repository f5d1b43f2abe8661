"""Verification scores for gridded ensemble forecasts.

Ensembles are laid out ``[samples, k, t, h, w]`` and observations
``[samples, t, h, w]`` unless stated otherwise.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .scoring import crps_fair, crps_gaussian

__all__ = [
    "VerificationReport",
    "bias",
    "rmse",
    "spread_fortin",
    "ser",
    "rank_histogram",
    "case_crps",
    "verify",
    "write_report",
]


def bias(forecast_means, observations) -> float:
    """Mean of ensemble-mean minus observation."""
    m = np.asarray(forecast_means, dtype=float)
    y = np.asarray(observations, dtype=float)
    if m.size == 0:
        raise ValueError("bias of an empty sample")
    if m.shape != y.shape:
        raise ValueError(f"shape mismatch {m.shape} vs {y.shape}")
    return float(np.mean(m - y))


def rmse(forecast_means, observations) -> float:
    m = np.asarray(forecast_means, dtype=float)
    y = np.asarray(observations, dtype=float)
    if m.size == 0:
        raise ValueError("rmse of an empty sample")
    return float(np.sqrt(np.mean((m - y) ** 2)))


def spread_fortin(ensembles, member_axis: int = -1) -> float:
    """Square root of the mean unbiased ensemble variance."""
    x = np.asarray(ensembles, dtype=float)
    if x.shape[member_axis] < 2:
        raise ValueError("spread needs at least 2 members")
    return float(np.sqrt(np.mean(x.var(axis=member_axis, ddof=1))))


def ser(ensembles, observations, member_axis: int = -1) -> float:
    """Spread-error ratio: Fortin spread over RMSE of the ensemble mean."""
    x = np.asarray(ensembles, dtype=float)
    err = rmse(x.mean(axis=member_axis), observations)
    if err == 0:
        raise ZeroDivisionError("spread-error ratio undefined for zero RMSE")
    return spread_fortin(x, member_axis) / err


def rank_histogram(ensembles, observations, seed: int = 0, member_axis: int = -1) -> np.ndarray:
    """Counts of observation ranks in ``k + 1`` bins.

    The rank is the number of members strictly below the observation; when
    members tie with the observation the rank is drawn uniformly among the
    tied positions.
    """
    x = np.moveaxis(np.asarray(ensembles, dtype=float), member_axis, -1)
    y = np.asarray(observations, dtype=float)
    k = x.shape[-1]
    x = x.reshape(-1, k)
    y = y.reshape(-1)
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"{x.shape[0]} ensembles but {y.shape[0]} observations")
    below = (x < y[:, None]).sum(axis=1)
    ties = (x == y[:, None]).sum(axis=1)
    rng = np.random.default_rng(seed)
    extra = np.floor(rng.random(below.shape) * (ties + 1)).astype(int)
    return np.bincount(below + extra, minlength=k + 1)


def case_crps(ensembles, observations, variable_kind: str, member_axis: int = 1) -> np.ndarray:
    """Per-case CRPS: Gaussian on ensemble mean/std, or fair ensemble CRPS."""
    x = np.moveaxis(np.asarray(ensembles, dtype=float), member_axis, -1)
    y = np.asarray(observations, dtype=float)
    if variable_kind == "gaussian_target":
        mu = x.mean(axis=-1)
        sd = x.std(axis=-1, ddof=1)
        out = np.abs(y - mu)  # sigma -> 0 limit
        pos = sd > 0
        out[pos] = crps_gaussian(mu[pos], sd[pos], y[pos])
        return out
    if variable_kind == "nonnegative_target":
        return crps_fair(x, y)
    raise ValueError(f"unknown variable_kind {variable_kind!r}")


@dataclass
class VerificationReport:
    """Scores per lead time, per gridpoint and overall.

    Overall CRPS and bias are the means of the per-lead values; overall
    spread, RMSE and SER pool all cases.
    """

    crps: np.ndarray
    bias: np.ndarray
    rmse: np.ndarray
    spread: np.ndarray
    ser: np.ndarray
    crps_map: np.ndarray
    bias_map: np.ndarray
    rank_histogram: np.ndarray
    overall: dict
    metadata: dict = field(default_factory=dict)


def verify(ensembles, observations, variable_kind: str = "gaussian_target", method: str = "", variable: str = "", seed: int = 0) -> VerificationReport:
    x = np.asarray(ensembles, dtype=float)
    y = np.asarray(observations, dtype=float)
    if x.ndim != 5 or y.shape != x.shape[:1] + x.shape[2:]:
        raise ValueError(f"ensembles {x.shape} and observations {y.shape} are not aligned as [n,k,t,h,w] / [n,t,h,w]")
    n, k, T, H, W = x.shape
    scores = case_crps(x, y, variable_kind)  # [n,t,h,w]
    mean = x.mean(axis=1)
    var = x.var(axis=1, ddof=1)
    err2 = (mean - y) ** 2
    crps_lead = scores.mean(axis=(0, 2, 3))
    bias_lead = (mean - y).mean(axis=(0, 2, 3))
    rmse_lead = np.sqrt(err2.mean(axis=(0, 2, 3)))
    spread_lead = np.sqrt(var.mean(axis=(0, 2, 3)))
    with np.errstate(divide="ignore", invalid="ignore"):
        ser_lead = np.where(rmse_lead > 0, spread_lead / rmse_lead, np.nan)
    overall_rmse = float(np.sqrt(err2.mean()))
    overall_spread = float(np.sqrt(var.mean()))
    overall = {
        "crps": float(crps_lead.mean()),
        "bias": float(bias_lead.mean()),
        "rmse": overall_rmse,
        "spread": overall_spread,
        "ser": overall_spread / overall_rmse if overall_rmse > 0 else float("nan"),
    }
    hist = rank_histogram(np.moveaxis(x, 1, -1), y, seed=seed)
    return VerificationReport(
        crps=crps_lead,
        bias=bias_lead,
        rmse=rmse_lead,
        spread=spread_lead,
        ser=ser_lead,
        crps_map=scores.mean(axis=(0, 1)),
        bias_map=(mean - y).mean(axis=(0, 1)),
        rank_histogram=hist,
        overall=overall,
        metadata={"variable": variable, "method": method, "variable_kind": variable_kind, "samples": n, "members": k, "verifications": int(n * T * H * W)},
    )


def _fmt(v) -> str:
    return repr(float(v))


def write_report(reports: dict[str, VerificationReport], out_dir) -> None:
    """Write side-by-side tables for several methods.

    Files: ``per_lead.csv`` (method, lead_idx, crps, bias, rmse, spread, ser),
    ``per_gridpoint.csv`` (method, lat_idx, lon_idx, crps, bias),
    ``rank_hist.csv`` (method, bin, count), ``overall.csv`` (method, crps,
    bias, rmse, spread, ser) and ``summary.json`` holding the overall scores,
    rank histograms and metadata keyed by method.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "per_lead.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["method", "lead_idx", "crps", "bias", "rmse", "spread", "ser"])
        for name, r in reports.items():
            for t in range(len(r.crps)):
                wr.writerow([name, t] + [_fmt(a[t]) for a in (r.crps, r.bias, r.rmse, r.spread, r.ser)])
    with open(out / "per_gridpoint.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["method", "lat_idx", "lon_idx", "crps", "bias"])
        for name, r in reports.items():
            H, W = r.crps_map.shape
            for i in range(H):
                for j in range(W):
                    wr.writerow([name, i, j, _fmt(r.crps_map[i, j]), _fmt(r.bias_map[i, j])])
    with open(out / "rank_hist.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["method", "bin", "count"])
        for name, r in reports.items():
            for b, cnt in enumerate(r.rank_histogram):
                wr.writerow([name, b, int(cnt)])
    with open(out / "overall.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        keys = ["crps", "bias", "rmse", "spread", "ser"]
        wr.writerow(["method"] + keys)
        for name, r in reports.items():
            wr.writerow([name] + [_fmt(r.overall[k]) for k in keys])
    summary = {
        name: {
            "overall": r.overall,
            "rank_histogram": [int(c) for c in r.rank_histogram],
            "metadata": r.metadata,
        }
        for name, r in reports.items()
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")

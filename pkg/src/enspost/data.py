"""Forecast dataset container, EPPG file format, splitting and a synthetic generator.

EPPG layout (all integers little-endian)::

    magic            6 bytes   b"EPPG1\\n"
    samples,k,t,h,w,c          6 x u32
    target_index               u32
    predictor names            c x (u16 byte length, UTF-8 bytes)
    time_index                 samples x i64
    forecasts                  float32, row-major [samples, k, t, h, w, c]
    observations               float32, row-major [samples, t, h, w]
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

__all__ = [
    "ForecastDataset",
    "SyntheticConfig",
    "Normalizer",
    "EppgFormatError",
    "generate_synthetic",
    "terrain_field",
    "chronological_split",
    "normalize_predictors",
    "save_eppg",
    "load_eppg",
]

EPPG_MAGIC = b"EPPG1\n"


class EppgFormatError(ValueError):
    """Malformed or inconsistent EPPG file."""


@dataclass(frozen=True, eq=False)
class ForecastDataset:
    """Paired ensemble forecasts and gridded observations.

    Attributes
    ----------
    forecasts : ndarray, shape (samples, k, t, h, w, c)
    observations : ndarray, shape (samples, t, h, w)
    predictor_names : tuple of str, length c
    target_index : int
        Channel of ``forecasts`` holding the postprocessed variable.
    time_index : ndarray of int64, strictly increasing, length samples
    """

    forecasts: np.ndarray
    observations: np.ndarray
    predictor_names: tuple[str, ...]
    target_index: int = 0
    time_index: np.ndarray = field(default=None)

    def __post_init__(self):
        fc = np.asarray(self.forecasts, dtype=np.float32)
        obs = np.asarray(self.observations, dtype=np.float32)
        if fc.ndim != 6:
            raise ValueError(f"forecasts must have rank 6 [samples,k,t,h,w,c], got shape {fc.shape}")
        n, k, t, h, w, c = fc.shape
        if obs.shape != (n, t, h, w):
            raise ValueError(f"observations shape {obs.shape} does not match forecasts {(n, t, h, w)}")
        names = tuple(str(s) for s in self.predictor_names)
        if len(names) != c:
            raise ValueError(f"{len(names)} predictor names for {c} channels")
        if not 0 <= self.target_index < c:
            raise ValueError(f"target_index {self.target_index} out of range for {c} predictors")
        ti = np.arange(n, dtype=np.int64) if self.time_index is None else np.asarray(self.time_index, dtype=np.int64)
        if ti.shape != (n,):
            raise ValueError(f"time_index has {ti.size} entries for {n} samples")
        if n > 1 and np.any(np.diff(ti) <= 0):
            raise ValueError("time_index must be strictly increasing")
        object.__setattr__(self, "forecasts", fc)
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "predictor_names", names)
        object.__setattr__(self, "time_index", ti)
        object.__setattr__(self, "target_index", int(self.target_index))

    @property
    def n_samples(self) -> int:
        return self.forecasts.shape[0]

    @property
    def dims(self) -> tuple[int, int, int, int, int, int]:
        return self.forecasts.shape

    @property
    def target_forecasts(self) -> np.ndarray:
        """Ensemble of the target predictor, shape (samples, k, t, h, w)."""
        return self.forecasts[..., self.target_index]

    @property
    def target_name(self) -> str:
        return self.predictor_names[self.target_index]

    def subset(self, index) -> "ForecastDataset":
        index = np.asarray(index)
        return replace(
            self,
            forecasts=self.forecasts[index],
            observations=self.observations[index],
            time_index=self.time_index[index],
        )

    def with_target_only(self, target_forecasts: np.ndarray) -> "ForecastDataset":
        """Dataset holding ``target_forecasts`` as its only channel."""
        return ForecastDataset(
            np.asarray(target_forecasts)[..., None],
            self.observations,
            (self.target_name,),
            0,
            self.time_index,
        )


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    samples: int = 64
    k: int = 11
    t: int = 20
    h: int = 8
    w: int = 8
    c: int = 3
    bias_amplitude: float = 0.0
    underdispersion_factor: float = 1.0
    lead_error_growth: float = 1.0
    terrain_roughness: float = 1.0
    nonnegative: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("samples", "t", "h", "w", "c"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.k < 2:
            raise ValueError(f"k must be >= 2, got {self.k}")
        if not 0 < self.underdispersion_factor <= 1:
            raise ValueError("underdispersion_factor must lie in (0, 1]")
        if self.lead_error_growth < 0 or self.terrain_roughness < 0:
            raise ValueError("lead_error_growth and terrain_roughness must be non-negative")


def terrain_field(config: SyntheticConfig) -> np.ndarray:
    """The static terrain field ``[h, w]`` used by :func:`generate_synthetic`."""
    return _terrain(config, np.random.default_rng(config.seed))


def _terrain(cfg: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(cfg.h), np.arange(cfg.w), indexing="ij")
    field_ = np.zeros((cfg.h, cfg.w))
    scale = max(cfg.h, cfg.w)
    for _ in range(4):
        ci, cj = rng.uniform(0, cfg.h), rng.uniform(0, cfg.w)
        width = rng.uniform(0.15, 0.4) * scale
        amp = rng.uniform(-1.0, 1.0)
        field_ += amp * np.exp(-((ii - ci) ** 2 + (jj - cj) ** 2) / (2 * width**2))
    return cfg.terrain_roughness * field_


def _softplus(x):
    return np.logaddexp(0.0, x)


def generate_synthetic(config: SyntheticConfig) -> ForecastDataset:
    """Draw a gridded ensemble dataset with controllable bias and dispersion.

    The truth is a superposition of sinusoids drifting with lead time on top
    of a terrain-dependent climate. Every forecast member is the truth plus a
    terrain-shaped bias ``bias_amplitude * (1 + terrain)``, a forecast error
    shared by all members and a member perturbation shrunk by
    ``underdispersion_factor``; both error terms have standard deviation
    ``lead_error_growth * (1 + lead / max_lead)``. With factor 1 and no bias
    truth and members are exchangeable. Additional predictors are noisy
    linear transforms of the truth carrying independent error and a terrain
    signature.
    """
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    n, k, T, H, W, C = cfg.samples, cfg.k, cfg.t, cfg.h, cfg.w, cfg.c
    terrain = _terrain(cfg, rng)
    bias = cfg.bias_amplitude * (1.0 + terrain)

    ii, jj = np.meshgrid(np.arange(H) / H, np.arange(W) / W, indexing="ij")
    lead = np.arange(T)
    sigma = cfg.lead_error_growth * (1.0 + lead / max(T - 1, 1))
    sig = sigma[None, :, None, None]

    truth = np.empty((n, T, H, W))
    for s in range(n):
        base = rng.normal(0.0, 3.0) + 0.5 * terrain
        fld = np.broadcast_to(base, (T, H, W)).copy()
        for _ in range(3):
            a = rng.uniform(0.5, 2.0)
            kx, ky = rng.integers(0, 3, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            drift = rng.normal(0.0, 0.3)
            fld += a * np.sin(
                2 * np.pi * (kx * ii + ky * jj)[None] + phase + drift * lead[:, None, None]
            )
        truth[s] = fld

    u = cfg.underdispersion_factor
    shared = rng.standard_normal((n, T, H, W))
    eta = rng.standard_normal((n, k, T, H, W))
    forecasts = np.empty((n, k, T, H, W, C))
    forecasts[..., 0] = (truth + bias + sig * shared)[:, None] + u * sig[:, None] * eta

    for j in range(1, C):
        own = rng.standard_normal((n, T, H, W))
        err = sig * (0.5 * shared + math.sqrt(0.75) * own)
        eta_j = 0.7 * eta + math.sqrt(0.51) * rng.standard_normal((n, k, T, H, W))
        scale = 1.0 + 0.25 * j
        coupling = 1.0 if j % 2 else -0.75
        centre = scale * (truth + err) + coupling * (1.0 + j) * terrain
        forecasts[..., j] = centre[:, None] + scale * u * sig[:, None] * eta_j

    observations = truth
    if cfg.nonnegative:
        forecasts = _softplus(forecasts)
        observations = _softplus(observations)

    names = tuple(["target"] + [f"predictor_{j}" for j in range(1, C)])
    return ForecastDataset(
        forecasts.astype(np.float32),
        observations.astype(np.float32),
        names,
        0,
        np.arange(n, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# splitting and normalization
# ---------------------------------------------------------------------------


def chronological_split(ds: ForecastDataset, train_frac: float, val_frac: float):
    """Contiguous train/validation/test split in time order."""
    if train_frac <= 0 or val_frac <= 0 or train_frac + val_frac >= 1:
        raise ValueError("fractions must be positive and sum to less than 1")
    n = ds.n_samples
    n_train = int(math.floor(n * train_frac + 1e-9))
    n_val = int(math.floor(n * val_frac + 1e-9))
    bounds = {"train": (0, n_train), "validation": (n_train, n_train + n_val), "test": (n_train + n_val, n)}
    for name, (a, b) in bounds.items():
        if b <= a:
            raise ValueError(f"{name} split is empty for {n} samples at fractions {train_frac}/{val_frac}")
    order = np.argsort(ds.time_index, kind="stable")
    return tuple(ds.subset(order[a:b]) for a, b in bounds.values())


@dataclass(frozen=True)
class Normalizer:
    """Per-channel z-score statistics estimated on a training split."""

    mean: np.ndarray
    std: np.ndarray
    target_index: int

    @property
    def target_mean(self) -> float:
        return float(self.mean[self.target_index])

    @property
    def target_std(self) -> float:
        return float(self.std[self.target_index])

    def normalize_forecasts(self, forecasts):
        return ((np.asarray(forecasts, np.float64) - self.mean) / self.std).astype(np.float32)

    def normalize_target(self, values):
        return ((np.asarray(values, np.float64) - self.target_mean) / self.target_std).astype(np.float32)

    def denormalize_target(self, values):
        return (np.asarray(values, np.float64) * self.target_std + self.target_mean).astype(np.float32)

    def apply(self, ds: ForecastDataset) -> ForecastDataset:
        return replace(
            ds,
            forecasts=self.normalize_forecasts(ds.forecasts),
            observations=self.normalize_target(ds.observations),
        )

    @classmethod
    def fit(cls, ds: ForecastDataset) -> "Normalizer":
        if ds.n_samples == 0:
            raise ValueError("cannot estimate normalization on an empty dataset")
        x = ds.forecasts.astype(np.float64).reshape(-1, ds.dims[-1])
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        for name, s in zip(ds.predictor_names, std):
            if not s > 0:
                raise ValueError(f"predictor {name!r} has zero variance on the training split")
        return cls(mean, std, ds.target_index)


def normalize_predictors(train: ForecastDataset, *others: ForecastDataset):
    """Z-score every split with statistics from ``train``.

    Returns
    -------
    normalized : tuple of ForecastDataset
        ``train`` first, then ``others`` in order.
    normalizer : Normalizer
    """
    norm = Normalizer.fit(train)
    return tuple(norm.apply(d) for d in (train,) + others), norm


# ---------------------------------------------------------------------------
# EPPG io
# ---------------------------------------------------------------------------


def save_eppg(ds: ForecastDataset, path) -> None:
    n, k, t, h, w, c = ds.dims
    parts = [EPPG_MAGIC, struct.pack("<7I", n, k, t, h, w, c, ds.target_index)]
    for name in ds.predictor_names:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
    parts.append(ds.time_index.astype("<i8").tobytes())
    parts.append(ds.forecasts.astype("<f4").tobytes())
    parts.append(ds.observations.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_eppg(path) -> ForecastDataset:
    buf = Path(path).read_bytes()
    if buf[: len(EPPG_MAGIC)] != EPPG_MAGIC:
        raise EppgFormatError(f"{path}: not an EPPG file")
    pos = len(EPPG_MAGIC)
    if len(buf) < pos + 28:
        raise EppgFormatError(f"{path}: truncated header: expected at least {pos + 28} bytes, got {len(buf)}")
    n, k, t, h, w, c, target = struct.unpack_from("<7I", buf, pos)
    pos += 28
    names = []
    for _ in range(c):
        if len(buf) < pos + 2:
            raise EppgFormatError(f"{path}: truncated predictor-name table")
        (length,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if len(buf) < pos + length:
            raise EppgFormatError(f"{path}: truncated predictor-name table")
        names.append(buf[pos : pos + length].decode("utf-8"))
        pos += length
    n_fc = n * k * t * h * w * c
    n_obs = n * t * h * w
    expected = pos + 8 * n + 4 * n_fc + 4 * n_obs
    if expected > 2**62:
        raise EppgFormatError(f"{path}: header dimensions overflow ({n},{k},{t},{h},{w},{c})")
    if len(buf) != expected:
        raise EppgFormatError(f"{path}: size mismatch: header implies {expected} bytes, file has {len(buf)}")
    time_index = np.frombuffer(buf, "<i8", n, pos).astype(np.int64)
    pos += 8 * n
    fc = np.frombuffer(buf, "<f4", n_fc, pos).reshape(n, k, t, h, w, c).astype(np.float32)
    pos += 4 * n_fc
    obs = np.frombuffer(buf, "<f4", n_obs, pos).reshape(n, t, h, w).astype(np.float32)
    if not (np.isfinite(fc).all() and np.isfinite(obs).all()):
        raise EppgFormatError(f"{path}: missing (non-finite) values are not supported")
    try:
        return ForecastDataset(fc, obs, tuple(names), target, time_index)
    except ValueError as exc:
        raise EppgFormatError(f"{path}: {exc}") from None

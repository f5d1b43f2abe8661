"""Flat ``key = value`` run configuration shared by all CLI commands.

Blank lines and text after ``#`` are ignored. Every key is declared in
:data:`KEYS`; unknown keys and unparsable values are collected and reported
together in a single :class:`ConfigError`.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable

import numpy as np

from .data import SyntheticConfig
from .mbm import MbmFitConfig
from .model import ModelConfig, TrainConfig
from .scoring import KernelCrpsConfig

__all__ = ["ConfigError", "KEYS", "RunConfig", "parse_config", "derive_seed", "SEED_STREAMS"]


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text

    return parse


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str


_SYN = SyntheticConfig()
_TRAIN = TrainConfig()
_MBM = MbmFitConfig()
_KERNEL = KernelCrpsConfig()

KEYS: dict[str, Key] = {
    "seed": Key(int, 0, "master seed; every random consumer derives its own stream from it"),
    # synthetic data
    "samples": Key(int, _SYN.samples, "number of forecast cases to generate"),
    "members": Key(int, _SYN.k, "ensemble size k"),
    "lead_times": Key(int, _SYN.t, "lead times t"),
    "lat": Key(int, _SYN.h, "grid rows h"),
    "lon": Key(int, _SYN.w, "grid columns w"),
    "predictors": Key(int, _SYN.c, "predictors c (the first is the target variable)"),
    "bias_amplitude": Key(float, _SYN.bias_amplitude, "terrain-dependent additive bias of the raw ensemble"),
    "underdispersion_factor": Key(float, _SYN.underdispersion_factor, "fraction of the true spread kept by the raw ensemble"),
    "lead_error_growth": Key(float, _SYN.lead_error_growth, "relative error growth over the lead times"),
    "terrain_roughness": Key(float, _SYN.terrain_roughness, "amplitude of the terrain field"),
    "nonnegative": Key(_bool, _SYN.nonnegative, "generate a non-negative (wind-speed-like) target"),
    # splitting
    "train_fraction": Key(float, 0.8, "leading fraction of cases used for training"),
    "val_fraction": Key(float, 0.1, "following fraction used for validation; the rest is test"),
    # transformer
    "c_tilde": Key(int, 32, "embedding width"),
    "n_blocks": Key(int, 4, "number of attention + MLP blocks"),
    "h_n": Key(int, 8, "attention heads"),
    "m_n": Key(int, 4, "MLP expansion factor"),
    "variable_kind": Key(_choice("gaussian_target", "nonnegative_target"), "gaussian_target", "target distribution family"),
    "batch_size": Key(int, _TRAIN.batch_size, "cases per optimizer step"),
    "learning_rate": Key(float, _TRAIN.learning_rate, "Adam step size"),
    "patience": Key(int, _TRAIN.patience, "epochs without validation improvement before stopping"),
    "max_epochs": Key(int, _TRAIN.max_epochs, "upper bound on training epochs"),
    "loss_kind": Key(_choice("auto", "gaussian_crps", "kernel_crps"), _TRAIN.loss_kind, "transformer training loss; auto follows variable_kind"),
    "kernel_lambda": Key(float, _KERNEL.lam, "spread penalty weight of the kernel CRPS loss"),
    "kernel_k": Key(float, _KERNEL.k_penalty, "penalized multiple of the ensemble spread"),
    # member-by-member
    "mbm_loss_kind": Key(_choice("auto", "gaussian_crps", "abs_crps_nonnegative"), "auto", "MBM objective; auto follows variable_kind"),
    "mbm_predictors": Key(_choice("all", "target"), _MBM.predictors, "predictors entering the MBM mean"),
    "mbm_max_iter": Key(int, _MBM.max_iter, "optimizer iterations per gridpoint"),
    "mbm_tol": Key(float, _MBM.tol, "optimizer tolerance"),
    "n_jobs": Key(int, _MBM.n_jobs, "worker threads for the MBM fit"),
    # attention maps
    "block": Key(int, 0, "attention block for attention-map"),
    "head": Key(int, 0, "attention head for attention-map"),
    "sample": Key(int, 0, "case index for attention-map"),
    # paths
    "data": Key(str, "", "input EPPG dataset"),
    "checkpoint": Key(str, "", "transformer checkpoint (EPPT1)"),
    "mbm_params": Key(str, "", "MBM parameter CSV"),
    "split": Key(_choice("all", "train", "val", "test"), "test", "which chronological split postprocess/verify/attention-map use"),
}

# Independent random streams derived from the master seed.
SEED_STREAMS = {"generate": 0, "model_init": 1, "shuffle": 2, "mbm": 3, "rank_ties": 4}


def derive_seed(seed: int, consumer: str) -> int:
    """Seed for ``consumer``: first word of ``SeedSequence([seed, stream_id])``."""
    return int(np.random.SeedSequence([seed, SEED_STREAMS[consumer]]).generate_state(1)[0])


def _parse_pairs(pairs: Iterable[tuple[str, str, str]]) -> dict[str, Any]:
    values, problems = {}, []
    for where, key, raw in pairs:
        if key not in KEYS:
            problems.append(f"unknown key {key!r} ({where})")
            continue
        try:
            values[key] = KEYS[key].parse(raw.strip())
        except ValueError as exc:
            problems.append(f"invalid value for {key!r} ({where}): {exc}")
    if problems:
        raise ConfigError("; ".join(problems))
    return values


def _read_file(path) -> list[tuple[str, str, str]]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    pairs, problems = [], []
    for no, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            problems.append(f"line {no}: expected 'key = value'")
            continue
        key, raw = body.split("=", 1)
        pairs.append((f"{path}:{no}", key.strip(), raw))
    if problems:
        raise ConfigError("; ".join(problems))
    return pairs


class RunConfig:
    """Resolved configuration: defaults, then the file, then overrides."""

    def __init__(self, values: dict[str, Any] | None = None):
        self.values = {k: spec.default for k, spec in KEYS.items()}
        self.values.update(values or {})

    def __getitem__(self, key: str):
        return self.values[key]

    def synthetic(self) -> SyntheticConfig:
        v = self.values
        return SyntheticConfig(
            samples=v["samples"], k=v["members"], t=v["lead_times"], h=v["lat"], w=v["lon"], c=v["predictors"],
            bias_amplitude=v["bias_amplitude"], underdispersion_factor=v["underdispersion_factor"],
            lead_error_growth=v["lead_error_growth"], terrain_roughness=v["terrain_roughness"],
            nonnegative=v["nonnegative"], seed=derive_seed(v["seed"], "generate"),
        )

    def model(self, ds) -> ModelConfig:
        v = self.values
        return ModelConfig.for_dataset(
            ds, c_tilde=v["c_tilde"], n_blocks=v["n_blocks"], h_n=v["h_n"], m_n=v["m_n"],
            variable_kind=v["variable_kind"], seed=derive_seed(v["seed"], "model_init") % 2**32,
        )

    def train(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            batch_size=v["batch_size"], learning_rate=v["learning_rate"], patience=v["patience"],
            max_epochs=v["max_epochs"], loss_kind=v["loss_kind"],
            kernel=KernelCrpsConfig(v["kernel_lambda"], v["kernel_k"]), seed=derive_seed(v["seed"], "shuffle"),
        )

    def mbm(self) -> MbmFitConfig:
        v = self.values
        loss = v["mbm_loss_kind"]
        if loss == "auto":
            loss = "gaussian_crps" if v["variable_kind"] == "gaussian_target" else "abs_crps_nonnegative"
        return MbmFitConfig(
            loss_kind=loss, predictors=v["mbm_predictors"], max_iter=v["mbm_max_iter"],
            tol=v["mbm_tol"], seed=derive_seed(v["seed"], "mbm"), n_jobs=v["n_jobs"],
        )


def parse_config(path=None, overrides: Iterable[str] = ()) -> RunConfig:
    """Build a :class:`RunConfig` from an optional file and ``key=value`` overrides."""
    pairs = _read_file(path) if path is not None else []
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        pairs.append(("override", key.strip(), raw))
    return RunConfig(_parse_pairs(pairs))

"""Command-line entry point: ``python3 -m enspost <command> [options]``.

Every command reads the shared run configuration (``--config FILE`` plus
``--set key=value`` overrides) and writes its artifact to ``--out``. Exit
status is 0 on success, 1 for usage and configuration errors and 2 for
runtime failures; failures print one line ``enspost: error[<kind>]: <message>``
to stderr.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, derive_seed, parse_config
from .data import ForecastDataset, chronological_split, generate_synthetic, load_eppg, save_eppg
from .mbm import apply_mbm, fit_mbm, load_mbm_csv, save_mbm_csv
from .model import extract_attention_map, forward, load_checkpoint, save_checkpoint, train
from .verification import verify, write_report

logger = logging.getLogger("enspost")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _split(cfg: RunConfig, ds: ForecastDataset, which: str | None = None) -> ForecastDataset:
    which = which or cfg["split"]
    if which == "all":
        return ds
    parts = dict(zip(("train", "val", "test"), chronological_split(ds, cfg["train_fraction"], cfg["val_fraction"])))
    return parts[which]


def _require(cfg: RunConfig, key: str) -> str:
    if not cfg[key]:
        raise UsageError(f"missing required setting {key!r} (use --{key.replace('_', '-')} or the config file)")
    return cfg[key]


def _load_data(cfg: RunConfig) -> ForecastDataset:
    return load_eppg(_require(cfg, "data"))


def cmd_generate(cfg: RunConfig, out: Path) -> None:
    save_eppg(generate_synthetic(cfg.synthetic()), out)


def cmd_train_transformer(cfg: RunConfig, out: Path) -> None:
    """Train on the train split, early-stop on the validation split.

    Writes the checkpoint to ``out`` and the per-epoch losses to
    ``<out stem>.loss.csv`` next to it.
    """
    ds = _load_data(cfg)
    tr, va = _split(cfg, ds, "train"), _split(cfg, ds, "val")
    config = cfg.model(ds)
    result = train(tr, va, config, cfg.train())
    save_checkpoint(out, result.params, config)
    with open(out.with_suffix(".loss.csv"), "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["epoch", "train_loss", "val_loss", "best"])
        for e, (a, b) in enumerate(zip(result.train_loss, result.val_loss)):
            wr.writerow([e, repr(a), repr(b), int(e == result.best_epoch)])


def cmd_fit_mbm(cfg: RunConfig, out: Path) -> None:
    ds = _split(cfg, _load_data(cfg), "train")
    result = fit_mbm(ds, cfg.mbm())
    if result.flagged.any():
        logger.warning("%d gridpoint(s) kept identity parameters (degenerate ensemble)", int(result.flagged.sum()))
    save_mbm_csv(result.params, out)


def cmd_postprocess(cfg: RunConfig, out: Path) -> None:
    ds = _split(cfg, _load_data(cfg))
    if bool(cfg["checkpoint"]) == bool(cfg["mbm_params"]):
        raise UsageError("postprocess needs exactly one of 'checkpoint' or 'mbm_params'")
    if cfg["checkpoint"]:
        params, config = load_checkpoint(cfg["checkpoint"])
        if config.target_index != ds.target_index:
            raise ValueError("checkpoint and dataset disagree on the target predictor")
        corrected = forward(ds.forecasts, params, config)
    else:
        params = load_mbm_csv(cfg["mbm_params"], ds.target_index, cfg.mbm().nonnegative)
        corrected = apply_mbm(ds.forecasts, params)
    save_eppg(ds.with_target_only(corrected), out)


def _parse_method(spec: str) -> tuple[str, str]:
    name, sep, path = spec.partition("=")
    if not sep or not name or not path:
        raise UsageError(f"method {spec!r} is not of the form NAME=PATH")
    return name, path


def cmd_verify(cfg: RunConfig, out: Path, methods: list[str]) -> None:
    """Score the raw ensemble and every ``NAME=PATH`` corrected ensemble.

    Raw cases are matched to the corrected files through their time index;
    with no corrected files the configured split of the raw data is scored.
    """
    raw = _load_data(cfg)
    parsed = [_parse_method(m) for m in methods]
    if len({n for n, _ in parsed} | {"raw"}) != len(parsed) + 1:
        raise UsageError("method names must be unique and differ from 'raw'")
    corrected = {name: load_eppg(path) for name, path in parsed}
    if corrected:
        times = next(iter(corrected.values())).time_index
        for name, ds in corrected.items():
            if not np.array_equal(ds.time_index, times):
                raise ValueError(f"method {name!r} covers different cases than the others")
        pos = np.searchsorted(raw.time_index, times)
        if np.any(pos >= raw.n_samples) or not np.array_equal(raw.time_index[np.minimum(pos, raw.n_samples - 1)], times):
            raise ValueError("corrected cases are not contained in the raw dataset")
        raw = raw.subset(pos)
    else:
        raw = _split(cfg, raw)
    kind = cfg["variable_kind"]
    seed = derive_seed(cfg["seed"], "rank_ties")
    reports = {"raw": verify(raw.target_forecasts, raw.observations, kind, "raw", raw.target_name, seed)}
    for name, ds in corrected.items():
        if not np.array_equal(ds.observations, raw.observations):
            raise ValueError(f"method {name!r} carries different observations than the raw data")
        reports[name] = verify(ds.target_forecasts, ds.observations, kind, name, raw.target_name, seed)
    write_report(reports, out)


def cmd_attention_map(cfg: RunConfig, out: Path) -> None:
    ds = _split(cfg, _load_data(cfg))
    params, config = load_checkpoint(_require(cfg, "checkpoint"))
    amap = extract_attention_map(ds.forecasts, params, config, cfg["block"], cfg["head"], cfg["sample"])
    with open(out, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["lat_idx", "lon_idx", "value"])
        for i in range(amap.shape[0]):
            for j in range(amap.shape[1]):
                wr.writerow([i, j, repr(float(amap[i, j]))])


COMMANDS = {
    "generate": "write a synthetic EPPG dataset",
    "train-transformer": "train the ensemble transformer; writes a checkpoint and <out>.loss.csv",
    "fit-mbm": "fit member-by-member parameters per gridpoint and lead time",
    "postprocess": "apply a checkpoint or MBM parameters; writes a corrected EPPG",
    "verify": "score raw and corrected ensembles side by side into a report directory",
    "attention-map": "write the query-key attention map of one head as CSV",
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="enspost", description="Ensemble postprocessing: synthetic data, transformer, MBM and verification.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_ in COMMANDS.items():
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", required=True, help="output file or, for verify, directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one configuration key")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        if name != "generate":
            p.add_argument("--data", help="input EPPG dataset")
        if name in ("postprocess", "attention-map"):
            p.add_argument("--checkpoint", help="transformer checkpoint")
        if name == "postprocess":
            p.add_argument("--mbm-params", help="MBM parameter CSV")
        if name == "verify":
            p.add_argument("methods", nargs="*", metavar="NAME=PATH", help="corrected ensembles to compare with raw")
    return parser


def _resolve(args) -> RunConfig:
    overrides = list(args.set)
    for key in ("data", "checkpoint", "mbm_params"):
        value = getattr(args, key, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return parse_config(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
        cfg = _resolve(args)
        out = Path(args.out)
        if args.command == "verify":
            cmd_verify(cfg, out, args.methods)
        else:
            globals()["cmd_" + args.command.replace("-", "_")](cfg, out)
    except (UsageError, ConfigError) as exc:
        print(f"enspost: error[usage]: {_one_line(exc)}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, ArithmeticError, IndexError) as exc:
        print(f"enspost: error[{type(exc).__name__}]: {_one_line(exc)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split()) or type(exc).__name__

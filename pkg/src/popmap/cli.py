"""Command line interface.

One executable, ``popmap``, with subcommands for the full pipeline:

    popmap synth      generate a synthetic world with known ground truth
    popmap validate   load and validate a dataset, print a JSON summary
    popmap train      fit the occupancy model on region-aggregated counts
    popmap predict    write a population raster from a checkpoint
    popmap adjust     rescale a raster to match census counts per region
    popmap disaggregate-buildings   proportional-to-buildings baseline
    popmap mrf        MRF/ICM smoothing baseline
    popmap evaluate   metrics for a raster, or a full CV/transfer protocol
    popmap importance permutation feature importance for a checkpoint

Every option can come from a JSON config file (--config); explicit flags
win over the file, the file wins over built-in defaults. Keys in the file
use the flag spelling without the leading dashes (e.g. "learning-rate").

Logs go to stderr; stdout carries only result paths or data. Each command
writes a run manifest (command line, resolved config, input digests,
outputs, wall time) next to its outputs. Exit codes: 0 ok, 2 usage,
3 validation/data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import (
    DEFAULT_MRF_FEATURES,
    MrfConfig,
    building_disaggregate,
    mrf_disaggregate,
)
from .errors import PopmapError, UsageError, ValidationError
from .evaluate import (
    PROTOCOLS,
    REPORT_COLUMNS,
    ProtocolConfig,
    compute_metrics,
    permutation_importance,
    run_protocol,
)
from .grids import PopulationGrid, aggregate_by_region, dasymetric_adjust
from .io import (
    load_census_csv,
    load_dataset,
    load_grid,
    load_manifest,
    save_grid,
    sha256_file,
)
from .model import load_checkpoint, predict_to_file, save_checkpoint
from .parallel import resolve_threads
from .synth import SynthSpec, write_world
from .train import (
    TRAIN_LOG_COLUMNS,
    TrainConfig,
    build_training_view,
    fit,
    split_records,
)

log = logging.getLogger("popmap")


def _fmt(value) -> str:
    """Stable text for CSV cells: shortest round-trip repr for floats."""
    if isinstance(value, float) or isinstance(value, np.floating):
        return repr(float(value))
    return str(value)


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


class Resolver:
    """Merge CLI flags, a JSON config file, and defaults (in that order)."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.file_config: dict = {}
        self.resolved: dict = {}
        path = getattr(args, "config", None)
        if path is not None:
            try:
                with open(path) as fh:
                    self.file_config = json.load(fh)
            except OSError as exc:
                raise UsageError(f"cannot read config file: {exc}") from exc
            except json.JSONDecodeError as exc:
                raise UsageError(f"config file is not valid JSON: {exc}") from exc
            if not isinstance(self.file_config, dict):
                raise UsageError("config file must hold a JSON object")

    def get(self, name: str, default, cast=None):
        key = name.replace("_", "-")
        value = getattr(self.args, name, None)
        if value is None and key in self.file_config:
            value = self.file_config[key]
        if value is None:
            value = default
        elif cast is not None:
            try:
                value = cast(value)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"bad value for {key!r}: {exc}") from exc
        self.resolved[key] = value
        return value


def _float_list(text) -> tuple[float, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    parts = [p.strip() for p in str(text).split(",") if p.strip()]
    if not parts:
        raise ValueError("empty list")
    return tuple(float(p) for p in parts)


def _str_list(text) -> tuple[str, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(str(v) for v in text)
    parts = [p.strip() for p in str(text).split(",") if p.strip()]
    if not parts:
        raise ValueError("empty list")
    return tuple(parts)


def _write_run_manifest(anchor: Path, command: str, res: Resolver,
                        inputs, outputs, started: float) -> Path:
    """Record how a result was produced, next to the result itself."""
    if anchor.is_dir():
        path = anchor / "run_manifest.json"
    else:
        path = anchor.with_name(anchor.name + ".run.json")
    digests = {}
    for item in inputs:
        p = Path(item)
        if p.is_file():
            digests[str(p)] = sha256_file(p)
    payload = {
        "command": command,
        "argv": sys.argv[1:],
        "config": res.resolved,
        "inputs": digests,
        "outputs": [str(Path(o)) for o in outputs],
        "wall_time_s": round(time.monotonic() - started, 3),
        "version": __version__,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _add_config_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None,
                   help="JSON file with defaults for any flag of this command")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--beta1", type=float, default=None)
    p.add_argument("--beta2", type=float, default=None)
    p.add_argument("--adam-eps", type=float, default=None)
    p.add_argument("--weight-decay-grid", type=str, default=None,
                   help="comma-separated decay values; best val MAPE wins")
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--regions-per-step", type=int, default=None)
    p.add_argument("--augment-prob", type=float, default=None)
    p.add_argument("--eps-log", type=float, default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--use-log-loss", action=argparse.BooleanOptionalAction,
                   default=None, help="log-space L1 region loss (default on)")
    p.add_argument("--use-occupancy", action=argparse.BooleanOptionalAction,
                   default=None,
                   help="predict per-building occupancy (default on)")
    p.add_argument("--use-augmentation", action=argparse.BooleanOptionalAction,
                   default=None,
                   help="pseudo-region merge augmentation (default on)")


def _train_config(res: Resolver, seed: int) -> TrainConfig:
    base = TrainConfig()
    return TrainConfig(
        learning_rate=res.get("learning_rate", base.learning_rate, float),
        beta1=res.get("beta1", base.beta1, float),
        beta2=res.get("beta2", base.beta2, float),
        adam_eps=res.get("adam_eps", base.adam_eps, float),
        weight_decay_grid=res.get("weight_decay_grid", base.weight_decay_grid,
                                  _float_list),
        max_epochs=res.get("max_epochs", base.max_epochs, int),
        patience=res.get("patience", base.patience, int),
        regions_per_step=res.get("regions_per_step", base.regions_per_step, int),
        augment_prob=res.get("augment_prob", base.augment_prob, float),
        eps_log=res.get("eps_log", base.eps_log, float),
        hidden=res.get("hidden", base.hidden, int),
        dropout=res.get("dropout", base.dropout, float),
        use_log_loss=res.get("use_log_loss", base.use_log_loss, bool),
        use_occupancy=res.get("use_occupancy", base.use_occupancy, bool),
        use_augmentation=res.get("use_augmentation", base.use_augmentation,
                                 bool),
        seed=seed,
    )


def _load_datasets(paths):
    datasets = [load_dataset(Path(p)) for p in paths]
    names = [ds.name for ds in datasets]
    if len(set(names)) != len(names):
        raise ValidationError(f"duplicate dataset names: {names}")
    return datasets


def _cmd_synth(args) -> int:
    started = time.monotonic()
    res = Resolver(args)
    base = SynthSpec()
    weights = res.get("occupancy_weights", None, _float_list)
    spec = SynthSpec(
        width=res.get("width", base.width, int),
        height=res.get("height", base.height, int),
        n_covariates=res.get("covariates", base.n_covariates, int),
        n_fine_regions=res.get("fine_regions", base.n_fine_regions, int),
        n_coarse_regions=res.get("coarse_regions", base.n_coarse_regions, int),
        seed=res.get("seed", base.seed, int),
        occupancy_weights=weights,
        occupancy_bias=res.get("occupancy_bias", base.occupancy_bias, float),
        n_building_blobs=res.get("building_blobs", base.n_building_blobs, int),
        building_background=res.get("building_background",
                                    base.building_background, float),
        census_noise=res.get("census_noise", base.census_noise, float),
        dataset_name=res.get("name", None),
    )
    out = Path(args.out)
    manifest_path = write_world(spec, out)
    log.info("synthetic world '%s' written under %s",
             spec.dataset_name or f"synth-{spec.seed}", out)
    _write_run_manifest(out, "synth", res, [], [manifest_path], started)
    print(manifest_path)
    return 0


def _cmd_validate(args) -> int:
    ds = load_dataset(Path(args.manifest))
    summary = {
        "name": ds.name,
        "width": ds.width,
        "height": ds.height,
        "covariates": list(ds.stack.names),
        "built_cells": int(np.count_nonzero(ds.buildings.counts > 0)),
        "fine_regions": len(ds.census_fine),
        "coarse_regions": len(ds.census_coarse),
        "total_count_fine": float(ds.census_fine.count.sum()),
    }
    log.info("dataset %s validates", ds.name)
    print(json.dumps(summary, sort_keys=True))
    return 0


def _cmd_train(args) -> int:
    started = time.monotonic()
    res = Resolver(args)
    seed = res.get("seed", 0, int)
    level = res.get("level", "coarse", str)
    if level not in ("fine", "coarse"):
        raise UsageError(f"unknown supervision level {level!r}")
    val_fraction = res.get("val_fraction", 0.2, float)
    config = _train_config(res, seed)
    datasets = _load_datasets(args.manifest)
    views = [build_training_view(ds, level) for ds in datasets]
    all_records = [r for v in views for r in v.records]
    split_records(all_records, val_fraction, np.random.default_rng(seed))
    result = fit(views, config)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.pckp"
    save_checkpoint(result.params, ckpt)
    log_path = out / "training_log.csv"
    _write_csv(log_path, TRAIN_LOG_COLUMNS,
               [[row[c] for c in TRAIN_LOG_COLUMNS] for row in result.log])
    log.info("best weight decay %r, validation MAPE %.4f",
             result.best_weight_decay, result.best_val_mape)
    _write_run_manifest(out, "train", res, list(args.manifest),
                        [ckpt, log_path], started)
    print(ckpt)
    return 0


def _cmd_predict(args) -> int:
    started = time.monotonic()
    res = Resolver(args)
    window_rows = res.get("window_rows", 256, int)
    manifest_path = Path(args.manifest)
    manifest = load_manifest(manifest_path)
    params = load_checkpoint(Path(args.checkpoint))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    n_built = predict_to_file(params, manifest, manifest_path.parent, out,
                              window_rows=window_rows)
    log.info("predicted %d built cells", n_built)
    _write_run_manifest(out, "predict", res,
                        [manifest_path, args.checkpoint], [out], started)
    print(out)
    return 0


def _cmd_adjust(args) -> int:
    started = time.monotonic()
    res = Resolver(args)
    level = res.get("level", "coarse", str)
    if level not in ("fine", "coarse"):
        raise UsageError(f"unknown census level {level!r}")
    ds = load_dataset(Path(args.manifest))
    values, width, height = load_grid(Path(args.grid))
    if (width, height) != (ds.width, ds.height):
        raise ValidationError(
            f"grid is {width}x{height} but dataset is {ds.width}x{ds.height}")
    raw = PopulationGrid(width, height, values.astype(np.float64))
    regions = ds.regions_fine if level == "fine" else ds.regions_coarse
    census = ds.census_fine if level == "fine" else ds.census_coarse
    adjusted = dasymetric_adjust(raw, regions, census, ds.buildings)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_grid(out, adjusted.values.astype(np.float32), width, height)
    _write_run_manifest(out, "adjust", res, [args.manifest, args.grid],
                        [out], started)
    print(out)
    return 0


def _cmd_disaggregate_buildings(args) -> int:
    started = time.monotonic()
    res = Resolver(args)
    level = res.get("level", "fine", str)
    if level not in ("fine", "coarse"):
        raise UsageError(f"unknown census level {level!r}")
    ds = load_dataset(Path(args.manifest))
    regions = ds.regions_fine if level == "fine" else ds.regions_coarse
    census = ds.census_fine if level == "fine" else ds.census_coarse
    grid = building_disaggregate(ds.buildings, regions, census)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_grid(out, grid.values.astype(np.float32), ds.width, ds.height)
    _write_run_manifest(out, "disaggregate-buildings", res, [args.manifest],
                        [out], started)
    print(out)
    return 0


def _cmd_mrf(args) -> int:
    started = time.monotonic()
    res = Resolver(args)
    level = res.get("level", "fine", str)
    if level not in ("fine", "coarse"):
        raise UsageError(f"unknown census level {level!r}")
    threads = resolve_threads(res.get("threads", None, int))
    config = MrfConfig(
        lam=res.get("lam", 1.0, float),
        k=res.get("k", 8, int),
        features=res.get("features", DEFAULT_MRF_FEATURES, _str_list),
        max_sweeps=res.get("max_sweeps", 100, int),
        tol=res.get("tol", 1e-5, float),
        step=res.get("step", 0.01, float),
    )
    ds = load_dataset(Path(args.manifest))
    regions = ds.regions_fine if level == "fine" else ds.regions_coarse
    census = ds.census_fine if level == "fine" else ds.census_coarse
    grid, trace = mrf_disaggregate(ds.stack, ds.buildings, regions, census,
                                   config, threads=threads, return_trace=True)
    log.info("ICM ran %d sweeps, energy %.6g -> %.6g",
             len(trace) - 1, trace[0], trace[-1])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_grid(out, grid.values.astype(np.float32), ds.width, ds.height)
    _write_run_manifest(out, "mrf", res, [args.manifest], [out], started)
    print(out)
    return 0


def _evaluate_grid(args, res: Resolver, started: float) -> int:
    level = res.get("level", "fine", str)
    if level not in ("fine", "coarse"):
        raise UsageError(f"unknown census level {level!r}")
    ds = load_dataset(Path(args.manifest[0]))
    values, width, height = load_grid(Path(args.grid))
    if (width, height) != (ds.width, ds.height):
        raise ValidationError(
            f"grid is {width}x{height} but dataset is {ds.width}x{ds.height}")
    regions = ds.regions_fine if level == "fine" else ds.regions_coarse
    census = ds.census_fine if level == "fine" else ds.census_coarse
    grid = PopulationGrid(width, height, values.astype(np.float64))
    sums = aggregate_by_region(grid, regions)
    preds = {int(rid): sums.get(int(rid), 0.0) for rid in census.region_id}
    report = compute_metrics(preds, census)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = out / "summary.csv"
    _write_csv(summary, REPORT_COLUMNS,
               [["grid", level, report.r2, report.mae, report.mape,
                 report.n_regions, report.n_excluded_mape, ""]])
    regions_csv = out / "regions.csv"
    _write_csv(regions_csv, ["region_id", "count", "predicted"],
               [[rid, census.count_of(rid), preds[rid]]
                for rid in sorted(preds)])
    _write_run_manifest(out, "evaluate", res, [args.manifest[0], args.grid],
                        [summary, regions_csv], started)
    print(summary)
    return 0


def _evaluate_protocol(args, res: Resolver, started: float) -> int:
    protocol = args.protocol
    seed = res.get("seed", 0, int)
    config = ProtocolConfig(
        train=_train_config(res, seed),
        n_folds=res.get("folds", 5, int),
        seed=seed,
        transfer_repeats=res.get("transfer_repeats", 5, int),
        val_fraction=res.get("val_fraction", 0.2, float),
        holdout=res.get("holdout", None, str),
    )
    datasets = _load_datasets(args.manifest)
    result = run_protocol(datasets, protocol, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = out / "summary.csv"
    _write_csv(summary, REPORT_COLUMNS,
               [[row[c] for c in REPORT_COLUMNS] for row in result.summary_rows()])
    outputs = [summary]
    for rot in result.rotations:
        path = out / f"regions_{rot.label}.csv"
        _write_csv(path, ["region", "count", "predicted"],
                   [[key, rot.counts[j], rot.predictions[j]]
                    for j, key in enumerate(rot.region_keys)])
        outputs.append(path)
    _write_run_manifest(out, "evaluate", res, list(args.manifest),
                        outputs, started)
    print(summary)
    return 0


def _cmd_evaluate(args) -> int:
    started = time.monotonic()
    res = Resolver(args)
    if (args.grid is None) == (args.protocol is None):
        raise UsageError("pass exactly one of --grid or --protocol")
    if args.grid is not None:
        if len(args.manifest) != 1:
            raise UsageError("--grid evaluation takes exactly one --manifest")
        return _evaluate_grid(args, res, started)
    return _evaluate_protocol(args, res, started)


def _cmd_importance(args) -> int:
    started = time.monotonic()
    res = Resolver(args)
    metric = res.get("metric", "mae", str)
    n_repeats = res.get("repeats", 5, int)
    seed = res.get("seed", 0, int)
    threads = resolve_threads(res.get("threads", None, int))
    ds = load_dataset(Path(args.manifest))
    params = load_checkpoint(Path(args.checkpoint))
    result = permutation_importance(params, ds, metric=metric, seed=seed,
                                    n_repeats=n_repeats, threads=threads)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    columns = (["covariate", "metric", "baseline", "mean_score"]
               + [f"score_{r}" for r in range(n_repeats)])
    means = result.mean_scores()
    rows = []
    for d, name in enumerate(ds.stack.names):
        rows.append([name, metric, result.baseline, means[d]]
                    + list(result.scores[d]))
    _write_csv(out, columns, rows)
    log.info("importance ranking (most to least): %s",
             ", ".join(result.ranking()))
    _write_run_manifest(out, "importance", res,
                        [args.manifest, args.checkpoint], [out], started)
    print(out)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="popmap",
        description="Building-occupancy population mapping from "
                    "region-aggregated censuses.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic world")
    _add_config_flag(p)
    p.add_argument("--out", required=True, type=Path,
                   help="output dataset directory")
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--covariates", type=int, default=None)
    p.add_argument("--fine-regions", type=int, default=None)
    p.add_argument("--coarse-regions", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--occupancy-weights", type=str, default=None,
                   help="comma-separated per-covariate weights")
    p.add_argument("--occupancy-bias", type=float, default=None)
    p.add_argument("--building-blobs", type=int, default=None)
    p.add_argument("--building-background", type=float, default=None)
    p.add_argument("--census-noise", type=float, default=None,
                   help="lognormal sigma applied to fine counts")
    p.add_argument("--name", type=str, default=None)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("validate", help="validate a dataset")
    _add_config_flag(p)
    p.add_argument("--manifest", required=True, type=Path)
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("train", help="fit the occupancy model")
    _add_config_flag(p)
    p.add_argument("--manifest", action="append", required=True, type=Path,
                   help="dataset manifest (repeat to pool datasets)")
    p.add_argument("--out", required=True, type=Path,
                   help="output directory for checkpoint and log")
    p.add_argument("--level", choices=["fine", "coarse"], default=None,
                   help="census level used for supervision (default coarse)")
    p.add_argument("--val-fraction", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    _add_train_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="write a population raster")
    _add_config_flag(p)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--window-rows", type=int, default=None,
                   help="raster rows processed per window (default 256)")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("adjust", help="match a raster to census counts")
    _add_config_flag(p)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--grid", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--level", choices=["fine", "coarse"], default=None,
                   help="census level to match (default coarse)")
    p.set_defaults(func=_cmd_adjust)

    p = sub.add_parser("disaggregate-buildings",
                       help="proportional-to-buildings baseline")
    _add_config_flag(p)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--level", choices=["fine", "coarse"], default=None,
                   help="census level to spread (default fine)")
    p.set_defaults(func=_cmd_disaggregate_buildings)

    p = sub.add_parser("mrf", help="MRF/ICM smoothing baseline")
    _add_config_flag(p)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--level", choices=["fine", "coarse"], default=None)
    p.add_argument("--lam", type=float, default=None,
                   help="census term weight (default 1.0)")
    p.add_argument("--k", type=int, default=None,
                   help="neighbors per built cell (default 8)")
    p.add_argument("--features", type=str, default=None,
                   help="comma-separated covariate names for the kNN space")
    p.add_argument("--max-sweeps", type=int, default=None)
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--step", type=float, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=_cmd_mrf)

    p = sub.add_parser("evaluate",
                       help="metrics for a raster or a full protocol")
    _add_config_flag(p)
    p.add_argument("--manifest", action="append", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path,
                   help="output directory for CSV reports")
    p.add_argument("--grid", type=Path, default=None,
                   help="raster to score against the census")
    p.add_argument("--protocol", choices=list(PROTOCOLS), default=None,
                   help="cross-validation protocol to run")
    p.add_argument("--level", choices=["fine", "coarse"], default=None,
                   help="census level for --grid scoring (default fine)")
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--transfer-repeats", type=int, default=None)
    p.add_argument("--val-fraction", type=float, default=None)
    p.add_argument("--holdout", type=str, default=None,
                   help="dataset name held out by the transfer protocol")
    _add_train_flags(p)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("importance", help="permutation feature importance")
    _add_config_flag(p)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="output CSV path")
    p.add_argument("--metric", choices=["r2", "mae", "mape"], default=None)
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=_cmd_importance)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    try:
        return args.func(args)
    except PopmapError as exc:
        message = " ".join(str(exc).split())
        print(f"{exc.category}: {message}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

"""Metrics, spatial cross-validation protocols, permutation importance.

Metrics (region level): R2 = 1 - SSres/SStot, MAE, and MAPE in percent.
Regions with a zero census count are excluded from MAPE only (division by
zero) and counted in ``n_excluded_mape``; they stay in R2 and MAE. R2 is
undefined for constant truth and reported as NaN with a reason.

Protocols over coarse-region folds (default 5, seeded round-robin after a
shuffle; fine regions inherit their parent's fold):

* ``coarse``: train on coarse counts; per rotation 3 folds train / 1 val /
  1 test; predictions are dasymetrically adjusted with the coarse census
  and evaluated on the test fold's fine regions.
* ``fine``: identical folds and evaluation, but training uses fine counts.
  Adjustment stays at the coarse level: the fine counts of test regions
  are the quantity being predicted, so rescaling with them would make the
  evaluation trivially perfect. Coarse counts remain known in both
  supervision scenarios.
* ``transfer``: hold out one dataset entirely; train/val (80/20, seeded)
  on the fine regions of the remaining datasets; evaluate raw, unadjusted
  predictions on every fine region of the held-out dataset; repeated over
  several seeds with mean/std aggregation.
* ``pooled``: the fine protocol over the union of several datasets, with
  folds drawn over the combined coarse regions.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING

import numpy as np

from .errors import NumericError, ValidationError
from .grids import CensusTable, aggregate_by_region, built_mask, dasymetric_adjust
from .io import Dataset
from .model import ModelParams, forward_occupancy, normalize_features, predict_population
from .parallel import thread_map

if TYPE_CHECKING:  # import cycle: train uses metrics_from_arrays
    from .train import TrainConfig

PROTOCOLS = ("coarse", "fine", "transfer", "pooled")
METRIC_NAMES = ("r2", "mae", "mape")

REPORT_COLUMNS = ["protocol", "rotation", "r2", "mae", "mape", "n_regions",
                  "n_excluded_mape", "seed"]


@dataclass
class MetricsReport:
    r2: float
    mae: float
    mape: float
    n_regions: int
    n_excluded_mape: int
    c_mean: float
    r2_undefined_reason: str | None = None

    def value(self, metric: str) -> float:
        if metric not in METRIC_NAMES:
            raise ValidationError(f"unknown metric {metric!r}; pick from {METRIC_NAMES}")
        return getattr(self, metric)


def metrics_from_arrays(c: np.ndarray, c_hat: np.ndarray) -> MetricsReport:
    """Region-level metrics from aligned truth/prediction vectors."""
    c = np.asarray(c, dtype=np.float64)
    c_hat = np.asarray(c_hat, dtype=np.float64)
    if c.shape != c_hat.shape or c.ndim != 1:
        raise ValidationError("counts and predictions must be parallel vectors")
    if c.size == 0:
        raise ValidationError("metrics need at least one region")
    if not np.isfinite(c).all():
        raise NumericError("census counts contain non-finite values")
    if not np.isfinite(c_hat).all():
        raise NumericError("predictions contain non-finite values")

    err = c - c_hat
    mae = float(np.mean(np.abs(err)))
    pos = c > 0
    n_excluded = int(np.count_nonzero(~pos))
    mape = float(100.0 * np.mean(np.abs(err[pos]) / c[pos])) if pos.any() else float("nan")
    c_mean = float(c.mean())
    ss_tot = float(np.sum((c - c_mean) ** 2))
    if ss_tot > 0.0:
        r2 = float(1.0 - np.sum(err**2) / ss_tot)
        reason = None
    else:
        r2 = float("nan")
        reason = "constant-truth"
    return MetricsReport(r2, mae, mape, int(c.size), n_excluded, c_mean, reason)


def compute_metrics(predicted: dict[int, float], truth: CensusTable) -> MetricsReport:
    """Metrics over matching region-id keys; key sets must be identical."""
    truth_ids = set(int(r) for r in truth.region_id)
    pred_ids = set(int(k) for k in predicted)
    if truth_ids != pred_ids:
        extra = sorted(pred_ids - truth_ids)[:5]
        missing = sorted(truth_ids - pred_ids)[:5]
        raise ValidationError(
            f"prediction/truth region ids disagree "
            f"(extra={extra}, missing={missing})"
        )
    ids = np.sort(truth.region_id)
    c = np.array([truth.count_of(int(r)) for r in ids])
    c_hat = np.array([float(predicted[int(r)]) for r in ids])
    return metrics_from_arrays(c, c_hat)


# Fold plans


@dataclass
class FoldPlan:
    """Assignment of coarse regions (or (dataset, region) keys) to folds."""

    n_folds: int
    fold_of: dict

    def roles(self, rotation: int) -> tuple[set[int], int, int]:
        """(train folds, val fold, test fold) for one rotation."""
        if not 0 <= rotation < self.n_folds:
            raise ValidationError(
                f"rotation must be in [0, {self.n_folds}), got {rotation}"
            )
        test = rotation
        val = (rotation + 1) % self.n_folds
        train = set(range(self.n_folds)) - {test, val}
        return train, val, test

    def fold_sizes(self) -> list[int]:
        sizes = [0] * self.n_folds
        for f in self.fold_of.values():
            sizes[f] += 1
        return sizes


def _assign_folds(keys: list, n_folds: int, seed: int) -> dict:
    """Seeded shuffle then round-robin: balanced within one region."""
    if n_folds < 2:
        raise ValidationError("need at least 2 folds")
    if len(keys) < n_folds:
        raise ValidationError(
            f"{len(keys)} regions cannot fill {n_folds} folds"
        )
    keys = sorted(keys)
    perm = np.random.default_rng(seed).permutation(len(keys))
    return {keys[p]: i % n_folds for i, p in enumerate(perm)}


def make_folds(coarse_census: CensusTable, n_folds: int = 5,
               seed: int = 0) -> FoldPlan:
    """Fold plan over coarse regions; fine regions inherit the parent's."""
    ids = [int(r) for r in coarse_census.region_id]
    return FoldPlan(n_folds, _assign_folds(ids, n_folds, seed))


# Protocols


def _default_train_config():
    from .train import TrainConfig

    return TrainConfig()


@dataclass
class ProtocolConfig:
    train: "TrainConfig" = field(default_factory=_default_train_config)
    n_folds: int = 5
    seed: int = 0
    transfer_repeats: int = 5
    val_fraction: float = 0.2
    holdout: str | None = None  # transfer: dataset name; default last


@dataclass
class RotationResult:
    label: str
    report: MetricsReport
    region_keys: list[str]  # "dataset:region_id"
    counts: np.ndarray
    predictions: np.ndarray


@dataclass
class ProtocolResult:
    protocol: str
    seed: int
    rotations: list[RotationResult]
    pooled: MetricsReport | None
    aggregate: dict | None  # transfer: {"mean": {...}, "std": {...}}

    def summary_rows(self) -> list[dict]:
        """Rows for the summary CSV, one per rotation plus the pooled or
        mean/std aggregate rows."""
        rows = []
        for rot in self.rotations:
            r = rot.report
            rows.append({
                "protocol": self.protocol, "rotation": rot.label,
                "r2": r.r2, "mae": r.mae, "mape": r.mape,
                "n_regions": r.n_regions,
                "n_excluded_mape": r.n_excluded_mape, "seed": self.seed,
            })
        if self.pooled is not None:
            r = self.pooled
            rows.append({
                "protocol": self.protocol, "rotation": "pooled",
                "r2": r.r2, "mae": r.mae, "mape": r.mape,
                "n_regions": r.n_regions,
                "n_excluded_mape": r.n_excluded_mape, "seed": self.seed,
            })
        if self.aggregate is not None:
            for label, vals in self.aggregate.items():
                rows.append({
                    "protocol": self.protocol, "rotation": label,
                    "r2": vals["r2"], "mae": vals["mae"], "mape": vals["mape"],
                    "n_regions": vals["n_regions"],
                    "n_excluded_mape": vals["n_excluded_mape"],
                    "seed": self.seed,
                })
        return rows


def _adjusted_fine_sums(params: ModelParams, ds: Dataset) -> dict[int, float]:
    """Predict raw, rescale with the coarse census, sum to fine regions."""
    raw = predict_population(params, ds.stack, ds.buildings)
    adjusted = dasymetric_adjust(raw, ds.regions_coarse, ds.census_coarse,
                                 ds.buildings)
    return aggregate_by_region(adjusted, ds.regions_fine)


def _collect(ds: Dataset, fine_sums: dict[int, float], region_ids) -> tuple:
    keys = [f"{ds.name}:{int(r)}" for r in region_ids]
    c = np.array([ds.census_fine.count_of(int(r)) for r in region_ids])
    c_hat = np.array([fine_sums.get(int(r), 0.0) for r in region_ids])
    return keys, c, c_hat


def _cv_protocol(datasets: list[Dataset], protocol: str,
                 cfg: ProtocolConfig) -> ProtocolResult:
    from .train import build_training_view, fit

    level = "coarse" if protocol == "coarse" else "fine"
    if len(datasets) == 1:
        plan = make_folds(datasets[0].census_coarse, cfg.n_folds, cfg.seed)
        fold_of = {(0, k): v for k, v in plan.fold_of.items()}
    else:
        keys = [(di, int(r)) for di, ds in enumerate(datasets)
                for r in ds.census_coarse.region_id]
        fold_of = _assign_folds(keys, cfg.n_folds, cfg.seed)
    plan = FoldPlan(cfg.n_folds, fold_of)

    rotations = []
    pooled_c, pooled_chat = [], []
    for rotation in range(cfg.n_folds):
        train_folds, val_fold, test_fold = plan.roles(rotation)
        views = []
        for di, ds in enumerate(datasets):
            view = build_training_view(ds, level)
            parents = ds.fine_parent()
            for rec in view.records:
                coarse_id = (rec.region_id if level == "coarse"
                             else parents[rec.region_id])
                fold = fold_of[(di, coarse_id)]
                rec.split = ("test" if fold == test_fold
                             else "val" if fold == val_fold else "train")
            views.append(view)
        result = fit(views, cfg.train)

        keys_all, c_all, chat_all = [], [], []
        for di, ds in enumerate(datasets):
            fine_sums = _adjusted_fine_sums(result.params, ds)
            parents = ds.fine_parent()
            test_ids = [int(r) for r in np.sort(ds.census_fine.region_id)
                        if fold_of[(di, parents[int(r)])] == test_fold]
            keys, c, c_hat = _collect(ds, fine_sums, test_ids)
            keys_all += keys
            c_all.append(c)
            chat_all.append(c_hat)
        c = np.concatenate(c_all)
        c_hat = np.concatenate(chat_all)
        rotations.append(RotationResult(
            str(rotation), metrics_from_arrays(c, c_hat), keys_all, c, c_hat
        ))
        pooled_c.append(c)
        pooled_chat.append(c_hat)

    pooled = metrics_from_arrays(np.concatenate(pooled_c),
                                 np.concatenate(pooled_chat))
    return ProtocolResult(protocol, cfg.seed, rotations, pooled, None)


def _transfer_protocol(datasets: list[Dataset],
                       cfg: ProtocolConfig) -> ProtocolResult:
    from .train import build_training_view, fit, split_records

    if len(datasets) < 2:
        raise ValidationError("transfer protocol needs at least two datasets")
    holdout_name = cfg.holdout or datasets[-1].name
    holdout = next((d for d in datasets if d.name == holdout_name), None)
    if holdout is None:
        raise ValidationError(
            f"holdout dataset {holdout_name!r} not among "
            f"{[d.name for d in datasets]}"
        )
    train_sets = [d for d in datasets if d.name != holdout_name]
    if not train_sets:
        raise ValidationError("transfer protocol has no training datasets")

    rotations = []
    for rep in range(cfg.transfer_repeats):
        rng = np.random.default_rng([cfg.seed, rep])
        views = [build_training_view(ds, "fine") for ds in train_sets]
        pooled_records = [rec for v in views for rec in v.records]
        split_records(pooled_records, cfg.val_fraction, rng)
        rep_seed = int(np.random.SeedSequence([cfg.seed, rep]).generate_state(1)[0])
        result = fit(views, replace(cfg.train, seed=rep_seed))

        # Raw, unadjusted predictions on the held-out dataset.
        raw = predict_population(result.params, holdout.stack, holdout.buildings)
        fine_sums = aggregate_by_region(raw, holdout.regions_fine)
        ids = [int(r) for r in np.sort(holdout.census_fine.region_id)]
        keys, c, c_hat = _collect(holdout, fine_sums, ids)
        rotations.append(RotationResult(
            f"seed{rep}", metrics_from_arrays(c, c_hat), keys, c, c_hat
        ))

    aggregate = {}
    for label, fn in (("mean", np.mean), ("std", np.std)):
        aggregate[label] = {
            "r2": float(fn([r.report.r2 for r in rotations])),
            "mae": float(fn([r.report.mae for r in rotations])),
            "mape": float(fn([r.report.mape for r in rotations])),
            "n_regions": float(fn([r.report.n_regions for r in rotations])),
            "n_excluded_mape": float(fn([r.report.n_excluded_mape
                                         for r in rotations])),
        }
    return ProtocolResult("transfer", cfg.seed, rotations, None, aggregate)


def run_protocol(datasets, protocol: str,
                 cfg: ProtocolConfig | None = None) -> ProtocolResult:
    """Run one evaluation protocol end to end (training included)."""
    if isinstance(datasets, Dataset):
        datasets = [datasets]
    if not datasets:
        raise ValidationError("no datasets given")
    names = [d.name for d in datasets]
    if len(set(names)) != len(names):
        raise ValidationError(f"dataset names must be unique, got {names}")
    if cfg is None:
        cfg = ProtocolConfig()
    if protocol not in PROTOCOLS:
        raise ValidationError(f"unknown protocol {protocol!r}; pick from {PROTOCOLS}")
    if protocol in ("coarse", "fine"):
        if len(datasets) != 1:
            raise ValidationError(
                f"{protocol} protocol runs on exactly one dataset; "
                f"use 'pooled' for a union"
            )
        return _cv_protocol(datasets, protocol, cfg)
    if protocol == "pooled":
        return _cv_protocol(datasets, "pooled", cfg)
    return _transfer_protocol(datasets, cfg)


# Permutation feature importance


@dataclass
class ImportanceResult:
    covariates: list[str]
    metric: str
    baseline: float
    scores: np.ndarray  # (n_covariates, n_repeats), shuffled - baseline

    def mean_scores(self) -> np.ndarray:
        return self.scores.mean(axis=1)

    def ranking(self) -> list[str]:
        """Most important first. Error metrics degrade upward when an
        informative layer is shuffled; r2 degrades downward, so its sign
        is flipped for ranking."""
        means = self.mean_scores()
        if self.metric == "r2":
            means = -means
        order = np.argsort(-means, kind="stable")
        return [self.covariates[i] for i in order]


def _draw_permutation(rng: np.random.Generator, n: int) -> np.ndarray:
    # separated out so tests can force the identity permutation
    return rng.permutation(n)


def permutation_importance(
    params: ModelParams,
    dataset: Dataset,
    metric: str = "mae",
    seed: int = 0,
    n_repeats: int = 5,
    region_ids: list[int] | None = None,
    threads: int = 1,
) -> ImportanceResult:
    """Shuffle one covariate across built cells, re-predict, score.

    Scores are ``shuffled_metric - baseline_metric`` per repeat, computed
    on raw (unadjusted) predictions aggregated to fine regions, optionally
    restricted to held-out ``region_ids``. Z-scoring commutes with
    permutation, so columns are permuted post-normalization.
    """
    if n_repeats < 1:
        raise ValidationError("n_repeats must be >= 1")
    if params.covariates != dataset.stack.names:
        from .errors import CovariateMismatchError

        raise CovariateMismatchError(
            f"model covariates {params.covariates} do not match dataset "
            f"{dataset.stack.names}"
        )
    cells = built_mask(dataset.buildings)
    if cells.size == 0:
        raise ValidationError("dataset has no built cells")
    raw = dataset.stack.values[:, cells].T
    feats = normalize_features(raw, params.stats)
    b = dataset.buildings.counts[cells].astype(np.float64)
    fine_ids_at_cells = dataset.regions_fine.ids[cells].astype(np.int64)

    if region_ids is None:
        region_ids = [int(r) for r in np.sort(dataset.census_fine.region_id)]
    id_list = list(region_ids)
    c = np.array([dataset.census_fine.count_of(r) for r in id_list])
    uniq, inv = np.unique(fine_ids_at_cells, return_inverse=True)
    # position of each evaluation region in the bincount output, -1 if the
    # region has no built cells (its prediction is then exactly 0)
    pos = {int(u): i for i, u in enumerate(uniq)}
    slot = np.array([pos.get(r, -1) for r in id_list])

    def _evaluate(feature_matrix: np.ndarray) -> float:
        occ = forward_occupancy(params, feature_matrix, mode="infer")
        per_cell = occ * b if params.output_mode == "occupancy" else occ
        sums = np.bincount(inv, weights=per_cell, minlength=len(uniq))
        c_hat = np.where(slot >= 0, sums[slot], 0.0)
        return metrics_from_arrays(c, c_hat).value(metric)

    baseline = _evaluate(feats)

    def _score_column(d: int) -> np.ndarray:
        out = np.empty(n_repeats)
        for rep in range(n_repeats):
            rng = np.random.default_rng([seed, d, rep])
            perm = _draw_permutation(rng, len(cells))
            shuffled = feats.copy()
            shuffled[:, d] = feats[perm, d]
            out[rep] = _evaluate(shuffled) - baseline
        return out

    scores = thread_map(_score_column, range(len(params.covariates)), threads)
    return ImportanceResult(list(params.covariates), metric, baseline,
                            np.stack(scores))

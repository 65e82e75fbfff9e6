"""Weakly supervised training from region-aggregated counts.

The training signal is Eq-style aggregate supervision: predicted per-cell
population is summed over each region's built cells and compared to the
region's census count with a log-L1 loss, |log c_hat - log c| (both sides
clamped at eps_log). Optimization is Adam with decoupled weight decay; the
weight decay value is grid searched, one full run per grid entry, and the
run with the best validation MAPE wins. Optional pseudo-region
augmentation replaces a batch region, with probability 0.5, by the merge
of itself and a random other training region (counts summed, built cells
pooled).

Validation MAPE is computed on raw, unadjusted predictions. The best
validation MAPE epoch is checkpointed; training stops early after
``patience`` epochs without improvement.

Ablation switches are first-class config fields: use_log_loss (off: plain
L1 on counts), use_occupancy (off: the network output is persons per cell
directly instead of persons per building), use_augmentation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ValidationError
from .evaluate import metrics_from_arrays
from .grids import OUTSIDE, built_mask
from .io import Dataset
from .model import (
    FeatureStats,
    ModelParams,
    PixelBatch,
    backward,
    compute_feature_stats,
    forward_occupancy,
    init_params,
    normalize_features,
    param_leaves,
)

# Region id used for merged pseudo-regions; never collides with real ids
# because real ids are >= 0.
MERGED_ID = -2


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay_grid: tuple[float, ...] = (0.0, 1e-5, 1e-4, 1e-3)
    max_epochs: int = 1000
    patience: int = 100
    regions_per_step: int = 64
    augment_prob: float = 0.5
    eps_log: float = 1e-8
    seed: int = 0
    hidden: int = 128
    dropout: float = 0.4
    use_log_loss: bool = True
    use_occupancy: bool = True
    use_augmentation: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError("learning rate must be positive")
        if not self.weight_decay_grid:
            raise ValidationError("weight decay grid must be non-empty")
        if any(w < 0 for w in self.weight_decay_grid):
            raise ValidationError("weight decay must be >= 0")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValidationError("max_epochs and patience must be >= 1")
        if self.regions_per_step < 1:
            raise ValidationError("regions_per_step must be >= 1")
        if not 0.0 <= self.augment_prob <= 1.0:
            raise ValidationError("augment_prob must be in [0, 1]")
        if self.eps_log <= 0:
            raise ValidationError("eps_log must be positive")


@dataclass
class RegionRecord:
    """One supervision region: census count plus its built-cell rows."""

    region_id: int
    count: float
    rows: np.ndarray  # int64 indices into the dataset's PixelBatch
    split: str | None = None  # "train" | "val" | "test" | None

    def __post_init__(self):
        self.rows = np.ascontiguousarray(self.rows, dtype=np.int64)
        if self.count < 0:
            raise ValidationError(f"region {self.region_id}: negative count")


@dataclass
class TrainingView:
    """One dataset prepared for training at a given supervision level."""

    name: str
    covariates: list[str]
    roles: list[str]
    raw_features: np.ndarray  # (n, D) float64 at built cells, NaN kept
    cell_index: np.ndarray
    region_ids: np.ndarray  # at the supervision level
    buildings: np.ndarray
    records: list[RegionRecord]
    n_zero_pixel_regions: int
    pixels: PixelBatch | None = None  # filled once stats are known

    def records_in(self, split: str) -> list[RegionRecord]:
        return [r for r in self.records if r.split == split]


def build_training_view(dataset: Dataset, level: str) -> TrainingView:
    """Extract built-cell features and region records at fine/coarse level.

    Census regions whose raster footprint contains no built cell cannot
    contribute a loss term; they are skipped with a warning and counted.
    """
    if level not in ("fine", "coarse"):
        raise ValidationError(f"supervision level must be fine or coarse, got {level!r}")
    regions = dataset.regions_fine if level == "fine" else dataset.regions_coarse
    census = dataset.census_fine if level == "fine" else dataset.census_coarse

    cells = built_mask(dataset.buildings)
    ids = regions.ids[cells].astype(np.int64)
    inside = ids != OUTSIDE
    cells, ids = cells[inside], ids[inside]

    raw = dataset.stack.values[:, cells].T.astype(np.float64)
    b = dataset.buildings.counts[cells].astype(np.float64)

    order = np.argsort(ids, kind="stable")
    cells, ids, raw, b = cells[order], ids[order], raw[order], b[order]

    records = []
    present = {}
    if ids.size:
        uniq, starts = np.unique(ids, return_index=True)
        bounds = np.append(starts, ids.size)
        for i, rid in enumerate(uniq):
            rows = np.arange(bounds[i], bounds[i + 1], dtype=np.int64)
            present[int(rid)] = rows
    n_zero = 0
    for rid in np.sort(census.region_id):
        rid = int(rid)
        if rid in present:
            records.append(RegionRecord(rid, census.count_of(rid), present[rid]))
        else:
            n_zero += 1
    if n_zero:
        warnings.warn(
            f"{dataset.name}: {n_zero} {level} census region(s) contain no "
            f"built cell and are excluded from supervision",
            stacklevel=2,
        )
    roles = (
        [c.normalization for c in dataset.manifest.covariates]
        if dataset.manifest is not None
        else ["zscore"] * dataset.stack.n_layers
    )
    return TrainingView(
        name=dataset.name,
        covariates=list(dataset.stack.names),
        roles=roles,
        raw_features=raw,
        cell_index=cells.astype(np.int64),
        region_ids=ids,
        buildings=b,
        records=records,
        n_zero_pixel_regions=n_zero,
    )


def split_records(records: list[RegionRecord], val_fraction: float,
                  rng: np.random.Generator):
    """Tag records train/val by a seeded shuffle; at least one of each."""
    n = len(records)
    if n < 2:
        raise ValidationError("need at least two regions to split train/val")
    if not 0.0 < val_fraction < 1.0:
        raise ValidationError("val fraction must be in (0, 1)")
    n_val = min(n - 1, max(1, int(round(val_fraction * n))))
    order = rng.permutation(n)
    for i, idx in enumerate(order):
        records[idx].split = "val" if i < n_val else "train"


def log_l1_loss(c_hat: np.ndarray, c: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """|log max(c_hat, eps) - log max(c, eps)| elementwise."""
    c_hat = np.maximum(np.asarray(c_hat, dtype=np.float64), eps)
    c = np.maximum(np.asarray(c, dtype=np.float64), eps)
    return np.abs(np.log(c_hat) - np.log(c))


def merge_pseudo_region(a: RegionRecord, b: RegionRecord) -> RegionRecord:
    """Merge two distinct train regions: counts add, built cells pool."""
    if a is b:
        raise ValidationError("cannot merge a region with itself")
    if a.split != "train" or b.split != "train":
        raise ValidationError("pseudo-region merge needs two train regions")
    return RegionRecord(
        MERGED_ID,
        a.count + b.count,
        np.concatenate([a.rows, b.rows]),
        split="train",
    )


def region_loss_and_grad(
    params: ModelParams,
    pixels: PixelBatch,
    batch: list[RegionRecord],
    config: TrainConfig,
    rng_seed: int,
) -> tuple[float, list[np.ndarray]]:
    """Sum of per-region losses over the batch plus analytic gradients.

    Uses a train-mode forward with the given dropout seed; backward shares
    the same masks. Every record must carry at least one built-cell row.
    """
    if not batch:
        raise ValidationError("empty region batch")
    for r in batch:
        if r.rows.size == 0:
            raise ValidationError(f"region {r.region_id} has no built cells")
    rows = np.concatenate([r.rows for r in batch])
    seg = np.repeat(np.arange(len(batch)), [r.rows.size for r in batch])
    sub = pixels.take(rows)

    occ, cache = forward_occupancy(params, sub, mode="train",
                                   rng_seed=rng_seed, return_cache=True)
    per_cell = occ * sub.buildings if params.output_mode == "occupancy" else occ
    c_hat = np.bincount(seg, weights=per_cell, minlength=len(batch))
    c = np.array([r.count for r in batch], dtype=np.float64)

    eps = config.eps_log
    if config.use_log_loss:
        losses = log_l1_loss(c_hat, c, eps)
        # d|log max(c_hat,eps) - log c|/dc_hat: sign/c_hat above the clamp,
        # flat (0) below it.
        sign = np.sign(np.log(np.maximum(c_hat, eps)) - np.log(np.maximum(c, eps)))
        d_chat = np.where(c_hat > eps, sign / np.maximum(c_hat, eps), 0.0)
    else:
        losses = np.abs(c_hat - c)
        d_chat = np.sign(c_hat - c)
    loss = float(losses.sum())

    d_cell = d_chat[seg]
    if params.output_mode == "occupancy":
        d_cell = d_cell * sub.buildings
    grads = backward(params, cache, d_cell)
    return loss, grads


@dataclass
class _AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0


def _adam_step(params: ModelParams, grads: list[np.ndarray], state: _AdamState,
               config: TrainConfig, weight_decay: float):
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    lr = config.learning_rate
    for leaf, g, m, v in zip(param_leaves(params), grads, state.m, state.v):
        g = g.reshape(leaf.shape)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        update = (m / bc1) / (np.sqrt(v / bc2) + config.adam_eps)
        if weight_decay > 0.0:  # decoupled from the adaptive step
            update = update + weight_decay * leaf
        leaf -= lr * update


@dataclass
class FitResult:
    params: ModelParams
    log: list[dict]  # epoch,step,train_loss,val_mape,val_mae,val_r2,weight_decay,seed
    best_weight_decay: float
    best_val_mape: float
    n_diverged_runs: int


def _validation_arrays(views: list[TrainingView]):
    """Precompute concatenated val rows and segment structure per view."""
    out = []
    for v in views:
        recs = v.records_in("val")
        if not recs:
            out.append(None)
            continue
        rows = np.concatenate([r.rows for r in recs])
        seg = np.repeat(np.arange(len(recs)), [r.rows.size for r in recs])
        counts = np.array([r.count for r in recs], dtype=np.float64)
        out.append((rows, seg, counts, len(recs)))
    return out


def _validation_metrics(params: ModelParams, views, val_structs):
    c_all, chat_all = [], []
    for view, struct in zip(views, val_structs):
        if struct is None:
            continue
        rows, seg, counts, n = struct
        sub = view.pixels.take(rows)
        occ = forward_occupancy(params, sub, mode="infer")
        per_cell = occ * sub.buildings if params.output_mode == "occupancy" else occ
        c_all.append(counts)
        chat_all.append(np.bincount(seg, weights=per_cell, minlength=n))
    report = metrics_from_arrays(np.concatenate(c_all), np.concatenate(chat_all))
    return report.mape, report.mae, report.r2


def _train_one(views: list[TrainingView], config: TrainConfig,
               weight_decay: float, rng: np.random.Generator,
               stats: FeatureStats):
    """One full training run at a fixed weight decay value."""
    output_mode = "occupancy" if config.use_occupancy else "direct"
    params = init_params(
        views[0].covariates,
        seed=int(rng.integers(2**63)),
        hidden=config.hidden,
        dropout=config.dropout,
        stats=stats,
        output_mode=output_mode,
    )
    leaves = param_leaves(params)
    state = _AdamState([np.zeros_like(x) for x in leaves],
                       [np.zeros_like(x) for x in leaves])

    train_recs = [v.records_in("train") for v in views]
    val_structs = _validation_arrays(views)
    if all(s is None for s in val_structs):
        raise ValidationError("no validation regions with built cells")

    best_params = None
    best_mape = np.inf
    since_improve = 0
    log_rows = []
    diverged = False

    for epoch in range(config.max_epochs):
        per_view_batches = []
        for recs in train_recs:
            order = rng.permutation(len(recs))
            chunks = [order[i : i + config.regions_per_step]
                      for i in range(0, len(order), config.regions_per_step)]
            per_view_batches.append(chunks)
        n_rounds = max(len(c) for c in per_view_batches)

        loss_sum = 0.0
        n_seen = 0
        for round_i in range(n_rounds):
            for vi, chunks in enumerate(per_view_batches):
                if round_i >= len(chunks):
                    continue
                recs = train_recs[vi]
                batch = []
                for idx in chunks[round_i]:
                    rec = recs[idx]
                    if (config.use_augmentation and len(recs) >= 2
                            and rng.random() < config.augment_prob):
                        j = int(rng.integers(len(recs) - 1))
                        if j >= idx:
                            j += 1
                        rec = merge_pseudo_region(rec, recs[j])
                    batch.append(rec)
                step_seed = int(rng.integers(2**63))
                try:
                    loss, grads = region_loss_and_grad(
                        params, views[vi].pixels, batch, config, step_seed
                    )
                except NumericError:
                    diverged = True
                    break
                if not np.isfinite(loss):
                    diverged = True
                    break
                _adam_step(params, grads, state, config, weight_decay)
                loss_sum += loss
                n_seen += len(batch)
            if diverged:
                break
        if diverged:
            log_rows.append({
                "epoch": epoch, "step": state.t,
                "train_loss": float("nan"), "val_mape": float("nan"),
                "val_mae": float("nan"), "val_r2": float("nan"),
                "weight_decay": weight_decay, "seed": config.seed,
            })
            break

        try:
            val_mape, val_mae, val_r2 = _validation_metrics(params, views, val_structs)
        except NumericError:
            diverged = True
            log_rows.append({
                "epoch": epoch, "step": state.t,
                "train_loss": loss_sum / max(n_seen, 1), "val_mape": float("nan"),
                "val_mae": float("nan"), "val_r2": float("nan"),
                "weight_decay": weight_decay, "seed": config.seed,
            })
            break
        log_rows.append({
            "epoch": epoch, "step": state.t,
            "train_loss": loss_sum / max(n_seen, 1),
            "val_mape": val_mape, "val_mae": val_mae, "val_r2": val_r2,
            "weight_decay": weight_decay, "seed": config.seed,
        })
        mape_for_rank = val_mape if np.isfinite(val_mape) else np.inf
        if mape_for_rank < best_mape:
            best_mape = mape_for_rank
            best_params = params.copy()
            since_improve = 0
        else:
            since_improve += 1
            if since_improve >= config.patience:
                break

    return best_params, best_mape, log_rows, diverged


def fit(views: list[TrainingView] | TrainingView, config: TrainConfig) -> FitResult:
    """Grid search over weight decay; returns the best-val-MAPE model.

    ``views`` may span several datasets (transfer training); batches then
    interleave round-robin across datasets. Records must already carry
    train/val split tags. Deterministic: identical views + config give an
    identical result, checkpoint bytes included.
    """
    if isinstance(views, TrainingView):
        views = [views]
    if not views:
        raise ValidationError("no training data")
    covs = views[0].covariates
    for v in views:
        if v.covariates != covs:
            raise ValidationError(
                f"datasets disagree on covariates: {covs} vs {v.covariates} "
                f"({v.name})"
            )
        if v.roles != views[0].roles:
            raise ValidationError("datasets disagree on normalization roles")
    n_train = sum(len(v.records_in("train")) for v in views)
    n_val = sum(len(v.records_in("val")) for v in views)
    if n_train == 0 or n_val == 0:
        raise ValidationError(
            f"need train and val regions, have {n_train} train / {n_val} val"
        )

    # Frozen normalization: stats come from training pixels only.
    train_raw = np.concatenate(
        [v.raw_features[np.concatenate([r.rows for r in v.records_in("train")])]
         for v in views if v.records_in("train")]
    )
    stats = compute_feature_stats(train_raw, views[0].roles)
    for v in views:
        v.pixels = PixelBatch(
            normalize_features(v.raw_features, stats),
            v.cell_index, v.region_ids, v.buildings,
        )

    results = []
    log_rows = []
    n_diverged = 0
    for k, wd in enumerate(config.weight_decay_grid):
        rng = np.random.default_rng([config.seed, k])
        best_params, best_mape, rows, diverged = _train_one(views, config, wd, rng, stats)
        log_rows.extend(rows)
        if diverged:
            n_diverged += 1
        if best_params is not None:
            results.append((best_mape, k, wd, best_params))
    if not results:
        raise NumericError(
            "every weight-decay run diverged; no usable model was produced"
        )
    results.sort(key=lambda r: (r[0], r[1]))
    best_mape, _k, best_wd, best_params = results[0]
    return FitResult(best_params, log_rows, best_wd, best_mape, n_diverged)


TRAIN_LOG_COLUMNS = ["epoch", "step", "train_loss", "val_mape", "val_mae",
                     "val_r2", "weight_decay", "seed"]

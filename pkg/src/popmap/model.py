"""Per-pixel occupancy model: a 4-layer MLP with manual backprop.

Architecture: D -> hidden -> hidden -> hidden -> 1, ReLU plus inverted
dropout after each hidden affine layer, softplus on the scalar output so
predicted occupancy is strictly positive. Applied independently per pixel,
this is equivalent to a stack of 1x1 convolutions over the raster.

All parameters and math are float64; rasters on disk stay float32.
Dropout is the inverted flavor: units are kept with probability
``1 - dropout`` and survivors are scaled by ``1 / (1 - dropout)`` at train
time, so inference needs no rescaling. Masks are drawn from a seeded
generator, making every train-mode forward reproducible.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CovariateMismatchError,
    DimensionMismatchError,
    GridFormatError,
    MissingFileError,
    NumericError,
    TruncatedFileError,
    ValidationError,
)
from .grids import OUTSIDE, BuildingGrid, CovariateStack, PopulationGrid, RegionMap, built_mask
from .io import _HEADER as _PGRD_HEADER  # same 16-byte layout, different magic
from .io import open_grid_memmap

DEFAULT_HIDDEN = 128
DEFAULT_DROPOUT = 0.4
N_LAYERS = 4

CKPT_MAGIC = b"PCKP"
CKPT_VERSION = 1

# Standard deviations below this are treated as a constant layer and
# clamped to 1, which zeroes the feature after centering.
STD_FLOOR = 1e-12


def softplus(x: np.ndarray) -> np.ndarray:
    """log(1 + e^x) without overflow; equals x + log1p(e^-x) for x > 0."""
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form stays finite for any input
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class FeatureStats:
    """Per-covariate z-score statistics, frozen at training time."""

    mean: np.ndarray  # (D,) float64
    std: np.ndarray  # (D,) float64, strictly positive

    def __post_init__(self):
        self.mean = np.ascontiguousarray(self.mean, dtype=np.float64)
        self.std = np.ascontiguousarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValidationError("feature stats must be parallel vectors")
        if not np.isfinite(self.mean).all() or not np.isfinite(self.std).all():
            raise ValidationError("feature stats must be finite")
        if (self.std <= 0).any():
            raise ValidationError("feature stds must be strictly positive")


@dataclass
class ModelParams:
    """Weights, biases, and everything needed to reproduce predictions."""

    weights: list[np.ndarray]  # 4 float64 matrices, shapes chain D->...->1
    biases: list[np.ndarray]  # 4 float64 vectors
    stats: FeatureStats
    covariates: list[str]
    dropout: float = DEFAULT_DROPOUT
    output_mode: str = "occupancy"  # "occupancy" (x buildings) | "direct"

    def __post_init__(self):
        if len(self.weights) != N_LAYERS or len(self.biases) != N_LAYERS:
            raise ValidationError(f"model must have exactly {N_LAYERS} layers")
        self.weights = [np.ascontiguousarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.ascontiguousarray(b, dtype=np.float64) for b in self.biases]
        dims = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
                raise ValidationError(f"layer {i}: weight/bias shapes disagree")
            if i > 0 and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ValidationError(f"layer {i}: input dim breaks the chain")
            dims.append(w.shape)
        if dims[0][0] != len(self.covariates):
            raise ValidationError(
                f"first layer expects {dims[0][0]} inputs but there are "
                f"{len(self.covariates)} covariates"
            )
        if dims[-1][1] != 1:
            raise ValidationError("last layer must emit a single value")
        if len(self.stats.mean) != len(self.covariates):
            raise ValidationError("feature stats do not match covariate count")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.output_mode not in ("occupancy", "direct"):
            raise ValidationError(f"unknown output mode {self.output_mode!r}")

    @property
    def n_features(self) -> int:
        return len(self.covariates)

    def dims(self) -> list[tuple[int, int]]:
        return [w.shape for w in self.weights]

    def copy(self) -> "ModelParams":
        return ModelParams(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            stats=FeatureStats(self.stats.mean.copy(), self.stats.std.copy()),
            covariates=list(self.covariates),
            dropout=self.dropout,
            output_mode=self.output_mode,
        )


def param_leaves(params: ModelParams) -> list[np.ndarray]:
    """Flat list [W0, b0, W1, b1, ...]; gradients use the same order."""
    leaves = []
    for w, b in zip(params.weights, params.biases):
        leaves.append(w)
        leaves.append(b)
    return leaves


def init_params(
    covariates: list[str],
    seed: int,
    hidden: int = DEFAULT_HIDDEN,
    dropout: float = DEFAULT_DROPOUT,
    stats: FeatureStats | None = None,
    output_mode: str = "occupancy",
) -> ModelParams:
    """He-uniform weights (limit sqrt(6 / fan_in)), zero biases, seeded."""
    d = len(covariates)
    if d == 0:
        raise ValidationError("need at least one covariate")
    if hidden < 1:
        raise ValidationError("hidden width must be positive")
    rng = np.random.default_rng(seed)
    dims = [(d, hidden), (hidden, hidden), (hidden, hidden), (hidden, 1)]
    weights, biases = [], []
    for fan_in, fan_out in dims:
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out, dtype=np.float64))
    if stats is None:
        stats = FeatureStats(np.zeros(d), np.ones(d))
    return ModelParams(weights, biases, stats, list(covariates), dropout, output_mode)


def compute_feature_stats(raw_features: np.ndarray,
                          roles: list[str] | None = None) -> FeatureStats:
    """Mean/std per covariate over training pixels, NaNs excluded.

    Constant (or all-NaN) layers get mean of the finite values (or 0) and
    std clamped to 1, so they normalize to exactly 0. Layers whose
    manifest role is "none" pass through with mean 0, std 1.
    """
    raw = np.asarray(raw_features, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[0] == 0:
        raise ValidationError("need a non-empty (n, D) feature matrix")
    with np.errstate(all="ignore"), warnings.catch_warnings():
        # all-NaN columns are handled below; silence the nanmean chatter
        warnings.simplefilter("ignore", RuntimeWarning)
        mean = np.nanmean(raw, axis=0)
        std = np.nanstd(raw, axis=0)
    mean = np.where(np.isfinite(mean), mean, 0.0)
    std = np.where(np.isfinite(std) & (std > STD_FLOOR), std, 1.0)
    if roles is not None:
        if len(roles) != raw.shape[1]:
            raise ValidationError("one normalization role per covariate required")
        passthrough = np.array([r == "none" for r in roles])
        mean = np.where(passthrough, 0.0, mean)
        std = np.where(passthrough, 1.0, std)
    return FeatureStats(mean, std)


def normalize_features(raw_features: np.ndarray, stats: FeatureStats) -> np.ndarray:
    """Z-score with frozen stats; non-finite inputs become exactly 0.

    0 is the training mean after centering, so missing covariate values
    are imputed at the mean.
    """
    raw = np.asarray(raw_features, dtype=np.float64)
    z = (raw - stats.mean) / stats.std
    return np.where(np.isfinite(z), z, 0.0)


@dataclass
class PixelBatch:
    """Built-cell rows: normalized features plus per-cell bookkeeping."""

    features: np.ndarray  # (n, D) float64, normalized
    cell_index: np.ndarray  # (n,) int64 flat raster indices
    region_id: np.ndarray  # (n,) int64 at the supervision level
    buildings: np.ndarray  # (n,) float64, strictly positive

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.cell_index = np.ascontiguousarray(self.cell_index, dtype=np.int64)
        self.region_id = np.ascontiguousarray(self.region_id, dtype=np.int64)
        self.buildings = np.ascontiguousarray(self.buildings, dtype=np.float64)
        n = len(self.cell_index)
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValidationError("feature matrix rows must match cell count")
        if len(self.region_id) != n or len(self.buildings) != n:
            raise ValidationError("pixel batch columns have unequal lengths")
        if (self.buildings <= 0).any():
            raise ValidationError("pixel batch rows must have buildings > 0")

    def __len__(self) -> int:
        return len(self.cell_index)

    def take(self, rows: np.ndarray) -> "PixelBatch":
        return PixelBatch(
            self.features[rows],
            self.cell_index[rows],
            self.region_id[rows],
            self.buildings[rows],
        )


def make_pixel_batch(
    stack: CovariateStack,
    buildings: BuildingGrid,
    regions: RegionMap,
    stats: FeatureStats,
    cells: np.ndarray | None = None,
) -> PixelBatch:
    """Gather normalized features for built cells (or the given cells)."""
    if cells is None:
        cells = built_mask(buildings)
    raw = stack.values[:, cells].T  # (n, D) float32 view -> copy
    feats = normalize_features(raw, stats)
    return PixelBatch(
        feats,
        cells.astype(np.int64),
        regions.ids[cells].astype(np.int64),
        buildings.counts[cells].astype(np.float64),
    )


def _check_finite_params(params: ModelParams):
    for leaf in param_leaves(params):
        if not np.isfinite(leaf).all():
            raise NumericError(
                "model parameters contain non-finite values "
                "(training likely diverged)"
            )


def forward_occupancy(
    params: ModelParams,
    batch,
    mode: str = "infer",
    rng_seed: int = 0,
    return_cache: bool = False,
):
    """Occupancy per row. ``batch`` is a PixelBatch or an (n, D) matrix.

    mode "train" applies seeded inverted dropout after every hidden ReLU;
    mode "infer" is deterministic with no dropout. With return_cache the
    second element carries what backward() needs; the cache is only valid
    for the exact call that produced it (same mask draw).
    """
    if mode not in ("train", "infer"):
        raise ValidationError(f"unknown forward mode {mode!r}")
    _check_finite_params(params)
    feats = batch.features if isinstance(batch, PixelBatch) else np.asarray(batch)
    feats = np.ascontiguousarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != params.n_features:
        raise DimensionMismatchError(
            f"expected (n, {params.n_features}) features, got {feats.shape}"
        )
    keep = 1.0 - params.dropout
    use_dropout = mode == "train" and params.dropout > 0.0
    rng = np.random.default_rng(rng_seed) if use_dropout else None

    acts = [feats]  # post-dropout activation entering each layer
    pre = []  # pre-activations z per layer
    masks = [None] * N_LAYERS
    h = feats
    for i in range(N_LAYERS - 1):
        z = h @ params.weights[i] + params.biases[i]
        a = np.maximum(z, 0.0)
        if use_dropout:
            m = (rng.random(a.shape) < keep) / keep  # inverted dropout
            a = a * m
            masks[i] = m
        pre.append(z)
        acts.append(a)
        h = a
    z_out = (h @ params.weights[-1] + params.biases[-1])[:, 0]
    pre.append(z_out)
    occ = softplus(z_out)
    if not return_cache:
        return occ
    cache = {"acts": acts, "pre": pre, "masks": masks}
    return occ, cache


def backward(params: ModelParams, cache: dict, d_occ: np.ndarray) -> list[np.ndarray]:
    """Gradients wrt every parameter, ordered like param_leaves().

    ``d_occ`` is dLoss/dOccupancy per row from the same forward call that
    produced ``cache``. Zero upstream gives exactly zero gradients.
    """
    acts, pre, masks = cache["acts"], cache["pre"], cache["masks"]
    d_occ = np.asarray(d_occ, dtype=np.float64)
    # softplus'(z) = sigmoid(z)
    dz = (d_occ * sigmoid(pre[-1]))[:, None]
    grads = [None] * (2 * N_LAYERS)
    for i in range(N_LAYERS - 1, -1, -1):
        grads[2 * i] = acts[i].T @ dz
        grads[2 * i + 1] = dz.sum(axis=0)
        if i == 0:
            break
        da = dz @ params.weights[i].T
        if masks[i - 1] is not None:
            da = da * masks[i - 1]
        dz = da * (pre[i - 1] > 0.0)
    return grads


def predict_population(
    params: ModelParams,
    stack: CovariateStack,
    buildings: BuildingGrid,
    regions: RegionMap | None = None,
    chunk: int = 65536,
) -> PopulationGrid:
    """Dense prediction: occupancy times building count at built cells.

    Computation is restricted to built cells; everything else is exactly
     0. With ``regions`` given, cells outside all regions are forced to 0
    as well. In "direct" output mode the network output is persons per
    cell already and is not multiplied by the building count.
    """
    if params.covariates != stack.names:
        raise CovariateMismatchError(
            f"model was trained on covariates {params.covariates}, "
            f"dataset provides {stack.names}"
        )
    if (stack.width, stack.height) != (buildings.width, buildings.height):
        raise DimensionMismatchError("stack and buildings disagree on shape")
    cells = built_mask(buildings)
    if regions is not None:
        cells = cells[regions.ids[cells] != OUTSIDE]
    out = np.zeros(stack.width * stack.height, dtype=np.float64)
    for start in range(0, len(cells), chunk):
        part = cells[start : start + chunk]
        raw = stack.values[:, part].T
        feats = normalize_features(raw, params.stats)
        occ = forward_occupancy(params, feats, mode="infer")
        if params.output_mode == "occupancy":
            out[part] = occ * buildings.counts[part].astype(np.float64)
        else:
            out[part] = occ
    return PopulationGrid(stack.width, stack.height, out)


def predict_to_file(
    params: ModelParams,
    manifest,
    root,
    out_path,
    window_rows: int = 256,
    chunk: int = 65536,
) -> int:
    """Streamed file-to-file prediction for grids too large to hold dense.

    Covariate and building rasters are memory-mapped and visited one
    window of rows at a time; only built-cell features are gathered, so
    peak memory is proportional to built cells in a window plus one layer
    row-window. Output is float32 PGRD. Returns the number of built cells
    predicted.
    """
    root = Path(root)
    if params.covariates != manifest.covariate_names():
        raise CovariateMismatchError(
            f"model was trained on covariates {params.covariates}, "
            f"manifest lists {manifest.covariate_names()}"
        )
    width, height = manifest.width, manifest.height
    layer_maps = []
    for entry in manifest.covariates:
        mm, w, h = open_grid_memmap(root / entry.path)
        if (w, h) != (width, height):
            raise DimensionMismatchError(
                f"covariate {entry.name!r}: file is {w}x{h}, manifest says "
                f"{width}x{height}"
            )
        if mm.dtype.kind != "f":
            raise GridFormatError(f"covariate {entry.name!r} must be float32")
        layer_maps.append(mm)
    bmap, w, h = open_grid_memmap(root / manifest.buildings)
    if (w, h) != (width, height):
        raise DimensionMismatchError("buildings grid disagrees with manifest shape")

    n_built = 0
    header = _PGRD_HEADER.pack(b"PGRD", 1, 0, 0, width, height)
    with open(out_path, "wb") as f:
        f.write(header)
        for r0 in range(0, height, window_rows):
            r1 = min(r0 + window_rows, height)
            lo, hi = r0 * width, r1 * width
            bwin = np.asarray(bmap[lo:hi], dtype=np.float64)
            bwin[~np.isfinite(bwin)] = 0.0  # dense ingestion rule
            cells = np.flatnonzero(bwin > 0)
            out = np.zeros(hi - lo, dtype=np.float32)
            if cells.size:
                n_built += cells.size
                raw = np.empty((cells.size, len(layer_maps)), dtype=np.float64)
                for j, mm in enumerate(layer_maps):
                    raw[:, j] = mm[lo:hi][cells]
                feats = normalize_features(raw, params.stats)
                vals = np.empty(cells.size, dtype=np.float64)
                for start in range(0, cells.size, chunk):
                    sl = slice(start, start + chunk)
                    occ = forward_occupancy(params, feats[sl], mode="infer")
                    vals[sl] = occ
                if params.output_mode == "occupancy":
                    vals = vals * bwin[cells]
                out[cells] = vals.astype(np.float32)
            f.write(out.tobytes())
    return n_built


# Checkpoint format: 16-byte header (magic PCKP, version u16, two reserved
# bytes, meta length u32, value count u32), JSON metadata, then the f64
# payload: per layer W then b, followed by feature mean and std.


def save_checkpoint(params: ModelParams, path):
    """Atomic write (temp file + rename); round trips bit-identically."""
    path = Path(path)
    meta = {
        "covariates": list(params.covariates),
        "dims": [list(s) for s in params.dims()],
        "dropout": params.dropout,
        "output_mode": params.output_mode,
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = []
    for w, b in zip(params.weights, params.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").reshape(-1))
        parts.append(np.ascontiguousarray(b, dtype="<f8"))
    parts.append(np.ascontiguousarray(params.stats.mean, dtype="<f8"))
    parts.append(np.ascontiguousarray(params.stats.std, dtype="<f8"))
    payload = np.concatenate(parts)
    header = _PGRD_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, 0, 0,
                               len(meta_bytes), len(payload))
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(header)
            f.write(meta_bytes)
            f.write(payload.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> ModelParams:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        head = f.read(_PGRD_HEADER.size)
        if len(head) < _PGRD_HEADER.size:
            raise TruncatedFileError(f"{path}: incomplete checkpoint header", len(head))
        magic, version, _f, _r, meta_len, n_values = _PGRD_HEADER.unpack(head)
        if magic != CKPT_MAGIC:
            raise GridFormatError(f"{path}: bad magic {magic!r}, not a checkpoint")
        if version != CKPT_VERSION:
            raise GridFormatError(f"{path}: unsupported checkpoint version {version}")
        meta_bytes = f.read(meta_len)
        if len(meta_bytes) < meta_len:
            raise TruncatedFileError(
                f"{path}: checkpoint metadata ends early",
                _PGRD_HEADER.size + len(meta_bytes),
            )
        payload = f.read(n_values * 8)
        if len(payload) < n_values * 8:
            raise TruncatedFileError(
                f"{path}: checkpoint payload ends early",
                _PGRD_HEADER.size + meta_len + len(payload),
            )
    try:
        meta = json.loads(meta_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise GridFormatError(f"{path}: unreadable checkpoint metadata ({e})") from None
    values = np.frombuffer(payload, dtype="<f8")
    dims = [tuple(d) for d in meta["dims"]]
    d = dims[0][0]
    expected = sum(fi * fo + fo for fi, fo in dims) + 2 * d
    if len(values) != expected:
        raise GridFormatError(
            f"{path}: payload has {len(values)} values, dims imply {expected}"
        )
    weights, biases = [], []
    pos = 0
    for fi, fo in dims:
        weights.append(values[pos : pos + fi * fo].reshape(fi, fo).copy())
        pos += fi * fo
        biases.append(values[pos : pos + fo].copy())
        pos += fo
    mean = values[pos : pos + d].copy()
    std = values[pos + d : pos + 2 * d].copy()
    return ModelParams(
        weights=weights,
        biases=biases,
        stats=FeatureStats(mean, std),
        covariates=list(meta["covariates"]),
        dropout=float(meta["dropout"]),
        output_mode=str(meta.get("output_mode", "occupancy")),
    )

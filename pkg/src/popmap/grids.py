"""Raster and census data model plus region-level aggregation primitives.

All grids are stored as flat row-major arrays of ``height * width`` cells;
the flat index of row ``r``, column ``c`` is ``r * width + c``. Region maps
use the sentinel ``OUTSIDE`` (-1) for cells that belong to no region. Such
cells never receive population and are excluded from every sum.

Aggregation and rescaling accumulate in float64 regardless of the storage
dtype of the inputs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatchError,
    RegionCensusError,
    UnknownLayerError,
    ValidationError,
)

OUTSIDE = -1


class ZeroMassFallbackWarning(UserWarning):
    """A region had zero raw mass but a positive census count."""


def _as_flat(values, width: int, height: int, what: str) -> np.ndarray:
    """Accept a (height, width) or flat (height*width,) array, return flat."""
    arr = np.asarray(values)
    if arr.ndim == 2:
        if arr.shape != (height, width):
            raise DimensionMismatchError(
                f"{what}: expected {height}x{width} cells, got shape {arr.shape}"
            )
        arr = arr.reshape(-1)
    elif arr.shape != (height * width,):
        raise DimensionMismatchError(
            f"{what}: expected {height * width} cells, got shape {arr.shape}"
        )
    return arr


@dataclass
class CovariateStack:
    """Named float layers sharing one grid. Layer order is canonical."""

    width: int
    height: int
    names: list[str]
    values: np.ndarray  # (n_layers, height * width) float32

    def __post_init__(self):
        if len(self.names) == 0:
            raise ValidationError("covariate stack needs at least one layer")
        if len(set(self.names)) != len(self.names):
            raise ValidationError(f"duplicate covariate names: {self.names}")
        if any(not n for n in self.names):
            raise ValidationError("covariate names must be non-empty")
        vals = np.asarray(self.values)
        if vals.ndim == 3:  # (layers, height, width)
            vals = vals.reshape(vals.shape[0], -1)
        if vals.shape != (len(self.names), self.height * self.width):
            raise DimensionMismatchError(
                f"covariate stack: expected ({len(self.names)}, "
                f"{self.height * self.width}), got {vals.shape}"
            )
        self.values = np.ascontiguousarray(vals, dtype=np.float32)

    @property
    def n_layers(self) -> int:
        return len(self.names)

    def layer(self, name: str) -> np.ndarray:
        """Flat view of one layer; raises UnknownLayerError for bad names."""
        try:
            return self.values[self.names.index(name)]
        except ValueError:
            raise UnknownLayerError(
                f"no covariate layer named {name!r}; have {self.names}"
            ) from None


@dataclass
class BuildingGrid:
    """Per-cell building counts. Dense: missing data must be ingested as 0."""

    width: int
    height: int
    counts: np.ndarray  # flat float32, >= 0, no NaN

    def __post_init__(self):
        arr = _as_flat(self.counts, self.width, self.height, "building grid")
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        if not np.isfinite(arr).all():
            raise ValidationError("building grid contains non-finite values")
        if (arr < 0).any():
            raise ValidationError("building grid contains negative counts")
        self.counts = arr


@dataclass
class RegionMap:
    """Integer region ids per cell; OUTSIDE (-1) marks no-region cells."""

    width: int
    height: int
    ids: np.ndarray  # flat int32

    def __post_init__(self):
        arr = _as_flat(self.ids, self.width, self.height, "region map")
        if not np.issubdtype(np.asarray(arr).dtype, np.integer):
            raise ValidationError("region map must hold integers")
        arr = np.ascontiguousarray(arr, dtype=np.int32)
        if (arr < OUTSIDE).any():
            raise ValidationError("region ids must be >= -1")
        self.ids = arr

    def present_ids(self) -> np.ndarray:
        """Sorted unique non-sentinel ids present in the raster."""
        u = np.unique(self.ids)
        return u[u != OUTSIDE]


@dataclass
class PopulationGrid:
    """Per-cell population (persons), float64 in memory."""

    width: int
    height: int
    values: np.ndarray  # flat float64

    def __post_init__(self):
        arr = _as_flat(self.values, self.width, self.height, "population grid")
        self.values = np.ascontiguousarray(arr, dtype=np.float64)

    def as_2d(self) -> np.ndarray:
        return self.values.reshape(self.height, self.width)


@dataclass
class CensusTable:
    """Region counts with a parent pointer (-1 for top-level regions).

    Row order is not meaningful; equality is order-independent.
    """

    region_id: np.ndarray  # int64
    parent_id: np.ndarray  # int64
    count: np.ndarray  # float64, finite, >= 0
    _lookup: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.region_id = np.ascontiguousarray(self.region_id, dtype=np.int64)
        self.parent_id = np.ascontiguousarray(self.parent_id, dtype=np.int64)
        self.count = np.ascontiguousarray(self.count, dtype=np.float64)
        if not (len(self.region_id) == len(self.parent_id) == len(self.count)):
            raise ValidationError("census columns have unequal lengths")
        if len(np.unique(self.region_id)) != len(self.region_id):
            raise ValidationError("census table has duplicate region ids")
        if not np.isfinite(self.count).all():
            raise ValidationError("census counts must be finite")
        if (self.count < 0).any():
            raise ValidationError("census counts must be non-negative")
        self._lookup = {
            int(r): float(c) for r, c in zip(self.region_id, self.count)
        }

    def __len__(self) -> int:
        return len(self.region_id)

    def count_of(self, region: int) -> float:
        try:
            return self._lookup[int(region)]
        except KeyError:
            raise RegionCensusError(f"region {region} not in census table") from None

    def has(self, region: int) -> bool:
        return int(region) in self._lookup

    def parent_of(self, region: int) -> int:
        idx = np.flatnonzero(self.region_id == region)
        if len(idx) == 0:
            raise RegionCensusError(f"region {region} not in census table")
        return int(self.parent_id[idx[0]])

    def parent_map(self) -> dict[int, int]:
        return {int(r): int(p) for r, p in zip(self.region_id, self.parent_id)}

    def __eq__(self, other) -> bool:
        if not isinstance(other, CensusTable):
            return NotImplemented
        if len(self) != len(other):
            return False
        a, b = np.argsort(self.region_id), np.argsort(other.region_id)
        return (
            np.array_equal(self.region_id[a], other.region_id[b])
            and np.array_equal(self.parent_id[a], other.parent_id[b])
            and np.array_equal(self.count[a], other.count[b])
        )


def _check_same_shape(a, b, what: str):
    if (a.width, a.height) != (b.width, b.height):
        raise DimensionMismatchError(
            f"{what}: {a.width}x{a.height} vs {b.width}x{b.height}"
        )


def built_mask(buildings: BuildingGrid) -> np.ndarray:
    """Flat indices of cells with at least one building, ascending."""
    return np.flatnonzero(buildings.counts > 0)


def aggregate_by_region(grid: PopulationGrid, regions: RegionMap) -> dict[int, float]:
    """Sum grid values per region id, in float64.

    Returns one entry per non-sentinel id present in the raster; cells
    outside all regions are excluded.
    """
    _check_same_shape(grid, regions, "aggregate_by_region")
    inside = regions.ids != OUTSIDE
    ids = regions.ids[inside]
    if ids.size == 0:
        return {}
    uniq, inv = np.unique(ids, return_inverse=True)
    sums = np.bincount(
        inv, weights=grid.values[inside].astype(np.float64), minlength=len(uniq)
    )
    return {int(u): float(s) for u, s in zip(uniq, sums)}


def dasymetric_adjust(
    raw: PopulationGrid,
    regions: RegionMap,
    census: CensusTable,
    buildings: BuildingGrid | None = None,
) -> PopulationGrid:
    """Rescale each region's cells so its sum matches the census count.

    Within region j with raw sum S_j > 0 every cell is multiplied by
    c_j / S_j. A region with S_j == 0 but c_j > 0 gets c_j spread uniformly
    over its built cells (when ``buildings`` is given and the region has
    any), else uniformly over all its cells; a ZeroMassFallbackWarning is
    emitted per such region. Cells outside all regions are forced to 0.

    Every region id present in the raster must have a census row.
    """
    _check_same_shape(raw, regions, "dasymetric_adjust")
    if buildings is not None:
        _check_same_shape(raw, buildings, "dasymetric_adjust")

    inside = regions.ids != OUTSIDE
    out = np.zeros(raw.values.shape, dtype=np.float64)
    if not inside.any():
        return PopulationGrid(raw.width, raw.height, out)

    ids = regions.ids[inside]
    uniq, inv = np.unique(ids, return_inverse=True)
    missing = [int(u) for u in uniq if not census.has(int(u))]
    if missing:
        raise RegionCensusError(
            f"raster region ids missing from census: {missing[:10]}"
        )
    raw_inside = raw.values[inside]
    sums = np.bincount(inv, weights=raw_inside, minlength=len(uniq))
    targets = np.array([census.count_of(int(u)) for u in uniq], dtype=np.float64)

    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(sums > 0, targets / np.where(sums > 0, sums, 1.0), 0.0)
    out[inside] = raw_inside * scale[inv]

    # Zero-mass regions with a positive count: uniform fallback.
    fallback = np.flatnonzero((sums == 0) & (targets > 0))
    if fallback.size:
        inside_idx = np.flatnonzero(inside)
        for u_pos in fallback:
            cells = inside_idx[inv == u_pos]
            target_cells = cells
            if buildings is not None:
                built = cells[buildings.counts[cells] > 0]
                if built.size:
                    target_cells = built
            out[target_cells] = targets[u_pos] / target_cells.size
            warnings.warn(
                f"region {int(uniq[u_pos])} has zero raw mass; spread "
                f"{targets[u_pos]:g} uniformly over {target_cells.size} cells",
                ZeroMassFallbackWarning,
                stacklevel=2,
            )
    return PopulationGrid(raw.width, raw.height, out)

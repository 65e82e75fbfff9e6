"""Synthetic worlds with known ground truth.

Covariates are smooth seeded cosine-mixture fields standardized to mean 0,
std 1 over the grid. True occupancy is an affine-plus-softplus map of the
covariates, so the truth is exactly realizable by the model family. True
population is occupancy times a Poisson building count drawn from a blobby
urban intensity. Fine regions are seeded Voronoi cells nested exactly
inside coarse Voronoi cells, and the census is the exact region sums of
the true population (optionally with multiplicative lognormal noise at the
fine level; coarse counts are sums of the noisy fine counts, so the
hierarchy invariant holds at any noise level).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .grids import (
    BuildingGrid,
    CensusTable,
    CovariateStack,
    PopulationGrid,
    RegionMap,
    aggregate_by_region,
)
from .io import Dataset, save_dataset, save_grid
from .model import softplus

# Default occupancy coefficients, cycled/truncated to the covariate count.
# Chosen to give clearly heterogeneous occupancy (roughly 0.5 .. 5 persons
# per building across the grid with unit-variance fields).
_WEIGHT_PATTERN = (0.9, -0.6, 0.45, 0.3, 0.0, 0.0)

_N_MODES = 4  # cosine modes per covariate field


@dataclass
class SynthSpec:
    """Everything that determines a synthetic world, seed included."""

    width: int = 96
    height: int = 96
    n_covariates: int = 6
    n_fine_regions: int = 64
    n_coarse_regions: int = 24
    seed: int = 0
    occupancy_weights: tuple[float, ...] | None = None
    occupancy_bias: float = 1.5
    n_building_blobs: int = 6
    building_background: float = 0.25
    census_noise: float = 0.0  # lognormal sigma on fine counts
    dataset_name: str | None = None

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValidationError("grid dims must be positive")
        if self.n_covariates < 1:
            raise ValidationError("need at least one covariate")
        n_cells = self.width * self.height
        if self.n_coarse_regions < 1 or self.n_coarse_regions > n_cells:
            raise ValidationError(
                f"coarse region count {self.n_coarse_regions} exceeds "
                f"cell count {n_cells}"
            )
        if self.n_fine_regions < self.n_coarse_regions:
            raise ValidationError("need at least one fine region per coarse region")
        if self.n_fine_regions > n_cells:
            raise ValidationError(
                f"fine region count {self.n_fine_regions} exceeds "
                f"cell count {n_cells}"
            )
        if self.census_noise < 0:
            raise ValidationError("census noise must be >= 0")
        if self.occupancy_weights is not None:
            w = tuple(float(x) for x in self.occupancy_weights)
            if len(w) != self.n_covariates:
                raise ValidationError(
                    f"need {self.n_covariates} occupancy weights, got {len(w)}"
                )
            self.occupancy_weights = w

    def weights(self) -> np.ndarray:
        if self.occupancy_weights is not None:
            return np.array(self.occupancy_weights, dtype=np.float64)
        reps = -(-self.n_covariates // len(_WEIGHT_PATTERN))
        return np.array((_WEIGHT_PATTERN * reps)[: self.n_covariates],
                        dtype=np.float64)


@dataclass
class GroundTruth:
    """True per-cell quantities the generator knows."""

    population: PopulationGrid  # float64 persons per cell
    occupancy: np.ndarray  # flat float64 persons per building


def _cosine_field(rng: np.random.Generator, width: int, height: int) -> np.ndarray:
    rows, cols = np.meshgrid(
        np.arange(height, dtype=np.float64),
        np.arange(width, dtype=np.float64),
        indexing="ij",
    )
    f = np.zeros((height, width), dtype=np.float64)
    for _ in range(_N_MODES):
        fr = rng.uniform(0.5, 3.0)
        fc = rng.uniform(0.5, 3.0)
        amp = rng.uniform(0.5, 1.5)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        f += amp * np.cos(2.0 * np.pi * (fr * rows / height + fc * cols / width)
                          + phase)
    flat = f.reshape(-1)
    flat = flat - flat.mean()
    std = flat.std()
    if std > 0:
        flat = flat / std
    return flat


def _voronoi_assign(cells: np.ndarray, seeds: np.ndarray, width: int) -> np.ndarray:
    """Nearest-seed label per cell; ties go to the lowest seed index."""
    cr, cc = np.divmod(cells.astype(np.float64), width)
    sr, sc = np.divmod(seeds.astype(np.float64), width)
    d2 = (cr[:, None] - sr[None, :]) ** 2 + (cc[:, None] - sc[None, :]) ** 2
    return np.argmin(d2, axis=1)  # argmin takes the first minimum


def generate(spec: SynthSpec) -> tuple[Dataset, GroundTruth]:
    """Build a complete in-memory dataset plus its ground truth.

    Deterministic: the same spec (seed included) always produces
    bit-identical arrays.
    """
    rng = np.random.default_rng(spec.seed)
    width, height = spec.width, spec.height
    n_cells = width * height

    # Covariate fields, standardized, stored float32 so the on-disk and
    # in-memory values agree exactly.
    names = [f"cov{i:02d}" for i in range(spec.n_covariates)]
    layers = np.empty((spec.n_covariates, n_cells), dtype=np.float32)
    for i in range(spec.n_covariates):
        layers[i] = _cosine_field(rng, width, height).astype(np.float32)
    stack = CovariateStack(width, height, names, layers)

    # Buildings: Poisson counts from background plus gaussian blobs.
    rows, cols = np.meshgrid(
        np.arange(height, dtype=np.float64),
        np.arange(width, dtype=np.float64),
        indexing="ij",
    )
    lam = np.full((height, width), spec.building_background, dtype=np.float64)
    for _ in range(spec.n_building_blobs):
        r = rng.uniform(0, height)
        c = rng.uniform(0, width)
        sigma = rng.uniform(4.0, 10.0)
        amp = rng.uniform(4.0, 10.0)
        lam += amp * np.exp(-((rows - r) ** 2 + (cols - c) ** 2) / (2 * sigma**2))
    counts = rng.poisson(lam.reshape(-1)).astype(np.float32)
    buildings = BuildingGrid(width, height, counts)

    # Coarse Voronoi regions, then nested fine Voronoi inside each.
    all_cells = np.arange(n_cells, dtype=np.int64)
    coarse_seeds = np.sort(rng.choice(n_cells, spec.n_coarse_regions, replace=False))
    coarse_ids = _voronoi_assign(all_cells, coarse_seeds, width).astype(np.int32)

    base = spec.n_fine_regions // spec.n_coarse_regions
    extra = spec.n_fine_regions % spec.n_coarse_regions
    fine_ids = np.full(n_cells, -1, dtype=np.int32)
    fine_parent: dict[int, int] = {}
    next_fine = 0
    for k in range(spec.n_coarse_regions):
        members = np.flatnonzero(coarse_ids == k)
        n_sub = base + (1 if k < extra else 0)
        if n_sub > members.size:
            raise ValidationError(
                f"coarse region {k} has {members.size} cells, cannot hold "
                f"{n_sub} fine regions"
            )
        seeds = np.sort(rng.choice(members, n_sub, replace=False))
        local = _voronoi_assign(members, seeds, width)
        fine_ids[members] = next_fine + local
        for j in range(n_sub):
            fine_parent[next_fine + j] = k
        next_fine += n_sub
    regions_fine = RegionMap(width, height, fine_ids)
    regions_coarse = RegionMap(width, height, coarse_ids)

    # Truth: occupancy from the float32 covariate values (what any
    # consumer of the dataset sees), population = occupancy * buildings.
    w = spec.weights()
    lin = spec.occupancy_bias + layers.astype(np.float64).T @ w
    occupancy = softplus(lin)
    population = occupancy * counts.astype(np.float64)
    truth_grid = PopulationGrid(width, height, population)

    # Census: exact fine sums, optional multiplicative lognormal noise,
    # coarse = sum of (noisy) fine children.
    fine_sums = aggregate_by_region(truth_grid, regions_fine)
    fine_region_ids = np.array(sorted(fine_sums), dtype=np.int64)
    fine_counts = np.array([fine_sums[int(r)] for r in fine_region_ids])
    if spec.census_noise > 0:
        g = rng.standard_normal(len(fine_counts))
        fine_counts = fine_counts * np.exp(spec.census_noise * g)
    fine_parents = np.array([fine_parent[int(r)] for r in fine_region_ids],
                            dtype=np.int64)
    census_fine = CensusTable(fine_region_ids, fine_parents, fine_counts)

    coarse_region_ids = np.arange(spec.n_coarse_regions, dtype=np.int64)
    coarse_counts = np.zeros(spec.n_coarse_regions, dtype=np.float64)
    np.add.at(coarse_counts, fine_parents, fine_counts)
    census_coarse = CensusTable(
        coarse_region_ids,
        np.full(spec.n_coarse_regions, -1, dtype=np.int64),
        coarse_counts,
    )

    name = spec.dataset_name or f"synth-{spec.seed}"
    dataset = Dataset(
        name=name,
        stack=stack,
        buildings=buildings,
        regions_fine=regions_fine,
        regions_coarse=regions_coarse,
        census_fine=census_fine,
        census_coarse=census_coarse,
    )
    return dataset, GroundTruth(truth_grid, occupancy)


def write_world(spec: SynthSpec, out_dir) -> Path:
    """Generate a world and write it to disk; returns the manifest path.

    Ground truth goes alongside the dataset as extra float32 grids
    (true_population.pgrd, true_occupancy.pgrd) not referenced by the
    manifest.
    """
    out_dir = Path(out_dir)
    dataset, truth = generate(spec)
    manifest_path = save_dataset(out_dir, dataset)
    save_grid(out_dir / "true_population.pgrd",
              truth.population.values.astype(np.float32),
              spec.width, spec.height)
    save_grid(out_dir / "true_occupancy.pgrd",
              truth.occupancy.astype(np.float32),
              spec.width, spec.height)
    return manifest_path


@dataclass
class OracleReport:
    """Prediction quality measured against the generator's truth."""

    per_cell_mae: float
    fine_report: object  # MetricsReport; typed loosely to avoid a cycle


def oracle_metrics(predicted: PopulationGrid, truth: GroundTruth,
                   dataset: Dataset) -> OracleReport:
    """Per-cell MAE over all cells plus fine-region metrics vs exact truth.

    The fine-region comparison uses the true region sums (never the
    possibly noisy stored census).
    """
    from .evaluate import compute_metrics

    if predicted.values.shape != truth.population.values.shape:
        raise ValidationError("prediction and truth grids disagree on shape")
    per_cell = float(np.mean(np.abs(predicted.values - truth.population.values)))
    true_sums = aggregate_by_region(truth.population, dataset.regions_fine)
    ids = np.array(sorted(true_sums), dtype=np.int64)
    table = CensusTable(
        ids,
        np.array([dataset.fine_parent()[int(r)] for r in ids], dtype=np.int64),
        np.array([true_sums[int(r)] for r in ids]),
    )
    predicted_sums = aggregate_by_region(predicted, dataset.regions_fine)
    return OracleReport(per_cell, compute_metrics(predicted_sums, table))

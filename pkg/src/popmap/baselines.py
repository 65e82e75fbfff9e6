"""Learning-free baselines: building disaggregation and an MRF smoother.

``building_disaggregate`` spreads each region's census count over its
cells proportionally to building counts; it is exactly the dasymetric
rescale applied to the raw building grid.

``mrf_disaggregate`` refines that initialization with iterated conditional
modes on a Markov random field whose nodes are built cells. The energy is

    E(p) = sum_i sum_{k in Q_i} |p_i - p_k|
         + lambda * sum_j |c_j - sum_{k in A_j} p_k|

with Q_i the k nearest built cells of i in a z-scored feature space and
A_j the built cells of region j. ICM visits built cells in raster order
and tries multiplicative steps p*1.01 and p/1.01, keeping a move only if
it strictly lowers the energy (ties keep the current value), with
immediate (Gauss-Seidel) updates. Energy deltas are tracked incrementally
and resynced against a full recompute every few sweeps to bound float
drift.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ValidationError
from .grids import (
    OUTSIDE,
    BuildingGrid,
    CensusTable,
    CovariateStack,
    PopulationGrid,
    RegionMap,
    built_mask,
    dasymetric_adjust,
)
from .model import compute_feature_stats, normalize_features
from .parallel import thread_map

DEFAULT_MRF_FEATURES = ("building_count", "mean_building_area", "nightlights")


@dataclass
class MrfConfig:
    lam: float = 1.0
    k: int = 8
    features: tuple[str, ...] = DEFAULT_MRF_FEATURES
    max_sweeps: int = 100
    tol: float = 1e-5  # relative energy improvement below this stops
    step: float = 0.01  # multiplicative proposal size
    recompute_every: int = 10  # sweeps between full energy recomputes
    drift_tol: float = 1e-6  # allowed relative drift of the running energy

    def __post_init__(self):
        if self.lam < 0:
            raise ValidationError("lambda must be >= 0")
        if self.k < 1:
            raise ValidationError("k must be >= 1")
        if not self.features:
            raise ValidationError("need at least one MRF feature layer")
        if self.step <= 0:
            raise ValidationError("step must be positive")
        if self.max_sweeps < 1:
            raise ValidationError("max_sweeps must be >= 1")
        if self.tol < 0 or self.drift_tol <= 0:
            raise ValidationError("tolerances must be positive")
        if self.recompute_every < 1:
            raise ValidationError("recompute_every must be >= 1")


@dataclass
class KnnGraph:
    """Exact k-nearest-neighbor lists over built cells.

    ``nodes[i]`` is the flat raster index of node i (ascending), and
    ``neighbors[i]`` holds node positions (indices into ``nodes``), never
    the node itself. Distance ties are broken toward the lower node
    position, i.e. the lower cell index.
    """

    nodes: np.ndarray  # (n,) int64 flat cell indices
    neighbors: np.ndarray  # (n, k) int64 node positions

    def __post_init__(self):
        self.nodes = np.ascontiguousarray(self.nodes, dtype=np.int64)
        self.neighbors = np.ascontiguousarray(self.neighbors, dtype=np.int64)
        n = len(self.nodes)
        if self.neighbors.ndim != 2 or self.neighbors.shape[0] != n:
            raise ValidationError("neighbor table must have one row per node")
        if n and (self.neighbors == np.arange(n)[:, None]).any():
            raise ValidationError("self-loops are not allowed")

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]


def building_disaggregate(buildings: BuildingGrid, regions: RegionMap,
                          census: CensusTable) -> PopulationGrid:
    """Proportional-to-buildings disaggregation of the census.

    Identical to dasymetric_adjust applied to the raw building grid,
    including the uniform fallback for regions without buildings.
    """
    raw = PopulationGrid(buildings.width, buildings.height,
                         buildings.counts.astype(np.float64))
    return dasymetric_adjust(raw, regions, census, buildings)


def build_knn_graph(stack: CovariateStack, buildings: BuildingGrid,
                    config: MrfConfig, threads: int = 1,
                    chunk: int = 512) -> KnnGraph:
    """Exact brute-force kNN over built cells in z-scored feature space.

    Features are the named stack layers, z-scored over the built cells
    themselves (NaN imputed as 0 after scoring). With fewer than k+1 built
    cells every other cell is a neighbor; fewer than 2 built cells is an
    error. Distance computation is exact per coordinate, so identical
    feature rows tie at distance zero and resolve by cell index.
    """
    if (stack.width, stack.height) != (buildings.width, buildings.height):
        raise ValidationError("stack and buildings disagree on shape")
    cells = built_mask(buildings)
    n = len(cells)
    if n < 2:
        raise ValidationError(f"kNN graph needs at least 2 built cells, have {n}")
    raw = np.stack([stack.layer(name)[cells] for name in config.features],
                   axis=1).astype(np.float64)
    stats = compute_feature_stats(raw)
    feats = normalize_features(raw, stats)
    k = min(config.k, n - 1)

    cols = [np.ascontiguousarray(feats[:, f]) for f in range(feats.shape[1])]

    def _chunk_neighbors(start: int) -> np.ndarray:
        stop = min(start + chunk, n)
        m = stop - start
        d2 = np.zeros((m, n), dtype=np.float64)
        for col in cols:  # exact per-coordinate differences keep ties exact
            d2 += (col[start:stop, None] - col[None, :]) ** 2
        d2[np.arange(m), np.arange(start, stop)] = np.inf  # no self-loops
        order = np.argsort(d2, axis=1, kind="stable")  # ties: lower index
        return order[:, :k]

    parts = thread_map(_chunk_neighbors, range(0, n, chunk), threads)
    return KnnGraph(cells.astype(np.int64), np.vstack(parts))


def mrf_energy(p: np.ndarray, graph: KnnGraph, regions: RegionMap,
               census: CensusTable, lam: float = 1.0) -> float:
    """Total MRF energy for node values ``p`` aligned with graph.nodes.

    The census term runs over every region present in the raster; regions
    whose built-cell sum is zero contribute |c_j| (changing nothing a node
    move could fix, but part of the objective).
    """
    p = np.asarray(p, dtype=np.float64)
    if p.shape != graph.nodes.shape:
        raise ValidationError("p must have one value per graph node")
    if lam < 0:
        raise ValidationError("lambda must be >= 0")
    pairwise = float(np.abs(p[:, None] - p[graph.neighbors]).sum())
    node_regions = regions.ids[graph.nodes]
    sums = {}
    inside = node_regions != OUTSIDE
    for rid, val in zip(node_regions[inside], p[inside]):
        sums[int(rid)] = sums.get(int(rid), 0.0) + float(val)
    census_term = 0.0
    for rid in regions.present_ids():
        census_term += abs(census.count_of(int(rid)) - sums.get(int(rid), 0.0))
    return pairwise + lam * census_term


def mrf_disaggregate(
    stack: CovariateStack,
    buildings: BuildingGrid,
    regions: RegionMap,
    census: CensusTable,
    config: MrfConfig | None = None,
    threads: int = 1,
    return_trace: bool = False,
):
    """ICM refinement of the building-count disaggregation.

    Returns the refined PopulationGrid (with ``return_trace`` also the
    per-sweep energy trace, full initial energy first). The energy never
    increases: only strictly improving moves are applied. Stops at a local
    optimum (no moves in a sweep), at relative improvement below tol, or
    at max_sweeps.
    """
    config = config or MrfConfig()
    init = building_disaggregate(buildings, regions, census)
    graph = build_knn_graph(stack, buildings, config, threads=threads)
    nodes = graph.nodes
    nb = graph.neighbors
    n = len(nodes)

    p = init.values[nodes].copy()
    node_regions = regions.ids[nodes].astype(np.int64)

    # incoming edges: for node i, which nodes list i as a neighbor
    src = np.repeat(np.arange(n, dtype=np.int64), graph.k)
    dst = nb.reshape(-1)
    order = np.argsort(dst, kind="stable")
    in_src = src[order]
    in_counts = np.bincount(dst, minlength=n)
    in_ptr = np.concatenate([[0], np.cumsum(in_counts)])

    # census bookkeeping: region slot per node, running sums
    region_ids = sorted(int(r) for r in np.unique(node_regions) if r != OUTSIDE)
    slot_of = {rid: i for i, rid in enumerate(region_ids)}
    slots = np.array([slot_of.get(int(r), -1) for r in node_regions])
    targets = np.array([census.count_of(r) for r in region_ids], dtype=np.float64)
    sums = np.zeros(len(region_ids))
    np.add.at(sums, slots[slots >= 0], p[slots >= 0])

    lam = config.lam
    up_f = 1.0 + config.step
    energy = mrf_energy(p, graph, regions, census, lam)
    trace = [energy]

    for sweep in range(config.max_sweeps):
        moved = 0
        for i in range(n):
            pi = p[i]
            if pi == 0.0:
                continue  # multiplicative steps cannot leave zero
            out_nb = p[nb[i]]
            in_nb = p[in_src[in_ptr[i]:in_ptr[i + 1]]]
            s = slots[i]
            best_delta = 0.0
            best_value = pi
            base_out = np.abs(pi - out_nb).sum()
            base_in = np.abs(in_nb - pi).sum()
            if s >= 0:
                base_cens = abs(targets[s] - sums[s])
            for cand in (pi * up_f, pi / up_f):
                delta = (np.abs(cand - out_nb).sum() - base_out
                         + np.abs(in_nb - cand).sum() - base_in)
                if s >= 0:
                    delta += lam * (abs(targets[s] - (sums[s] - pi + cand))
                                    - base_cens)
                if delta < best_delta:
                    best_delta = delta
                    best_value = cand
            if best_value != pi:
                p[i] = best_value
                if s >= 0:
                    sums[s] += best_value - pi
                energy += best_delta
                moved += 1
        trace.append(energy)
        if (sweep + 1) % config.recompute_every == 0:
            full = mrf_energy(p, graph, regions, census, lam)
            drift = abs(full - energy) / max(1.0, abs(full))
            if drift > config.drift_tol:
                raise NumericError(
                    f"incremental MRF energy drifted by {drift:.3e} "
                    f"(> {config.drift_tol:.1e}) after sweep {sweep + 1}"
                )
            energy = full
            trace[-1] = energy
        if moved == 0:
            break
        prev, cur = trace[-2], trace[-1]
        if (prev - cur) < config.tol * max(abs(prev), 1e-300):
            break

    out = init.values.copy()
    out[nodes] = p
    grid = PopulationGrid(buildings.width, buildings.height, out)
    if return_trace:
        return grid, trace
    return grid

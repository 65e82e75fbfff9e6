"""Population mapping from building footprints and region censuses.

A small numpy stack for disaggregating census counts onto raster grids:
a per-pixel occupancy model trained on region-aggregated counts, the
dasymetric rescaling step, learning-free baselines, evaluation protocols
with spatially blocked folds, and permutation feature importance.
"""

__version__ = "0.1.0"

from .baselines import (
    KnnGraph,
    MrfConfig,
    build_knn_graph,
    building_disaggregate,
    mrf_disaggregate,
    mrf_energy,
)
from .errors import (
    CensusFormatError,
    GridFormatError,
    NumericError,
    PopmapError,
    UsageError,
    ValidationError,
)
from .evaluate import (
    FoldPlan,
    ImportanceResult,
    MetricsReport,
    ProtocolConfig,
    ProtocolResult,
    compute_metrics,
    make_folds,
    metrics_from_arrays,
    permutation_importance,
    run_protocol,
)
from .grids import (
    OUTSIDE,
    BuildingGrid,
    CensusTable,
    CovariateStack,
    PopulationGrid,
    RegionMap,
    aggregate_by_region,
    built_mask,
    dasymetric_adjust,
)
from .io import (
    Dataset,
    DatasetManifest,
    load_census_csv,
    load_dataset,
    load_grid,
    load_manifest,
    open_grid_memmap,
    save_census_csv,
    save_dataset,
    save_grid,
    save_manifest,
)
from .model import (
    FeatureStats,
    ModelParams,
    compute_feature_stats,
    forward_occupancy,
    init_params,
    load_checkpoint,
    normalize_features,
    predict_population,
    predict_to_file,
    save_checkpoint,
)
from .synth import GroundTruth, SynthSpec, generate, oracle_metrics, write_world
from .train import TrainConfig, TrainingView, build_training_view, fit

__all__ = [
    "__version__",
    "BuildingGrid", "CensusTable", "CovariateStack", "PopulationGrid",
    "RegionMap", "OUTSIDE", "aggregate_by_region", "built_mask",
    "dasymetric_adjust",
    "Dataset", "DatasetManifest", "load_census_csv", "load_dataset",
    "load_grid", "load_manifest", "open_grid_memmap", "save_census_csv",
    "save_dataset", "save_grid", "save_manifest",
    "FeatureStats", "ModelParams", "compute_feature_stats",
    "forward_occupancy", "init_params", "load_checkpoint",
    "normalize_features", "predict_population", "predict_to_file",
    "save_checkpoint",
    "TrainConfig", "TrainingView", "build_training_view", "fit",
    "KnnGraph", "MrfConfig", "build_knn_graph", "building_disaggregate",
    "mrf_disaggregate", "mrf_energy",
    "FoldPlan", "ImportanceResult", "MetricsReport", "ProtocolConfig",
    "ProtocolResult", "compute_metrics", "make_folds", "metrics_from_arrays",
    "permutation_importance", "run_protocol",
    "GroundTruth", "SynthSpec", "generate", "oracle_metrics", "write_world",
    "PopmapError", "UsageError", "ValidationError", "NumericError",
    "GridFormatError", "CensusFormatError",
]

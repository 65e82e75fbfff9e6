"""On-disk formats: PGRD binary grids, census CSV, dataset manifests.

PGRD layout (little-endian throughout):

    offset 0   4 bytes   magic b"PGRD"
    offset 4   u16       format version (1)
    offset 6   u8        dtype code: 0 = float32, 1 = int32
    offset 7   u8        reserved (0)
    offset 8   u32       width in cells
    offset 12  u32       height in cells
    offset 16  payload   height*width values, row-major

The payload is written verbatim from the array buffer, so round trips are
bit-exact including NaN payloads and signed zeros. The fixed 16-byte header
makes files seekable and memory-mappable.

Census CSV: header ``region_id,parent_id,count``; ids are integers
(parent -1 for top-level regions), counts are non-negative finite reals.
Row order carries no meaning.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    CensusInconsistencyError,
    DimensionMismatchError,
    DuplicateRegionError,
    GridFormatError,
    MalformedRowError,
    ManifestError,
    MissingFileError,
    NegativeCountError,
    RegionCensusError,
    TruncatedFileError,
    ValidationError,
)
from .grids import (
    OUTSIDE,
    BuildingGrid,
    CensusTable,
    CovariateStack,
    PopulationGrid,
    RegionMap,
)

PGRD_MAGIC = b"PGRD"
PGRD_VERSION = 1
_HEADER = struct.Struct("<4sHBBII")  # magic, version, dtype, reserved, w, h

DTYPE_F32 = 0
DTYPE_I32 = 1
_CODE_TO_DTYPE = {DTYPE_F32: np.dtype("<f4"), DTYPE_I32: np.dtype("<i4")}
_KIND_TO_CODE = {"f": DTYPE_F32, "i": DTYPE_I32}

CENSUS_HEADER = ["region_id", "parent_id", "count"]

# Hierarchical consistency: child sums must match the parent count within
# this absolute tolerance (counts are stored as reals).
HIERARCHY_TOL = 0.5


def save_grid(path, values, width: int | None = None, height: int | None = None):
    """Write a PGRD file. ``values`` is (height, width) or flat with dims.

    The array dtype picks the on-disk dtype: float32 or int32. Anything
    else is rejected rather than silently cast.
    """
    arr = np.asarray(values)
    if arr.ndim == 2:
        height, width = arr.shape
        arr = arr.reshape(-1)
    elif width is None or height is None:
        raise ValidationError("flat grid values need explicit width and height")
    if arr.shape != (height * width,):
        raise DimensionMismatchError(
            f"grid payload: expected {height * width} cells, got {arr.shape}"
        )
    code = _KIND_TO_CODE.get(arr.dtype.kind)
    if code is None or arr.dtype.itemsize != 4:
        raise GridFormatError(
            f"unsupported grid dtype {arr.dtype}; cast to float32 or int32 first"
        )
    arr = np.ascontiguousarray(arr, dtype=_CODE_TO_DTYPE[code])
    header = _HEADER.pack(PGRD_MAGIC, PGRD_VERSION, code, 0, width, height)
    with open(path, "wb") as f:
        f.write(header)
        f.write(arr.tobytes())


def _read_header(f, path) -> tuple[np.dtype, int, int]:
    head = f.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise TruncatedFileError(f"{path}: incomplete PGRD header", len(head))
    magic, version, code, _reserved, width, height = _HEADER.unpack(head)
    if magic != PGRD_MAGIC:
        raise GridFormatError(f"{path}: bad magic {magic!r}, not a PGRD file")
    if version != PGRD_VERSION:
        raise GridFormatError(f"{path}: unsupported PGRD version {version}")
    if code not in _CODE_TO_DTYPE:
        raise GridFormatError(f"{path}: unknown dtype code {code}")
    if width == 0 or height == 0:
        raise GridFormatError(f"{path}: zero-sized grid {width}x{height}")
    return _CODE_TO_DTYPE[code], width, height


def load_grid(path) -> tuple[np.ndarray, int, int]:
    """Read a PGRD file; returns (flat values, width, height).

    Values come back with the file's dtype (little-endian float32/int32),
    bit-exact with what was written.
    """
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"grid file not found: {path}")
    with open(path, "rb") as f:
        dtype, width, height = _read_header(f, path)
        expected = width * height * dtype.itemsize
        payload = f.read(expected)
        if len(payload) < expected:
            raise TruncatedFileError(
                f"{path}: payload ends early, expected {expected} bytes",
                _HEADER.size + len(payload),
            )
    values = np.frombuffer(payload, dtype=dtype).copy()
    return values, width, height


def open_grid_memmap(path) -> tuple[np.memmap, int, int]:
    """Memory-map a PGRD payload read-only; returns (flat memmap, w, h)."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"grid file not found: {path}")
    with open(path, "rb") as f:
        dtype, width, height = _read_header(f, path)
    expected = _HEADER.size + width * height * dtype.itemsize
    actual = path.stat().st_size
    if actual < expected:
        raise TruncatedFileError(
            f"{path}: payload ends early, expected {expected} bytes", actual
        )
    mm = np.memmap(path, dtype=dtype, mode="r", offset=_HEADER.size,
                   shape=(width * height,))
    return mm, width, height


def load_census_csv(path) -> CensusTable:
    """Parse a census CSV, validating every row with its line number."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"census file not found: {path}")
    region_ids, parent_ids, counts = [], [], []
    seen = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedRowError(f"{path}: empty census file", 1) from None
        if header != CENSUS_HEADER:
            raise MalformedRowError(
                f"{path}: header must be {','.join(CENSUS_HEADER)!r}, "
                f"got {','.join(header)!r}",
                1,
            )
        for line, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise MalformedRowError(
                    f"{path}: expected 3 columns, got {len(row)}", line
                )
            try:
                rid = int(row[0])
                pid = int(row[1])
                cnt = float(row[2])
            except ValueError:
                raise MalformedRowError(
                    f"{path}: cannot parse row {row!r}", line
                ) from None
            if not np.isfinite(cnt):
                raise MalformedRowError(
                    f"{path}: count must be finite, got {row[2]}", line
                )
            if cnt < 0:
                raise NegativeCountError(
                    f"{path}: negative count {cnt:g} for region {rid}", line
                )
            if rid in seen:
                raise DuplicateRegionError(
                    f"{path}: duplicate region_id {rid}, first seen on "
                    f"line {seen[rid]}",
                    line,
                )
            seen[rid] = line
            region_ids.append(rid)
            parent_ids.append(pid)
            counts.append(cnt)
    if not region_ids:
        raise MalformedRowError(f"{path}: census table has no rows", 2)
    return CensusTable(
        np.array(region_ids, dtype=np.int64),
        np.array(parent_ids, dtype=np.int64),
        np.array(counts, dtype=np.float64),
    )


def save_census_csv(path, table: CensusTable):
    """Write a census CSV sorted by region id, LF line endings."""
    order = np.argsort(table.region_id)
    with open(path, "w", newline="\n", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CENSUS_HEADER)
        for i in order:
            writer.writerow(
                [int(table.region_id[i]), int(table.parent_id[i]),
                 repr(float(table.count[i]))]
            )


def validate_census_hierarchy(fine: CensusTable, coarse: CensusTable):
    """Check parent links and the child-sum-equals-parent invariant."""
    coarse_ids = set(int(r) for r in coarse.region_id)
    child_sums = {rid: 0.0 for rid in coarse_ids}
    for rid, pid, cnt in zip(fine.region_id, fine.parent_id, fine.count):
        pid = int(pid)
        if pid not in coarse_ids:
            raise CensusInconsistencyError(
                f"fine region {int(rid)} points at parent {pid}, "
                f"which is not in the coarse census"
            )
        child_sums[pid] += float(cnt)
    for rid in coarse.region_id:
        rid = int(rid)
        delta = abs(child_sums[rid] - coarse.count_of(rid))
        if delta > HIERARCHY_TOL:
            raise CensusInconsistencyError(
                f"coarse region {rid}: child counts sum to "
                f"{child_sums[rid]:g} but parent count is "
                f"{coarse.count_of(rid):g} (|delta| = {delta:g} > "
                f"{HIERARCHY_TOL})"
            )


@dataclass
class CovariateEntry:
    name: str
    path: str
    normalization: str = "zscore"  # "zscore" | "none"


@dataclass
class DatasetManifest:
    """JSON manifest tying together the files of one dataset."""

    dataset_name: str
    width: int
    height: int
    covariates: list[CovariateEntry]
    buildings: str
    regions_fine: str
    regions_coarse: str
    census_fine: str
    census_coarse: str

    def covariate_names(self) -> list[str]:
        return [c.name for c in self.covariates]


def _require(obj: dict, key: str, path):
    if key not in obj:
        raise ManifestError(f"{path}: manifest missing key {key!r}")
    return obj[key]


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"manifest not found: {path}")
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: not valid JSON ({e})") from None
    if not isinstance(doc, dict):
        raise ManifestError(f"{path}: manifest must be a JSON object")
    covs = _require(doc, "covariates", path)
    if not isinstance(covs, list) or not covs:
        raise ManifestError(f"{path}: covariates must be a non-empty list")
    entries = []
    for c in covs:
        if not isinstance(c, dict) or "name" not in c or "path" not in c:
            raise ManifestError(
                f"{path}: each covariate needs 'name' and 'path', got {c!r}"
            )
        norm = c.get("normalization", "zscore")
        if norm not in ("zscore", "none"):
            raise ManifestError(
                f"{path}: covariate {c['name']!r} has unknown "
                f"normalization {norm!r}"
            )
        entries.append(CovariateEntry(str(c["name"]), str(c["path"]), norm))
    regions = _require(doc, "regions", path)
    census = _require(doc, "census", path)
    for blob, what in ((regions, "regions"), (census, "census")):
        if not isinstance(blob, dict) or "fine" not in blob or "coarse" not in blob:
            raise ManifestError(f"{path}: {what} must map 'fine' and 'coarse' to paths")
    return DatasetManifest(
        dataset_name=str(_require(doc, "dataset_name", path)),
        width=int(_require(doc, "width", path)),
        height=int(_require(doc, "height", path)),
        covariates=entries,
        buildings=str(_require(doc, "buildings", path)),
        regions_fine=str(regions["fine"]),
        regions_coarse=str(regions["coarse"]),
        census_fine=str(census["fine"]),
        census_coarse=str(census["coarse"]),
    )


def save_manifest(path, manifest: DatasetManifest):
    doc = {
        "dataset_name": manifest.dataset_name,
        "width": manifest.width,
        "height": manifest.height,
        "covariates": [
            {"name": c.name, "path": c.path, "normalization": c.normalization}
            for c in manifest.covariates
        ],
        "buildings": manifest.buildings,
        "regions": {"fine": manifest.regions_fine, "coarse": manifest.regions_coarse},
        "census": {"fine": manifest.census_fine, "coarse": manifest.census_coarse},
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


@dataclass
class Dataset:
    """One fully loaded dataset. ``manifest``/``root`` are None for
    in-memory datasets that never touched disk."""

    name: str
    stack: CovariateStack
    buildings: BuildingGrid
    regions_fine: RegionMap
    regions_coarse: RegionMap
    census_fine: CensusTable
    census_coarse: CensusTable
    manifest: DatasetManifest | None = None
    root: Path | None = None

    def __post_init__(self):
        shapes = {
            "covariates": (self.stack.width, self.stack.height),
            "buildings": (self.buildings.width, self.buildings.height),
            "fine regions": (self.regions_fine.width, self.regions_fine.height),
            "coarse regions": (self.regions_coarse.width, self.regions_coarse.height),
        }
        if len(set(shapes.values())) != 1:
            raise DimensionMismatchError(f"dataset grids disagree on shape: {shapes}")
        _check_region_coverage(self.regions_fine, self.census_fine, "fine")
        _check_region_coverage(self.regions_coarse, self.census_coarse, "coarse")
        validate_census_hierarchy(self.census_fine, self.census_coarse)

    @property
    def width(self) -> int:
        return self.stack.width

    @property
    def height(self) -> int:
        return self.stack.height

    def fine_parent(self) -> dict[int, int]:
        return self.census_fine.parent_map()


def _check_region_coverage(regions: RegionMap, census: CensusTable, what: str):
    present = regions.present_ids()
    missing = [int(r) for r in present if not census.has(int(r))]
    if missing:
        raise RegionCensusError(
            f"{what} region ids in raster but not in census: {missing[:10]}"
        )


def _load_layer(root: Path, rel: str, manifest: DatasetManifest, what: str,
                want_kind: str) -> np.ndarray:
    values, w, h = load_grid(root / rel)
    if (w, h) != (manifest.width, manifest.height):
        raise DimensionMismatchError(
            f"{what} ({rel}): file is {w}x{h}, manifest says "
            f"{manifest.width}x{manifest.height}"
        )
    if values.dtype.kind != want_kind:
        kinds = {"f": "float32", "i": "int32"}
        raise GridFormatError(
            f"{what} ({rel}): expected a {kinds[want_kind]} grid, "
            f"got {values.dtype}"
        )
    return values


def load_dataset(manifest_path) -> Dataset:
    """Load and validate everything a manifest references.

    Checks: files exist, dims match the manifest, dtypes are right,
    raster region ids all have census rows, and the fine census sums to
    the coarse census within the hierarchy tolerance.
    """
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    root = manifest_path.parent

    layers = np.empty(
        (len(manifest.covariates), manifest.height * manifest.width),
        dtype=np.float32,
    )
    for i, entry in enumerate(manifest.covariates):
        layers[i] = _load_layer(root, entry.path, manifest,
                                f"covariate {entry.name!r}", "f")
    stack = CovariateStack(manifest.width, manifest.height,
                           manifest.covariate_names(), layers)

    bvals = _load_layer(root, manifest.buildings, manifest, "buildings", "f")
    # Dense-grid ingestion rule: missing building data means zero buildings.
    bvals = np.where(np.isfinite(bvals), bvals, np.float32(0.0))
    buildings = BuildingGrid(manifest.width, manifest.height, bvals)

    rfine = RegionMap(manifest.width, manifest.height,
                      _load_layer(root, manifest.regions_fine, manifest,
                                  "fine regions", "i"))
    rcoarse = RegionMap(manifest.width, manifest.height,
                        _load_layer(root, manifest.regions_coarse, manifest,
                                    "coarse regions", "i"))
    cfine = load_census_csv(root / manifest.census_fine)
    ccoarse = load_census_csv(root / manifest.census_coarse)

    return Dataset(
        name=manifest.dataset_name,
        stack=stack,
        buildings=buildings,
        regions_fine=rfine,
        regions_coarse=rcoarse,
        census_fine=cfine,
        census_coarse=ccoarse,
        manifest=manifest,
        root=root,
    )


def save_dataset(root, dataset: Dataset, manifest_name: str = "manifest.json") -> Path:
    """Write a complete dataset (grids, CSVs, manifest) under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, name in enumerate(dataset.stack.names):
        rel = f"cov_{i:02d}.pgrd"
        save_grid(root / rel, dataset.stack.values[i],
                  dataset.width, dataset.height)
        entries.append(CovariateEntry(name, rel))
    save_grid(root / "buildings.pgrd", dataset.buildings.counts,
              dataset.width, dataset.height)
    save_grid(root / "regions_fine.pgrd", dataset.regions_fine.ids,
              dataset.width, dataset.height)
    save_grid(root / "regions_coarse.pgrd", dataset.regions_coarse.ids,
              dataset.width, dataset.height)
    save_census_csv(root / "census_fine.csv", dataset.census_fine)
    save_census_csv(root / "census_coarse.csv", dataset.census_coarse)
    manifest = DatasetManifest(
        dataset_name=dataset.name,
        width=dataset.width,
        height=dataset.height,
        covariates=entries,
        buildings="buildings.pgrd",
        regions_fine="regions_fine.pgrd",
        regions_coarse="regions_coarse.pgrd",
        census_fine="census_fine.csv",
        census_coarse="census_coarse.csv",
    )
    manifest_path = root / manifest_name
    save_manifest(manifest_path, manifest)
    return manifest_path


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()

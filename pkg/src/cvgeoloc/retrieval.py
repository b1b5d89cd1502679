"""Cell embedding database, exact search and R@N<50m evaluation."""

from __future__ import annotations

import csv
import struct
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geodesy import CellIndex, GeoPoint, RegionLayout, cell_center, cells_in_box, haversine
from .model import ModelParams, embed_cells
from .raster import GeoRaster, extract_lods, patch_specs_for_cell

__all__ = [
    "EmbeddingDatabase", "RetrievalResult", "EmptyRegionError", "DatabaseFormatError",
    "COVERAGE_NONE", "COVERAGE_PARTIAL", "COVERAGE_FULL",
    "build_database", "row_scores", "knn_exact", "knn_exact_batch", "recall_at_n_within",
    "hits_within", "grouped_recall", "score_grid", "write_score_grid", "write_results_csv",
]

MAGIC = b"GCDB"
VERSION = 1
_HEADER = struct.Struct("<4sIddIQ")

COVERAGE_NONE, COVERAGE_PARTIAL, COVERAGE_FULL = 0, 1, 2


class EmptyRegionError(ValueError):
    pass


class DatabaseFormatError(ValueError):
    pass


def _record_dtype(embed_dim: int) -> np.dtype:
    return np.dtype([("band", "<i4"), ("step", "<i4"), ("coverage", "u1"), ("vec", "<f4", (embed_dim,))])


class EmbeddingDatabase:
    """Cell embeddings in single precision, sorted by (band, step)."""

    def __init__(self, layout: RegionLayout, cells: np.ndarray, vectors: np.ndarray,
                 coverage: np.ndarray | None = None, check_norm: bool = True):
        cells = np.asarray(cells, dtype=np.int32).reshape(-1, 2)
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.ndim != 2 or len(vectors) != len(cells):
            raise ValueError("need one embedding per cell")
        if coverage is None:
            coverage = np.full(len(cells), COVERAGE_FULL, dtype=np.uint8)
        coverage = np.asarray(coverage, dtype=np.uint8)
        if len(cells) and len(np.unique(cells, axis=0)) != len(cells):
            raise ValueError("duplicate cell in database")
        if check_norm and len(vectors):
            dev = np.abs(np.linalg.norm(vectors.astype(np.float64), axis=1) - 1.0)
            if dev.max() > 1e-3:
                raise ValueError(f"embeddings are not unit norm (max deviation {dev.max():.2e})")
        order = np.lexsort((cells[:, 1], cells[:, 0]))
        self.layout = layout
        self.cells = cells[order]
        self.vectors = vectors[order]
        self.coverage = coverage[order]
        for a in (self.cells, self.vectors, self.coverage):
            a.setflags(write=False)
        self._centers = None

    @property
    def embed_dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.cells)

    def cell(self, k: int) -> CellIndex:
        return CellIndex(int(self.cells[k, 0]), int(self.cells[k, 1]))

    def index_of(self, cell: CellIndex) -> int:
        k = np.flatnonzero((self.cells[:, 0] == cell.band) & (self.cells[:, 1] == cell.step))
        if not len(k):
            raise KeyError(cell)
        return int(k[0])

    @property
    def centers(self) -> np.ndarray:
        """(count, 2) cell center latitude/longitude in radians."""
        if self._centers is None:
            self._centers = np.array([cell_center(self.cell(k), self.layout) for k in range(len(self))],
                                     dtype=np.float64).reshape(-1, 2)
        return self._centers

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(MAGIC, VERSION, self.layout.cell_size, self.layout.earth_radius,
                            self.embed_dim, len(self))
        rec = np.empty(len(self), dtype=_record_dtype(self.embed_dim))
        rec["band"], rec["step"] = self.cells[:, 0], self.cells[:, 1]
        rec["coverage"] = self.coverage
        rec["vec"] = self.vectors
        return head + rec.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "EmbeddingDatabase":
        if len(data) < _HEADER.size:
            raise DatabaseFormatError("file too short for a GCDB header")
        magic, version, l, r, dim, count = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise DatabaseFormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise DatabaseFormatError(f"unsupported GCDB version {version}")
        dt = _record_dtype(dim)
        if len(data) != _HEADER.size + count * dt.itemsize:
            raise DatabaseFormatError("record section size does not match the header")
        rec = np.frombuffer(data, dtype=dt, count=count, offset=_HEADER.size)
        cells = np.stack([rec["band"], rec["step"]], axis=1)
        return cls(RegionLayout(l, r), cells, rec["vec"].copy(), rec["coverage"].copy())

    def write(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def read(cls, path) -> "EmbeddingDatabase":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def _coverage_flag(fraction: float) -> int:
    if fraction <= 0.0:
        return COVERAGE_NONE
    return COVERAGE_FULL if fraction >= 1.0 else COVERAGE_PARTIAL


def build_database(params: ModelParams, layout: RegionLayout, raster: GeoRaster,
                   region_box: tuple[GeoPoint, GeoPoint], lod_n: int, lod_d0: float,
                   lod_pixels: int, threads: int = 1, chunk: int = 256) -> EmbeddingDatabase:
    """Embed every cell whose center lies in ``region_box`` from north-up LOD patches.

    Raises:
        EmptyRegionError: the box contains no cell center.
    """
    cells = cells_in_box(layout, *region_box)
    if not cells:
        raise EmptyRegionError("region contains no cells")

    def render(cell):
        return extract_lods(raster, patch_specs_for_cell(cell, layout, lod_n, lod_d0, lod_pixels))

    vectors = np.empty((len(cells), params.config.embed_dim), dtype=np.float32)
    coverage = np.empty(len(cells), dtype=np.uint8)
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for start in range(0, len(cells), chunk):
            part = cells[start:start + chunk]
            rendered = list(pool.map(render, part)) if pool else [render(c) for c in part]
            imgs = np.stack([img for img, _ in rendered])
            vectors[start:start + len(part)] = embed_cells(params, imgs)
            coverage[start:start + len(part)] = [_coverage_flag(c) for _, c in rendered]
    finally:
        if pool:
            pool.shutdown()
    return EmbeddingDatabase(layout, np.array(cells, dtype=np.int32), vectors, coverage)


# ---------------------------------------------------------------------------
# search
# ---------------------------------------------------------------------------

@dataclass
class RetrievalResult:
    indices: np.ndarray  # database row numbers
    cells: list[CellIndex]
    scores: np.ndarray

    def __len__(self):
        return len(self.cells)


def row_scores(vectors: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Double-precision dot products, computed row by row.

    Every search path scores candidates through this function so that exact
    and graph search agree to the last bit.
    """
    q = np.asarray(query, dtype=np.float64)
    return (np.asarray(vectors, dtype=np.float64) * q).sum(axis=1)


def _ranked(db: EmbeddingDatabase, idx: np.ndarray, scores: np.ndarray, n: int) -> RetrievalResult:
    # descending score, then (band, step) ascending; db rows are already (band, step) sorted
    order = np.lexsort((idx, -scores))[:n]
    idx, scores = idx[order], scores[order]
    return RetrievalResult(idx, [db.cell(int(k)) for k in idx], scores)


def knn_exact(db: EmbeddingDatabase, query: np.ndarray, n: int) -> RetrievalResult:
    if n < 1:
        raise ValueError("N must be >= 1")
    if len(db) == 0:
        raise ValueError("empty database")
    scores = row_scores(db.vectors, query)
    return _ranked(db, np.arange(len(db)), scores, n)


def knn_exact_batch(db: EmbeddingDatabase, queries: np.ndarray, n: int) -> list[RetrievalResult]:
    return [knn_exact(db, q, n) for q in np.asarray(queries)]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def hits_within(db: EmbeddingDatabase, result: RetrievalResult, location: GeoPoint,
                radius_m: float = 50.0) -> np.ndarray:
    """Per-rank flag: retrieved center strictly closer than ``radius_m``."""
    c = db.centers[result.indices]
    d = haversine(location.lat, location.lon, c[:, 0], c[:, 1], db.layout.earth_radius)
    return d < radius_m


def _search(db_or_index, query, n, ef_search):
    from .hnsw import GraphIndex, knn_graph
    if isinstance(db_or_index, GraphIndex):
        return db_or_index.db, knn_graph(db_or_index, query, n, ef_search)
    return db_or_index, knn_exact(db_or_index, query, n)


def recall_at_n_within(db_or_index, queries: Sequence[tuple], n: int, radius_m: float = 50.0,
                       ef_search: int | None = None) -> float:
    """Fraction of (photo, embedding) queries with a top-N center within ``radius_m``."""
    if not queries:
        raise ValueError("need at least one query")
    hit = 0
    for photo, emb in queries:
        db, res = _search(db_or_index, emb, n, ef_search)
        hit += bool(hits_within(db, res, photo.location, radius_m).any())
    return hit / len(queries)


@dataclass(frozen=True)
class GroupRow:
    key: str
    count: int
    recall: float
    below_min_count: bool


def grouped_recall(results: Sequence[RetrievalResult], queries: Sequence, db: EmbeddingDatabase,
                   key: str, n: int, radius_m: float = 50.0, min_count: int = 1) -> list[GroupRow]:
    """Recall per capture year or hour of day.

    ``queries`` are photo records aligned with ``results``; photos without a
    timestamp land in group ``"unknown"``.
    """
    if key not in ("year", "hour"):
        raise ValueError("key must be 'year' or 'hour'")
    if len(results) != len(queries):
        raise ValueError("results and queries differ in length")
    groups: dict[str, list[bool]] = defaultdict(list)
    for res, photo in zip(results, queries):
        ts = photo.captured_at
        label = "unknown" if ts is None else f"{getattr(ts, key):02d}" if key == "hour" else str(ts.year)
        top = RetrievalResult(res.indices[:n], res.cells[:n], res.scores[:n])
        groups[label].append(bool(hits_within(db, top, photo.location, radius_m).any()))
    return [GroupRow(k, len(v), sum(v) / len(v), len(v) < min_count)
            for k, v in sorted(groups.items(), key=lambda kv: (kv[0] == "unknown", kv[0]))]


def score_grid(db: EmbeddingDatabase, query: np.ndarray,
               region_box: tuple[GeoPoint, GeoPoint] | None = None) -> list[tuple]:
    """(band, step, lat_deg, lon_deg, score) for every database cell in the box."""
    scores = row_scores(db.vectors, query)
    keep = set(cells_in_box(db.layout, *region_box)) if region_box is not None else None
    rows = []
    for k in range(len(db)):
        cell = db.cell(k)
        if keep is not None and cell not in keep:
            continue
        lat, lon = np.degrees(db.centers[k])
        rows.append((cell.band, cell.step, float(lat), float(lon), float(scores[k])))
    return rows


def write_score_grid(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["band_i", "step_j", "lat_deg", "lon_deg", "score"])
        for band, step, lat, lon, score in rows:
            w.writerow([band, step, f"{lat:.9f}", f"{lon:.9f}", repr(score)])


def write_results_csv(path, db: EmbeddingDatabase, queries: Sequence, results: Sequence[RetrievalResult],
                      radius_m: float = 50.0) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["query_id", "rank", "band_i", "step_j", "score", "dist_m", "hit"])
        for photo, res in zip(queries, results):
            c = db.centers[res.indices]
            dist = haversine(photo.location.lat, photo.location.lon, c[:, 0], c[:, 1],
                             db.layout.earth_radius)
            for rank, (cell, score, d) in enumerate(zip(res.cells, res.scores, dist), 1):
                w.writerow([photo.id, rank, cell.band, cell.step, repr(float(score)),
                            f"{d:.3f}", int(d < radius_m)])

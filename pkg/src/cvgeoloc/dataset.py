"""Photo manifests, 5 m dedup partition, batch sampling and augmentation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterator, Sequence

import numpy as np

from .geodesy import CellIndex, GeoPoint, RegionLayout, cells_of_points, haversine

logger = logging.getLogger(__name__)

DEDUP_CELL_SIZE = 5.0


class EmptyDatasetError(ValueError):
    pass


class DuplicateIdError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticPose:
    position: GeoPoint
    heading: float  # radians, clockwise from north


@dataclass(frozen=True)
class PhotoRecord:
    id: str
    location: GeoPoint
    captured_at: datetime | None = None
    image: str | None = None
    pose: SyntheticPose | None = None


@dataclass
class Manifest:
    records: list[PhotoRecord]
    skipped: int = 0
    problems: list[tuple[int, str]] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self) -> Iterator[PhotoRecord]:
        return iter(self.records)

    def __getitem__(self, k):
        return self.records[k]


def _parse_timestamp(text: str) -> datetime:
    ts = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def parse_record(obj: dict) -> PhotoRecord:
    if not isinstance(obj, dict):
        raise ValueError("record is not an object")
    pid = obj["id"]
    if not isinstance(pid, str) or not pid:
        raise ValueError("id must be a non-empty string")
    lat, lon = float(obj["lat"]), float(obj["lon"])
    if not (abs(lat) <= 90 and -180 <= lon <= 180) or not (math.isfinite(lat) and math.isfinite(lon)):
        raise ValueError(f"invalid location ({lat}, {lon})")
    captured = obj.get("captured_at")
    pose = None
    if obj.get("synthetic") is not None:
        s = obj["synthetic"]
        pose = SyntheticPose(GeoPoint.from_degrees(float(s["lat"]), float(s["lon"])),
                             math.radians(float(s["heading_deg"])))
    image = obj.get("image")
    if image is None and pose is None:
        raise ValueError("record needs either 'image' or 'synthetic'")
    return PhotoRecord(
        id=pid,
        location=GeoPoint.from_degrees(lat, lon),
        captured_at=_parse_timestamp(captured) if captured else None,
        image=image,
        pose=pose,
    )


def load_manifest(path) -> Manifest:
    """Read a JSON-lines manifest, skipping (and counting) malformed lines.

    Raises:
        EmptyDatasetError: no valid record in the file.
        DuplicateIdError: two records share an id.
    """
    records: list[PhotoRecord] = []
    problems: list[tuple[int, str]] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = parse_record(json.loads(line))
            except (ValueError, KeyError, TypeError) as e:
                problems.append((lineno, f"{type(e).__name__}: {e}"))
                continue
            if rec.id in seen:
                raise DuplicateIdError(f"duplicate photo id {rec.id!r} on line {lineno}")
            seen.add(rec.id)
            records.append(rec)
    if problems:
        logger.warning("%s: skipped %d malformed line(s), first at line %d (%s)",
                       path, len(problems), problems[0][0], problems[0][1])
    if not records:
        raise EmptyDatasetError(f"{path}: no valid photo records")
    return Manifest(records, len(problems), problems)


def record_to_json(rec: PhotoRecord) -> dict:
    obj = {"id": rec.id, "lat": rec.location.lat_deg, "lon": rec.location.lon_deg}
    if rec.captured_at is not None:
        obj["captured_at"] = rec.captured_at.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    if rec.image is not None:
        obj["image"] = rec.image
    if rec.pose is not None:
        obj["synthetic"] = {"lat": rec.pose.position.lat_deg, "lon": rec.pose.position.lon_deg,
                            "heading_deg": math.degrees(rec.pose.heading)}
    return obj


def write_manifest(path, records: Sequence[PhotoRecord]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(record_to_json(rec)) + "\n")


# ---------------------------------------------------------------------------
# dedup partition and sampling
# ---------------------------------------------------------------------------

class Partition:
    """Photos grouped by 5 m cell. Maps CellIndex -> list of photo ids."""

    def __init__(self, cells: dict[CellIndex, list[str]], records: dict[str, PhotoRecord]):
        self.cells = cells
        self.records = records
        self.keys = sorted(cells)

    def __len__(self):
        return len(self.cells)

    def __getitem__(self, cell: CellIndex) -> list[str]:
        return self.cells[cell]

    def __iter__(self):
        return iter(self.keys)

    def __contains__(self, cell):
        return cell in self.cells


def dedup_partition(photos: Sequence[PhotoRecord], layout_5m: RegionLayout) -> Partition:
    if layout_5m.cell_size != DEDUP_CELL_SIZE:
        raise ValueError(f"dedup layout must use {DEDUP_CELL_SIZE} m cells, got {layout_5m.cell_size}")
    if not photos:
        return Partition({}, {})
    lat = np.array([p.location.lat for p in photos])
    lon = np.array([p.location.lon for p in photos])
    band, step = cells_of_points(lat, lon, layout_5m)
    cells: dict[CellIndex, list[str]] = {}
    for p, i, j in zip(photos, band.tolist(), step.tolist()):
        cells.setdefault(CellIndex(i, j), []).append(p.id)
    return Partition(cells, {p.id: p for p in photos})


def sample_batch(rng: np.random.Generator, partition: Partition, b: int) -> list[PhotoRecord]:
    """b distinct 5 m cells without replacement, one uniformly chosen photo each."""
    if len(partition) < b:
        raise InsufficientDataError(f"need {b} distinct 5 m cells, partition has {len(partition)}")
    picked = rng.choice(len(partition.keys), size=b, replace=False)
    out = []
    for k in picked:
        ids = partition.cells[partition.keys[k]]
        out.append(partition.records[ids[int(rng.integers(len(ids)))]])
    return out


# ---------------------------------------------------------------------------
# augmented training pairs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingPair:
    photo: PhotoRecord
    cell_center: GeoPoint
    cell_theta: float
    offset: tuple[float, float]  # photo position in the rotated cell frame, meters
    noise_seed: int = 0


def offset_point(p: GeoPoint, east: float, north: float, r: float) -> GeoPoint:
    return GeoPoint(p.lat + north / r, p.lon + east / (r * math.cos(p.lat)))


def local_offset(origin: GeoPoint, p: GeoPoint, r: float) -> tuple[float, float]:
    """(east, north) meters of ``p`` in the tangent plane at ``origin``."""
    return (p.lon - origin.lon) * r * math.cos(origin.lat), (p.lat - origin.lat) * r


def make_training_pair(photo: PhotoRecord, rng: np.random.Generator, l: float = 30.0,
                       l_delta: float = 5.0, earth_radius: float = 6_371_000.0) -> TrainingPair:
    """Cell with random orientation and offset that still contains the photo.

    The photo sits at ``offset`` in the cell's own (rotated) frame, with every
    component in [-t_max, t_max], t_max = l/2 - l_delta.
    """
    if not l > 2 * l_delta:
        raise ValueError("cell size must exceed twice the margin l_delta")
    t_max = 0.5 * l - l_delta
    theta = float(rng.uniform(0.0, 2 * math.pi))
    tx, ty = (float(v) for v in rng.uniform(-t_max, t_max, 2))
    noise_seed = int(rng.integers(2 ** 63))
    c, s = math.cos(theta), math.sin(theta)
    east = tx * c - ty * s
    north = tx * s + ty * c
    # the tangent plane at the photo is accurate to well under a millimeter here
    center = offset_point(photo.location, -east, -north, earth_radius)
    return TrainingPair(photo, center, theta, (tx, ty), noise_seed)


def offset_in_cell_frame(pair: TrainingPair, earth_radius: float = 6_371_000.0) -> tuple[float, float]:
    """Recompute the photo offset from the cell center geometry."""
    east, north = local_offset(pair.cell_center, pair.photo.location, earth_radius)
    c, s = math.cos(pair.cell_theta), math.sin(pair.cell_theta)
    return east * c + north * s, -east * s + north * c


def negative_mask(pairs: Sequence[TrainingPair], radius_m: float = 100.0, *,
                  use_boundary: bool = False, cell_size: float = 30.0,
                  earth_radius: float = 6_371_000.0) -> np.ndarray:
    """mask[i, j] is True when cell j is a valid negative for photo i.

    By default the photo-to-cell-center distance must be at least
    ``radius_m``; with ``use_boundary`` the distance to the rotated cell
    square is used instead.
    """
    b = len(pairs)
    if b < 2:
        raise ValueError("negative mask needs at least two pairs")
    plat = np.array([p.photo.location.lat for p in pairs])
    plon = np.array([p.photo.location.lon for p in pairs])
    clat = np.array([p.cell_center.lat for p in pairs])
    clon = np.array([p.cell_center.lon for p in pairs])
    if not use_boundary:
        dist = haversine(plat[:, None], plon[:, None], clat[None, :], clon[None, :], earth_radius)
    else:
        east = (plon[:, None] - clon[None, :]) * earth_radius * np.cos(clat)[None, :]
        north = (plat[:, None] - clat[None, :]) * earth_radius
        th = np.array([p.cell_theta for p in pairs])[None, :]
        u = east * np.cos(th) + north * np.sin(th)
        v = -east * np.sin(th) + north * np.cos(th)
        half = 0.5 * cell_size
        dist = np.hypot(np.maximum(np.abs(u) - half, 0.0), np.maximum(np.abs(v) - half, 0.0))
    mask = dist >= radius_m
    np.fill_diagonal(mask, False)
    return mask

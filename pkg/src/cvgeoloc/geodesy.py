"""Consistent-scale cell layout on a spherical earth.

Band ``i`` is centered on latitude ``i * l / r``. Within a band, steps of
``l`` meters along the parallel give longitudes ``j * l / (r cos(phi_i))``.
Every cell is a north-aligned ``l x l`` square in the tangent plane at its
band latitude, so all cells have (almost) the same metric size regardless of
latitude. A Web Mercator grid is provided as the baseline layout.

All angles are radians unless a name says ``_deg``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

EARTH_RADIUS_M = 6_371_000.0
# EPSG:3857 uses the WGS84 semi-major axis as sphere radius.
WEB_MERCATOR_RADIUS_M = 6_378_137.0
MAX_LATITUDE = math.radians(85.06)

TWO_PI = 2.0 * math.pi


class LayoutRangeError(ValueError):
    """A latitude or band outside the supported range |lat| < 85.06 deg."""


class GeoPoint(NamedTuple):
    lat: float
    lon: float

    @classmethod
    def from_degrees(cls, lat_deg: float, lon_deg: float) -> "GeoPoint":
        return cls(math.radians(lat_deg), wrap_longitude(math.radians(lon_deg)))

    @property
    def lat_deg(self) -> float:
        return math.degrees(self.lat)

    @property
    def lon_deg(self) -> float:
        return math.degrees(self.lon)


class CellIndex(NamedTuple):
    band: int
    step: int


@dataclass(frozen=True)
class RegionLayout:
    cell_size: float = 30.0
    earth_radius: float = EARTH_RADIUS_M

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")
        if not self.earth_radius > 0:
            raise ValueError(f"earth_radius must be positive, got {self.earth_radius}")

    @property
    def band_angle(self) -> float:
        """Latitude step between adjacent bands, l / r."""
        return self.cell_size / self.earth_radius

    @property
    def max_band(self) -> int:
        """Largest band index whose latitude is strictly below the cutoff."""
        i = int(math.floor(MAX_LATITUDE * self.earth_radius / self.cell_size))
        while band_latitude_unchecked(i, self) >= MAX_LATITUDE:
            i -= 1
        while band_latitude_unchecked(i + 1, self) < MAX_LATITUDE:
            i += 1
        return i


@dataclass(frozen=True)
class MercatorLayout:
    """Regular grid in EPSG:3857 projected meters, as used by web map tiles."""

    projected_cell_size: float = 30.0
    earth_radius: float = WEB_MERCATOR_RADIUS_M

    def __post_init__(self):
        if not self.projected_cell_size > 0:
            raise ValueError("projected_cell_size must be positive")


def wrap_longitude(lon):
    """Map longitude(s) to [-pi, pi)."""
    return (lon + math.pi) % TWO_PI - math.pi


# ---------------------------------------------------------------------------
# consistent layout
# ---------------------------------------------------------------------------

def band_latitude_unchecked(i: int, layout: RegionLayout) -> float:
    return i * layout.cell_size / layout.earth_radius


def band_latitude(i: int, layout: RegionLayout) -> float:
    phi = band_latitude_unchecked(i, layout)
    if not abs(phi) < MAX_LATITUDE:
        raise LayoutRangeError(f"band {i} has latitude {math.degrees(phi):.4f} deg, beyond +-85.06")
    return phi


def band_step_angle(i: int, layout: RegionLayout) -> float:
    """Longitude step l / r_i of band ``i``."""
    return layout.cell_size / (layout.earth_radius * math.cos(band_latitude(i, layout)))


def band_step_range(i: int, layout: RegionLayout) -> tuple[int, int]:
    """Inclusive (first, last) step index of band ``i``.

    The first step is the westernmost center at or east of -pi. There are
    ceil(2 pi r_i / l) steps, so the last cell may extend past the
    antimeridian and overlap the first one by less than a cell.
    """
    half = math.pi / band_step_angle(i, layout)
    count = int(math.ceil(2.0 * half - 1e-9))
    first = -int(math.floor(half))
    return first, first + count - 1


def band_step_count(i: int, layout: RegionLayout) -> int:
    first, last = band_step_range(i, layout)
    return last - first + 1


def normalize_step(i: int, j: int, layout: RegionLayout) -> int:
    first, last = band_step_range(i, layout)
    return first + (j - first) % (last - first + 1)


def cell_center(cell: CellIndex, layout: RegionLayout) -> GeoPoint:
    i, j = cell
    phi = band_latitude(i, layout)
    j = normalize_step(i, j, layout)
    lon = j * layout.cell_size / (layout.earth_radius * math.cos(phi))
    return GeoPoint(phi, wrap_longitude(lon))


def cell_centers(cells: Sequence[CellIndex], layout: RegionLayout) -> np.ndarray:
    """(n, 2) array of (lat, lon) centers."""
    out = np.empty((len(cells), 2))
    for k, c in enumerate(cells):
        out[k] = cell_center(c, layout)
    return out


def cells_of_points(lat, lon, layout: RegionLayout) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`cell_of_point`; returns (band, step) integer arrays."""
    lat = np.atleast_1d(np.asarray(lat, dtype=np.float64))
    lon = wrap_longitude(np.atleast_1d(np.asarray(lon, dtype=np.float64)))
    if np.any(~(np.abs(lat) < MAX_LATITUDE)):
        raise LayoutRangeError("point latitude beyond +-85.06 deg")
    l, r = layout.cell_size, layout.earth_radius
    band = np.floor(lat * r / l + 0.5).astype(np.int64)
    phi = band * l / r
    if np.any(~(np.abs(phi) < MAX_LATITUDE)):
        raise LayoutRangeError("point falls into a band beyond +-85.06 deg")
    step_angle = l / (r * np.cos(phi))
    half = np.pi / step_angle
    count = np.ceil(2.0 * half - 1e-9).astype(np.int64)
    first = -np.floor(half).astype(np.int64)

    raw = np.floor(lon / step_angle + 0.5).astype(np.int64)
    best = np.zeros_like(raw)
    best_dist = np.full(lat.shape, np.inf)
    # Near the seam the wrapped last cell competes with the first one, so
    # the owner is the closest wrapped center among the neighbouring steps.
    for delta in (-1, 0, 1):
        cand = first + (raw + delta - first) % count
        center = wrap_longitude(cand * step_angle)
        d = wrap_longitude(lon - center) / step_angle
        ok = (d >= -0.5) & (d < 0.5) & (np.abs(d) < best_dist)
        best = np.where(ok, cand, best)
        best_dist = np.where(ok, np.abs(d), best_dist)
    return band, best


def cell_of_point(p: GeoPoint, layout: RegionLayout) -> CellIndex:
    band, step = cells_of_points(p.lat, p.lon, layout)
    return CellIndex(int(band[0]), int(step[0]))


def _steps_in_lon_interval(i: int, lo: float, hi: float, layout: RegionLayout) -> list[int]:
    first, last = band_step_range(i, layout)
    a = band_step_angle(i, layout)
    cand = set(range(max(first, int(math.floor(lo / a)) - 1),
                     min(last, int(math.ceil(hi / a)) + 1) + 1))
    cand.add(last)
    out = []
    for j in cand:
        lon = wrap_longitude(j * a)
        if lo <= lon <= hi:
            out.append(j)
    return out


def cells_in_box(layout: RegionLayout, min_pt: GeoPoint, max_pt: GeoPoint) -> list[CellIndex]:
    """Cells whose centers lie in the closed box, ordered by (band, step).

    A box with ``min_pt.lon > max_pt.lon`` crosses the antimeridian.
    """
    if min_pt.lat > max_pt.lat:
        raise ValueError("min latitude exceeds max latitude")
    r_over_l = layout.earth_radius / layout.cell_size
    lo_i = int(math.floor(min_pt.lat * r_over_l)) - 1
    hi_i = int(math.ceil(max_pt.lat * r_over_l)) + 1
    lo_i = max(lo_i, -layout.max_band)
    hi_i = min(hi_i, layout.max_band)
    lon_min, lon_max = wrap_longitude(min_pt.lon), wrap_longitude(max_pt.lon)
    # max_pt.lon given as +pi wraps to -pi; keep it as the eastern edge
    if max_pt.lon >= math.pi:
        lon_max = math.pi
    if lon_min <= lon_max:
        intervals = [(lon_min, lon_max)]
    else:
        intervals = [(lon_min, math.pi), (-math.pi, lon_max)]

    cells = []
    for i in range(lo_i, hi_i + 1):
        phi = band_latitude_unchecked(i, layout)
        if not (min_pt.lat <= phi <= max_pt.lat):
            continue
        steps: set[int] = set()
        for lo, hi in intervals:
            steps.update(_steps_in_lon_interval(i, lo, hi, layout))
        cells.extend(CellIndex(i, j) for j in sorted(steps))
    return cells


# ---------------------------------------------------------------------------
# distances and shape diagnostics
# ---------------------------------------------------------------------------

def haversine(lat1, lon1, lat2, lon2, r: float = EARTH_RADIUS_M):
    """Great-circle distance in meters; broadcasts over numpy arrays."""
    s_lat = np.sin((np.asarray(lat2) - lat1) * 0.5)
    s_lon = np.sin((np.asarray(lon2) - lon1) * 0.5)
    h = s_lat * s_lat + np.cos(lat1) * np.cos(lat2) * s_lon * s_lon
    return 2.0 * r * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def geodesic_distance(a: GeoPoint, b: GeoPoint, r: float = EARTH_RADIUS_M) -> float:
    return float(haversine(a.lat, a.lon, b.lat, b.lon, r))


def trapezoid_ratio(i: int, layout: RegionLayout) -> float:
    """Ratio of the shorter to the longer parallel side between bands i and i+1."""
    c_a = TWO_PI * layout.earth_radius * math.cos(band_latitude(i, layout))
    c_b = TWO_PI * layout.earth_radius * math.cos(band_latitude(i + 1, layout))
    return min(c_a, c_b) / max(c_a, c_b)


@dataclass(frozen=True)
class ShapeReport:
    worst_band: int
    min_ratio: float

    @property
    def epsilon(self) -> float:
        return 1.0 - self.min_ratio

    def side_deviation(self, layout: RegionLayout) -> float:
        """Length difference in meters of the two parallel sides of the worst cell."""
        return layout.cell_size * self.epsilon


def shape_report(layout: RegionLayout) -> ShapeReport:
    """Worst trapezoid ratio over every band pair inside the latitude cutoff."""
    n = layout.max_band
    i = np.arange(-n, n)
    phi = i * layout.cell_size / layout.earth_radius
    phi_next = (i + 1) * layout.cell_size / layout.earth_radius
    c_a, c_b = np.cos(phi), np.cos(phi_next)
    k = np.minimum(c_a, c_b) / np.maximum(c_a, c_b)
    w = int(np.argmin(k))
    return ShapeReport(worst_band=int(i[w]), min_ratio=float(k[w]))


# ---------------------------------------------------------------------------
# Web Mercator baseline
# ---------------------------------------------------------------------------

def mercator_forward(lat, lon, r: float = WEB_MERCATOR_RADIUS_M):
    return r * np.asarray(lon), r * np.log(np.tan(np.pi / 4 + np.asarray(lat) / 2))


def mercator_inverse(x, y, r: float = WEB_MERCATOR_RADIUS_M):
    return 2.0 * np.arctan(np.exp(np.asarray(y) / r)) - np.pi / 2, np.asarray(x) / r


def mercator_cell_metric_size(lat: float, m: MercatorLayout) -> float:
    """Ground side length of a Mercator cell at latitude ``lat``."""
    if not abs(lat) < MAX_LATITUDE:
        raise LayoutRangeError("latitude beyond +-85.06 deg")
    return m.projected_cell_size * math.cos(lat)


def mercator_cell_of_point(p: GeoPoint, m: MercatorLayout) -> CellIndex:
    if not abs(p.lat) < MAX_LATITUDE:
        raise LayoutRangeError("latitude beyond +-85.06 deg")
    x, y = mercator_forward(p.lat, p.lon, m.earth_radius)
    return CellIndex(int(math.floor(y / m.projected_cell_size)),
                     int(math.floor(x / m.projected_cell_size)))


def mercator_cell_center(cell: CellIndex, m: MercatorLayout) -> GeoPoint:
    s = m.projected_cell_size
    lat, lon = mercator_inverse((cell.step + 0.5) * s, (cell.band + 0.5) * s, m.earth_radius)
    return GeoPoint(float(lat), float(lon))


def layout_scale_table(lats_deg: Iterable[float], layout: RegionLayout,
                       mercator: MercatorLayout) -> list[dict]:
    """Cell size and relative cell density of both layouts per latitude.

    ``density_ratio`` is Mercator cells per unit area divided by consistent
    cells per unit area; it grows as 1/cos^2(lat) when the Mercator grid is
    sized to match at the equator.
    """
    rows = []
    for lat_deg in lats_deg:
        lat = math.radians(lat_deg)
        merc = mercator_cell_metric_size(lat, mercator)
        rows.append({
            "lat_deg": lat_deg,
            "consistent_m": layout.cell_size,
            "mercator_m": merc,
            "density_ratio": (layout.cell_size / merc) ** 2,
        })
    return rows


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def write_cells_csv(path, cells: Sequence[CellIndex], layout: RegionLayout) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["band_i", "step_j", "lat_deg", "lon_deg"])
        for c in cells:
            p = cell_center(c, layout)
            w.writerow([c.band, c.step, f"{p.lat_deg:.9f}", f"{p.lon_deg:.9f}"])


def read_cells_csv(path) -> list[CellIndex]:
    with open(path, newline="") as f:
        return [CellIndex(int(row["band_i"]), int(row["step_j"])) for row in csv.DictReader(f)]

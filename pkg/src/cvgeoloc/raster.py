"""Georeferenced rasters and oriented multi-LOD patch extraction.

A :class:`GeoRaster` is a north-up RGB8 grid in a local tangent plane: rows
step ``resolution`` meters south, columns ``resolution`` meters east, with
the longitude scale taken at the raster's middle row. Patches are sampled by
bilinear interpolation at the geographic location of every output pixel.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geodesy import EARTH_RADIUS_M, CellIndex, GeoPoint, RegionLayout, cell_center

# sample positions this close to a pixel center are snapped onto it, so
# grid-aligned windows copy source pixels bit for bit
_SNAP = 1e-6


class CoverageError(ValueError):
    """A patch footprint that does not intersect the raster at all."""


@dataclass(frozen=True)
class PatchSpec:
    center: GeoPoint
    sidelength: float
    orientation: float = 0.0
    pixels: int = 32

    def __post_init__(self):
        if not self.sidelength > 0:
            raise ValueError("sidelength must be positive")
        if self.pixels < 2:
            raise ValueError("pixels must be >= 2")

    @property
    def resolution(self) -> float:
        return self.sidelength / self.pixels


class GeoRaster:
    """Immutable north-up RGB8 raster.

    Args:
        anchor: geographic position of the top-left pixel center.
        resolution: ground sample distance in meters per pixel.
        data: uint8 array of shape (height, width, 3).
    """

    def __init__(self, anchor: GeoPoint, resolution: float, data: np.ndarray,
                 earth_radius: float = EARTH_RADIUS_M):
        data = np.ascontiguousarray(data)
        if data.ndim != 3 or data.shape[2] != 3 or data.dtype != np.uint8:
            raise ValueError(f"expected uint8 (H, W, 3) data, got {data.dtype} {data.shape}")
        if not resolution > 0:
            raise ValueError("resolution must be positive")
        self.anchor = GeoPoint(float(anchor.lat), float(anchor.lon))
        self.resolution = float(resolution)
        self.earth_radius = float(earth_radius)
        self.data = data
        self.data.flags.writeable = False
        mid_lat = self.anchor.lat - 0.5 * (self.height - 1) * self.resolution / self.earth_radius
        self._cos_ref = math.cos(mid_lat)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def __repr__(self):
        return (f"GeoRaster({self.width}x{self.height}, {self.resolution} m/px, "
                f"anchor=({self.anchor.lat_deg:.6f}, {self.anchor.lon_deg:.6f}))")

    def geo_to_pixel(self, lat, lon):
        """Fractional (row, col) of geographic coordinates."""
        row = (self.anchor.lat - np.asarray(lat)) * self.earth_radius / self.resolution
        dlon = (np.asarray(lon) - self.anchor.lon + math.pi) % (2 * math.pi) - math.pi
        col = dlon * self.earth_radius * self._cos_ref / self.resolution
        return row, col

    def pixel_to_geo(self, row, col):
        lat = self.anchor.lat - np.asarray(row) * self.resolution / self.earth_radius
        lon = self.anchor.lon + np.asarray(col) * self.resolution / (self.earth_radius * self._cos_ref)
        return lat, lon

    def bounds(self) -> tuple[GeoPoint, GeoPoint]:
        """(south-west, north-east) corners of the pixel-center extent."""
        lat0, lon0 = self.pixel_to_geo(self.height - 1, 0)
        lat1, lon1 = self.pixel_to_geo(0, self.width - 1)
        return GeoPoint(float(lat0), float(lon0)), GeoPoint(float(lat1), float(lon1))

    def sample(self, row: np.ndarray, col: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Bilinear samples in [0, 1] at fractional pixel positions.

        Returns (values of shape row.shape + (3,), inside mask). Samples
        outside the pixel-center extent are black.
        """
        row = np.asarray(row, dtype=np.float64)
        col = np.asarray(col, dtype=np.float64)
        r_near, c_near = np.rint(row), np.rint(col)
        row = np.where(np.abs(row - r_near) < _SNAP, r_near, row)
        col = np.where(np.abs(col - c_near) < _SNAP, c_near, col)
        inside = (row >= 0) & (row <= self.height - 1) & (col >= 0) & (col <= self.width - 1)
        r = np.where(inside, row, 0.0)
        c = np.where(inside, col, 0.0)
        r0 = np.minimum(r.astype(np.intp), self.height - 1)
        c0 = np.minimum(c.astype(np.intp), self.width - 1)
        dr = np.where(r0 + 1 < self.height, self.width, 0)
        dc = np.where(c0 + 1 < self.width, 1, 0)
        tr = (r - r0)[..., None]
        tc = (c - c0)[..., None]
        flat = self.data.reshape(-1, 3)
        i00 = r0 * self.width + c0
        v00 = np.take(flat, i00, axis=0).astype(np.float64)
        v01 = np.take(flat, i00 + dc, axis=0).astype(np.float64)
        v10 = np.take(flat, i00 + dr, axis=0).astype(np.float64)
        v11 = np.take(flat, i00 + dr + dc, axis=0).astype(np.float64)
        top = v00 + tc * (v01 - v00)
        bottom = v10 + tc * (v11 - v10)
        out = (top + tr * (bottom - top)) / 255.0
        out[~inside] = 0.0
        return out, inside


def patch_sample_points(spec: PatchSpec, earth_radius: float = EARTH_RADIUS_M):
    """Latitude/longitude of every output pixel center, each (pixels, pixels)."""
    p = spec.pixels
    step = spec.sidelength / p
    offs = (np.arange(p) + 0.5 - 0.5 * p) * step
    x = offs[None, :]            # east in the patch frame, by column
    y = -offs[:, None]           # north in the patch frame, by row
    cos_t, sin_t = math.cos(spec.orientation), math.sin(spec.orientation)
    east = x * cos_t - y * sin_t
    north = x * sin_t + y * cos_t
    lat = spec.center.lat + north / earth_radius
    lon = spec.center.lon + east / (earth_radius * math.cos(spec.center.lat))
    return lat, lon


def extract_patch_with_coverage(src: GeoRaster, spec: PatchSpec) -> tuple[np.ndarray, float]:
    """Like :func:`extract_patch` but also returns the covered pixel fraction."""
    lat, lon = patch_sample_points(spec, src.earth_radius)
    row, col = src.geo_to_pixel(lat, lon)
    img, inside = src.sample(row, col)
    return img, float(inside.mean())


def extract_patch(src: GeoRaster, spec: PatchSpec) -> np.ndarray:
    """Oriented, scaled square window as a float (pixels, pixels, 3) image.

    Raises:
        CoverageError: if no output pixel falls inside the raster.
    """
    img, coverage = extract_patch_with_coverage(src, spec)
    if coverage == 0.0:
        raise CoverageError(f"patch at ({spec.center.lat_deg:.6f}, {spec.center.lon_deg:.6f}) "
                            "does not intersect the raster")
    return img


def lod_sidelengths(n: int, d0: float) -> list[float]:
    """Sidelengths d0 * 2**i of the n levels of detail."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not d0 > 0:
        raise ValueError("d0 must be positive")
    return [d0 * 2 ** i for i in range(n)]


def patch_specs_for_cell(cell: CellIndex, layout: RegionLayout, n: int, d0: float,
                         pixels: int, theta: float = 0.0) -> list[PatchSpec]:
    center = cell_center(cell, layout)
    return [PatchSpec(center, d, theta, pixels) for d in lod_sidelengths(n, d0)]


def lod_patch_specs(center: GeoPoint, n: int, d0: float, pixels: int,
                    theta: float = 0.0) -> list[PatchSpec]:
    """LOD stack around an arbitrary center (used for augmented training cells)."""
    return [PatchSpec(center, d, theta, pixels) for d in lod_sidelengths(n, d0)]


def extract_lods(src: GeoRaster, specs: Sequence[PatchSpec]) -> tuple[np.ndarray, float]:
    """Stack of LOD patches (n, p, p, 3) and the mean coverage over all of them."""
    imgs, covs = zip(*(extract_patch_with_coverage(src, s) for s in specs))
    return np.stack(imgs), float(np.mean(covs))


def rotate_image_180(img: np.ndarray) -> np.ndarray:
    return img[::-1, ::-1]


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """Resample a float (H, W, 3) image to (size, size, 3), pixel-center aligned."""
    h, w = img.shape[:2]
    r = (np.arange(size) + 0.5) * h / size - 0.5
    c = (np.arange(size) + 0.5) * w / size - 0.5
    r = np.clip(r, 0, h - 1)
    c = np.clip(c, 0, w - 1)
    r0 = np.floor(r).astype(np.intp)
    c0 = np.floor(c).astype(np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    tr = (r - r0)[:, None, None]
    tc = (c - c0)[None, :, None]
    top = img[r0][:, c0] + tc * (img[r0][:, c1] - img[r0][:, c0])
    bottom = img[r1][:, c0] + tc * (img[r1][:, c1] - img[r1][:, c0])
    return top + tr * (bottom - top)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def _sidecar_path(path) -> str:
    return os.fspath(path) + ".meta"


def write_raster(path, raster: GeoRaster) -> None:
    """Headerless RGB8 rows at ``path`` plus a ``key=value`` sidecar at ``path.meta``."""
    with open(path, "wb") as f:
        f.write(np.ascontiguousarray(raster.data).tobytes())
    meta = {
        "anchor_lat_deg": repr(raster.anchor.lat_deg),
        "anchor_lon_deg": repr(raster.anchor.lon_deg),
        "resolution_m": repr(raster.resolution),
        "width": str(raster.width),
        "height": str(raster.height),
        "earth_radius_m": repr(raster.earth_radius),
    }
    with open(_sidecar_path(path), "w") as f:
        for k, v in meta.items():
            f.write(f"{k}={v}\n")


def read_key_values(path) -> dict[str, str]:
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def read_raster(path) -> GeoRaster:
    meta = read_key_values(_sidecar_path(path))
    try:
        width, height = int(meta["width"]), int(meta["height"])
        anchor = GeoPoint(math.radians(float(meta["anchor_lat_deg"])),
                          math.radians(float(meta["anchor_lon_deg"])))
        resolution = float(meta["resolution_m"])
    except KeyError as e:
        raise ValueError(f"raster sidecar missing key {e}") from None
    radius = float(meta.get("earth_radius_m", EARTH_RADIUS_M))
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size != width * height * 3:
        raise ValueError(f"raster {path} has {raw.size} bytes, expected {width * height * 3}")
    return GeoRaster(anchor, resolution, raw.reshape(height, width, 3), radius)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    """Binary PPM (P6) dump of a float [0, 1] or uint8 image."""
    data = img if img.dtype == np.uint8 else to_uint8(img)
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(data).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 PPM with maxval 255 as a float image in [0, 1]."""
    with open(path, "rb") as f:
        blob = f.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        end = pos
        while not blob[end:end + 1].isspace():
            end += 1
        tokens.append(blob[pos:end])
        pos = end
    pos += 1
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: only P6 with maxval 255 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0

"""Procedural stand-in for orthophotos and street-view photos.

The aerial texture is multi-octave value noise per RGB channel, so every
neighbourhood of a few tens of meters looks different. Street views are
top-down crops of the same texture taken ahead of the camera, rotated so the
heading points up, with additive photometric noise. Both views therefore
share ground content the way a real photo shares content with the orthophoto
around its camera.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from datetime import datetime, timedelta, timezone
from functools import cached_property

import numpy as np

from .dataset import PhotoRecord, SyntheticPose
from .geodesy import EARTH_RADIUS_M, GeoPoint
from .raster import CoverageError, GeoRaster, PatchSpec, extract_patch

MAX_REGION_KM2 = 100.0


class ResourceError(RuntimeError):
    pass


def square_region(center: GeoPoint, side_m: float, r: float = EARTH_RADIUS_M):
    """(south-west, north-east) corners of a square of ``side_m`` around ``center``."""
    dlat = 0.5 * side_m / r
    dlon = 0.5 * side_m / (r * math.cos(center.lat))
    return (GeoPoint(center.lat - dlat, center.lon - dlon),
            GeoPoint(center.lat + dlat, center.lon + dlon))


def shrink_box(box, margin_m: float, r: float = EARTH_RADIUS_M):
    sw, ne = box
    mid = 0.5 * (sw.lat + ne.lat)
    dlat = margin_m / r
    dlon = margin_m / (r * math.cos(mid))
    return GeoPoint(sw.lat + dlat, sw.lon + dlon), GeoPoint(ne.lat - dlat, ne.lon - dlon)


def _smoothstep(t):
    return t * t * (3.0 - 2.0 * t)


def _value_noise(lattice: np.ndarray, ys: np.ndarray, xs: np.ndarray, wavelength: float) -> np.ndarray:
    """Separable smoothstep interpolation of a lattice at meter coordinates."""
    fy = ys / wavelength
    fx = xs / wavelength
    iy = np.floor(fy).astype(np.intp)
    ix = np.floor(fx).astype(np.intp)
    ty = _smoothstep(fy - iy)[:, None].astype(np.float32)
    tx = _smoothstep(fx - ix)[None, :].astype(np.float32)
    rows = lattice[iy] + ty * (lattice[iy + 1] - lattice[iy])
    return rows[:, ix] + tx * (rows[:, ix + 1] - rows[:, ix])


@dataclass(frozen=True)
class SyntheticWorld:
    """Deterministic generator; identical parameters give identical samples."""

    seed: int
    region_min: GeoPoint
    region_max: GeoPoint
    octaves: int = 5
    base_wavelength_m: float = 160.0
    persistence: float = 0.6
    contrast: float = 2.5
    photometric_noise_sigma: float = 0.02
    resolution: float = 0.5
    street_image_size: int = 32
    # the ground footprint of the finest default LOD; a photo then shows
    # texture at the same scale as the aerial side
    street_crop_m: float = 76.8
    street_ahead_m: float = 10.0
    earth_radius: float = EARTH_RADIUS_M

    @classmethod
    def square(cls, seed: int, center: GeoPoint, side_m: float, **kwargs) -> "SyntheticWorld":
        sw, ne = square_region(center, side_m, kwargs.get("earth_radius", EARTH_RADIUS_M))
        return cls(seed=seed, region_min=sw, region_max=ne, **kwargs)

    @property
    def extent_m(self) -> tuple[float, float]:
        """(east-west, north-south) size in meters."""
        mid = 0.5 * (self.region_min.lat + self.region_max.lat)
        ew = (self.region_max.lon - self.region_min.lon) * self.earth_radius * math.cos(mid)
        ns = (self.region_max.lat - self.region_min.lat) * self.earth_radius
        return ew, ns

    @property
    def center(self) -> GeoPoint:
        return GeoPoint(0.5 * (self.region_min.lat + self.region_max.lat),
                        0.5 * (self.region_min.lon + self.region_max.lon))

    def contains(self, p: GeoPoint) -> bool:
        return (self.region_min.lat <= p.lat <= self.region_max.lat
                and self.region_min.lon <= p.lon <= self.region_max.lon)

    @cached_property
    def aerial(self) -> GeoRaster:
        return synth_aerial(self)


def world_to_dict(world: SyntheticWorld) -> dict:
    """JSON-ready parameters; region corners stay in radians so they round-trip exactly."""
    out = {f.name: getattr(world, f.name) for f in fields(world)}
    out["region_min"] = list(world.region_min)
    out["region_max"] = list(world.region_max)
    return out


def world_from_dict(d: dict) -> SyntheticWorld:
    known = {f.name for f in fields(SyntheticWorld)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown world parameters: {sorted(unknown)}")
    kw = dict(d)
    kw["region_min"] = GeoPoint(*map(float, d["region_min"]))
    kw["region_max"] = GeoPoint(*map(float, d["region_max"]))
    return SyntheticWorld(**kw)


def synth_aerial(world: SyntheticWorld) -> GeoRaster:
    ew, ns = world.extent_m
    if ew * ns / 1e6 > MAX_REGION_KM2:
        raise ResourceError(f"region of {ew * ns / 1e6:.1f} km^2 exceeds {MAX_REGION_KM2} km^2")
    width = int(math.floor(ew / world.resolution)) + 1
    height = int(math.floor(ns / world.resolution)) + 1
    xs = np.arange(width) * world.resolution
    ys = np.arange(height) * world.resolution

    rng = np.random.default_rng(world.seed)
    img = np.zeros((height, width, 3), dtype=np.float32)
    total = 0.0
    for octave in range(world.octaves):
        wavelength = world.base_wavelength_m / 2 ** octave
        amp = world.persistence ** octave
        ny = int(math.floor(ys[-1] / wavelength)) + 2
        nx = int(math.floor(xs[-1] / wavelength)) + 2
        lattice = rng.random((3, ny, nx), dtype=np.float32)
        for ch in range(3):
            img[:, :, ch] += amp * _value_noise(lattice[ch], ys, xs, wavelength)
        total += amp
    img /= total
    img = 0.5 + world.contrast * (img - 0.5)
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    # top-left pixel sits at the north-west corner
    anchor = GeoPoint(world.region_max.lat, world.region_min.lon)
    return GeoRaster(anchor, world.resolution, data, world.earth_radius)


def street_patch_spec(world: SyntheticWorld, pos: GeoPoint, heading: float) -> PatchSpec:
    """Ground window seen by a camera at ``pos`` facing ``heading``.

    ``heading`` is clockwise from north, like a compass; the crop is rotated
    so that it points up in the image.
    """
    r = world.earth_radius
    east = world.street_ahead_m * math.sin(heading)
    north = world.street_ahead_m * math.cos(heading)
    center = GeoPoint(pos.lat + north / r, pos.lon + east / (r * math.cos(pos.lat)))
    return PatchSpec(center, world.street_crop_m, -heading, world.street_image_size)


def synth_street_view(world: SyntheticWorld, pos: GeoPoint, heading: float,
                      rng_seed: int | None = None) -> np.ndarray:
    if not world.contains(pos):
        raise CoverageError("camera position outside the synthetic region")
    img = extract_patch(world.aerial, street_patch_spec(world, pos, heading))
    sigma = world.photometric_noise_sigma
    if sigma > 0:
        noise = np.random.default_rng(rng_seed).normal(0.0, sigma, img.shape)
        img = np.clip(img + noise, 0.0, 1.0)
    return img


_EPOCH = datetime(2015, 1, 1, tzinfo=timezone.utc)
_SPAN_S = int((datetime(2024, 1, 1, tzinfo=timezone.utc) - _EPOCH).total_seconds())


def synth_photos(world: SyntheticWorld, count: int, rng: np.random.Generator,
                 box=None, prefix: str = "p") -> list[PhotoRecord]:
    """Random camera poses inside ``box`` (default: the whole region).

    Capture timestamps are uniform over 2015-2023 so grouped recall has
    something to group by.
    """
    sw, ne = box if box is not None else (world.region_min, world.region_max)
    lat = rng.uniform(sw.lat, ne.lat, count)
    lon = rng.uniform(sw.lon, ne.lon, count)
    heading = rng.uniform(0.0, 2 * math.pi, count)
    seconds = rng.integers(0, _SPAN_S, count)
    width = len(str(count - 1)) if count > 1 else 1
    out = []
    for k in range(count):
        loc = GeoPoint(float(lat[k]), float(lon[k]))
        out.append(PhotoRecord(
            id=f"{prefix}{k:0{width}d}",
            location=loc,
            captured_at=_EPOCH + timedelta(seconds=int(seconds[k])),
            pose=SyntheticPose(loc, float(heading[k])),
        ))
    return out


import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cvgeoloc.geodesy import (
    MAX_LATITUDE, CellIndex, GeoPoint, LayoutRangeError, MercatorLayout, RegionLayout,
    band_latitude, band_step_count, band_step_range, cell_center, cell_of_point, cells_in_box,
    cells_of_points, geodesic_distance, haversine, layout_scale_table, mercator_cell_center,
    mercator_cell_metric_size, mercator_cell_of_point, mercator_forward, mercator_inverse,
    read_cells_csv, shape_report, trapezoid_ratio, wrap_longitude, write_cells_csv,
)

L30 = RegionLayout()


def random_cells(rng, n, layout=L30):
    out = []
    bands = rng.integers(-layout.max_band, layout.max_band + 1, n)
    for i in bands.tolist():
        first, last = band_step_range(i, layout)
        out.append(CellIndex(i, int(rng.integers(first, last + 1))))
    return out


def test_band_latitude_formula():
    assert band_latitude(0, L30) == 0.0
    assert band_latitude(1000, L30) == 1000 * 30 / 6_371_000
    assert band_latitude(-7, L30) == -band_latitude(7, L30)


def test_max_band_respects_cutoff():
    n = L30.max_band
    assert abs(band_latitude(n, L30)) < MAX_LATITUDE
    with pytest.raises(LayoutRangeError):
        band_latitude(n + 1, L30)


def test_step_count_covers_parallel():
    for i in (0, 100_000, -250_000, L30.max_band):
        circumference = 2 * math.pi * 6_371_000 * math.cos(band_latitude(i, L30))
        assert band_step_count(i, L30) == math.ceil(circumference / 30 - 1e-9)


def test_equator_cell_center():
    p = cell_center(CellIndex(0, 10), L30)
    assert p.lat == 0.0
    assert p.lon == pytest.approx(300 / 6_371_000, rel=1e-15)


def test_center_round_trip_random():
    rng = np.random.default_rng(3)
    cells = random_cells(rng, 20_000)
    centers = np.array([cell_center(c, L30) for c in cells])
    band, step = cells_of_points(centers[:, 0], centers[:, 1], L30)
    assert band.tolist() == [c.band for c in cells]
    assert step.tolist() == [c.step for c in cells]


def test_round_trip_at_antimeridian_cells():
    for i in (0, 1, -1, 12345, -200_000, L30.max_band, -L30.max_band):
        first, last = band_step_range(i, L30)
        for j in (first, first + 1, last - 1, last):
            c = CellIndex(i, j)
            assert cell_of_point(cell_center(c, L30), L30) == c


def test_point_belongs_to_nearest_center_along_band():
    rng = np.random.default_rng(5)
    lat = rng.uniform(-1.4, 1.4, 3000)
    lon = rng.uniform(-math.pi, math.pi, 3000)
    band, step = cells_of_points(lat, lon, L30)
    for k in range(0, 3000, 7):
        c = cell_center(CellIndex(int(band[k]), int(step[k])), L30)
        # within half a cell in both directions (as angles on this band)
        assert abs(lat[k] - c.lat) <= 0.5 * L30.band_angle + 1e-15
        step_angle = 30 / (6_371_000 * math.cos(c.lat))
        assert abs(wrap_longitude(lon[k] - c.lon)) <= 0.5 * step_angle * (1 + 1e-9)


def test_band_boundary_is_half_open():
    # a point exactly halfway between bands 0 and 1 belongs to band 1
    half = 0.5 * L30.band_angle
    assert cell_of_point(GeoPoint(half, 0.0), L30).band == 1
    assert cell_of_point(GeoPoint(-half, 0.0), L30).band == 0


def test_out_of_range_latitude():
    with pytest.raises(LayoutRangeError):
        cell_of_point(GeoPoint(math.radians(85.1), 0.0), L30)
    with pytest.raises(LayoutRangeError):
        cells_of_points([0.0, math.radians(-89)], [0.0, 0.0], L30)


@settings(max_examples=200, deadline=None)
@given(st.floats(-1.45, 1.45), st.floats(-math.pi, math.pi))
def test_cell_of_point_stable_under_recentering(lat, lon):
    c = cell_of_point(GeoPoint(lat, lon), L30)
    assert cell_of_point(cell_center(c, L30), L30) == c
    assert geodesic_distance(GeoPoint(lat, lon), cell_center(c, L30)) <= 30 * math.sqrt(2) / 2 + 0.05


def _all_centers(layout):
    """Independent enumeration of every cell center of the layout."""
    out = []
    for i in range(-layout.max_band, layout.max_band + 1):
        first, last = band_step_range(i, layout)
        for j in range(first, last + 1):
            out.append((CellIndex(i, j), cell_center(CellIndex(i, j), layout)))
    return out


def _brute_box(centers, sw, ne):
    out = []
    for cell, p in centers:
        if not sw.lat <= p.lat <= ne.lat:
            continue
        inside = sw.lon <= p.lon <= ne.lon if sw.lon <= ne.lon else (p.lon >= sw.lon or p.lon <= ne.lon)
        if inside:
            out.append(cell)
    return out


def test_cells_in_box_against_brute_force():
    layout = RegionLayout(cell_size=50_000)  # coarse so a full scan is cheap
    centers = _all_centers(layout)
    rng = np.random.default_rng(11)
    for _ in range(30):
        lat = np.sort(rng.uniform(-1.3, 1.3, 2))
        lon = rng.uniform(-math.pi, math.pi, 2)
        sw, ne = GeoPoint(lat[0], lon[0]), GeoPoint(lat[1], lon[1])
        assert cells_in_box(layout, sw, ne) == _brute_box(centers, sw, ne)


def test_cells_in_box_300m_count():
    c = GeoPoint.from_degrees(47.0, 8.0)
    dlat = 150 / 6_371_000
    dlon = 150 / (6_371_000 * math.cos(c.lat))
    cells = cells_in_box(L30, GeoPoint(c.lat - dlat, c.lon - dlon), GeoPoint(c.lat + dlat, c.lon + dlon))
    assert 90 <= len(cells) <= 121
    assert cells == sorted(cells)


def test_cells_in_box_antimeridian():
    sw = GeoPoint.from_degrees(-0.001, 179.999)
    ne = GeoPoint.from_degrees(0.001, -179.999)
    cells = cells_in_box(L30, sw, ne)
    first, last = band_step_range(0, L30)
    steps = {c.step for c in cells}
    assert first in steps and last in steps
    for c in cells:
        p = cell_center(c, L30)
        assert abs(p.lon_deg) >= 179.999 - 1e-9


def _central_angle_distance(lat1, lon1, lat2, lon2, r):
    # atan2 form of the great-circle distance, an independent formula
    dlon = lon2 - lon1
    num = math.hypot(math.cos(lat2) * math.sin(dlon),
                     math.cos(lat1) * math.sin(lat2) - math.sin(lat1) * math.cos(lat2) * math.cos(dlon))
    den = math.sin(lat1) * math.sin(lat2) + math.cos(lat1) * math.cos(lat2) * math.cos(dlon)
    return r * math.atan2(num, den)


def test_haversine_matches_vincenty_sphere_formula():
    rng = np.random.default_rng(2)
    for _ in range(200):
        lat1, lat2 = rng.uniform(-1.5, 1.5, 2)
        lon1, lon2 = rng.uniform(-math.pi, math.pi, 2)
        d = float(haversine(lat1, lon1, lat2, lon2))
        assert d == pytest.approx(_central_angle_distance(lat1, lon1, lat2, lon2, 6_371_000), abs=1e-6)


def test_haversine_known_values():
    assert float(haversine(0, 0, 0, math.pi)) == pytest.approx(math.pi * 6_371_000)
    assert float(haversine(0.3, 0.2, 0.3, 0.2)) == 0.0
    # one band step is exactly l meters along the meridian
    assert geodesic_distance(cell_center(CellIndex(5, 0), L30), cell_center(CellIndex(6, 0), L30)) == \
        pytest.approx(30.0, rel=1e-9)


def test_trapezoid_equator_and_monotone():
    assert trapezoid_ratio(0, L30) == pytest.approx(1.0, abs=1e-10)
    assert trapezoid_ratio(100_000, L30) > trapezoid_ratio(200_000, L30)


def test_shape_report_bound():
    rep = shape_report(L30)
    assert rep.min_ratio > 1 - 6.3e-4
    assert rep.side_deviation(L30) <= 0.019
    assert abs(rep.worst_band) in (L30.max_band, L30.max_band - 1)
    # agrees with the scalar definition at the reported band
    assert rep.min_ratio == pytest.approx(trapezoid_ratio(rep.worst_band, L30), rel=1e-12)


def test_mercator_round_trip():
    rng = np.random.default_rng(4)
    lat = rng.uniform(-1.48, 1.48, 1000)
    lon = rng.uniform(-math.pi, math.pi, 1000)
    x, y = mercator_forward(lat, lon)
    lat2, lon2 = mercator_inverse(x, y)
    assert np.allclose(lat2, lat, atol=1e-12) and np.allclose(lon2, lon, atol=1e-12)


def test_mercator_cells_shrink_with_latitude():
    m = MercatorLayout(30.0)
    assert mercator_cell_metric_size(0.0, m) == 30.0
    assert mercator_cell_metric_size(math.radians(60), m) == pytest.approx(15.0)
    p = GeoPoint.from_degrees(47.3, 8.5)
    c = mercator_cell_of_point(p, m)
    assert mercator_cell_of_point(mercator_cell_center(c, m), m) == c
    rows = layout_scale_table([0.0, 60.0], L30, m)
    assert rows[0]["density_ratio"] == pytest.approx(1.0)
    assert rows[1]["density_ratio"] == pytest.approx(4.0)


def test_cells_csv_round_trip(tmp_path):
    cells = [CellIndex(-5, -3), CellIndex(0, 0), CellIndex(7, 123)]
    path = tmp_path / "cells.csv"
    write_cells_csv(path, cells, L30)
    assert read_cells_csv(path) == cells
    header = path.read_text().splitlines()[0]
    assert header == "band_i,step_j,lat_deg,lon_deg"

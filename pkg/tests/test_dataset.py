import json
import math
from datetime import datetime, timezone

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cvgeoloc.dataset import (
    DuplicateIdError, EmptyDatasetError, InsufficientDataError, PhotoRecord, dedup_partition,
    load_manifest, make_training_pair, negative_mask, offset_in_cell_frame, offset_point,
    sample_batch, write_manifest,
)
from cvgeoloc.geodesy import GeoPoint, RegionLayout, cell_of_point, geodesic_distance

R = 6_371_000.0
L5 = RegionLayout(5.0)
ORIGIN = GeoPoint.from_degrees(47.0, 8.0)


def photo(pid, east=0.0, north=0.0):
    return PhotoRecord(pid, offset_point(ORIGIN, east, north, R), image=f"{pid}.ppm")


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n")


def test_manifest_parse_and_skip(tmp_path):
    path = tmp_path / "m.jsonl"
    write_lines(path, [
        json.dumps({"id": "a", "lat": 47.0, "lon": 8.0, "captured_at": "2019-05-01T10:00:00Z", "image": "a.ppm"}),
        "not json",
        json.dumps({"id": "b", "lat": 95.0, "lon": 8.0, "image": "b.ppm"}),
        json.dumps({"id": "c", "lat": 47.1, "lon": 8.1, "synthetic": {"lat": 47.1, "lon": 8.1, "heading_deg": 90}}),
        json.dumps({"id": "d", "lat": 47.1, "lon": 8.1}),
    ])
    m = load_manifest(path)
    assert [r.id for r in m] == ["a", "c"]
    assert m.skipped == 3
    assert m[0].captured_at == datetime(2019, 5, 1, 10, tzinfo=timezone.utc)
    assert m[1].pose.heading == pytest.approx(math.pi / 2)


def test_manifest_errors(tmp_path):
    path = tmp_path / "dup.jsonl"
    rec = json.dumps({"id": "a", "lat": 1.0, "lon": 2.0, "image": "x"})
    write_lines(path, [rec, rec])
    with pytest.raises(DuplicateIdError):
        load_manifest(path)
    write_lines(path, ["{}", "garbage"])
    with pytest.raises(EmptyDatasetError):
        load_manifest(path)


def test_manifest_round_trip(tmp_path):
    recs = [photo("x1", 3, 4), photo("x2", -10, 2)]
    write_manifest(tmp_path / "m.jsonl", recs)
    back = load_manifest(tmp_path / "m.jsonl")
    for a, b in zip(recs, back):
        assert a.id == b.id and geodesic_distance(a.location, b.location) < 1e-6


def test_dedup_partition_groups_by_5m_cell():
    photos = [photo("a", 0.1, 0.1), photo("b", 0.2, 0.3), photo("c", 40, 0), photo("d", 0, 40)]
    part = dedup_partition(photos, L5)
    sizes = sorted(len(part[k]) for k in part)
    assert sum(sizes) == 4
    # both near-origin photos share a cell iff the layout puts them together
    same = cell_of_point(photos[0].location, L5) == cell_of_point(photos[1].location, L5)
    assert sizes == ([1, 1, 2] if same else [1, 1, 1, 1])
    with pytest.raises(ValueError):
        dedup_partition(photos, RegionLayout(30.0))


def test_sample_batch_distinct_cells_and_insufficient():
    rng = np.random.default_rng(0)
    photos = [photo(f"p{k}", 7.0 * k, 0.0) for k in range(12)] + [photo("twin", 0.05, 0.05)]
    part = dedup_partition(photos, L5)
    for _ in range(50):
        batch = sample_batch(rng, part, 8)
        cells = {cell_of_point(p.location, L5) for p in batch}
        assert len(cells) == 8
    with pytest.raises(InsufficientDataError):
        sample_batch(rng, part, len(part) + 1)


def test_sample_batch_deterministic():
    photos = [photo(f"p{k}", 7.0 * k, 3.0 * k) for k in range(30)]
    part = dedup_partition(photos, L5)
    a = [p.id for p in sample_batch(np.random.default_rng(5), part, 8)]
    b = [p.id for p in sample_batch(np.random.default_rng(5), part, 8)]
    assert a == b


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-70, 70), st.floats(-179, 179))
def test_augmented_cell_contains_photo(seed, lat_deg, lon_deg):
    rec = PhotoRecord("p", GeoPoint.from_degrees(lat_deg, lon_deg), image="p.ppm")
    pair = make_training_pair(rec, np.random.default_rng(seed), 30.0, 5.0)
    tx, ty = offset_in_cell_frame(pair)
    assert max(abs(tx), abs(ty)) <= 10.0 + 1e-3
    assert tx == pytest.approx(pair.offset[0], abs=1e-3)
    assert ty == pytest.approx(pair.offset[1], abs=1e-3)
    assert 0.0 <= pair.cell_theta < 2 * math.pi


def test_augmentation_rejects_bad_margin():
    with pytest.raises(ValueError):
        make_training_pair(photo("a"), np.random.default_rng(0), 10.0, 5.0)


def _pairs_at(offsets):
    rng = np.random.default_rng(1)
    return [make_training_pair(photo(f"p{k}", e, n), rng) for k, (e, n) in enumerate(offsets)]


def test_negative_mask_radius():
    pairs = _pairs_at([(0, 0), (60, 0), (500, 0)])
    mask = negative_mask(pairs, 100.0)
    assert not mask.diagonal().any()
    assert not mask[0, 1] and not mask[1, 0]
    assert mask[0, 2] and mask[2, 0] and mask[1, 2]
    # brute force recomputation of the center distance rule
    for i, p in enumerate(pairs):
        for j, q in enumerate(pairs):
            if i != j:
                assert mask[i, j] == (geodesic_distance(p.photo.location, q.cell_center) >= 100.0)


def test_negative_mask_boundary_variant_is_stricter():
    pairs = _pairs_at([(0, 0), (105, 0), (300, 0)])
    center = negative_mask(pairs, 100.0)
    boundary = negative_mask(pairs, 100.0, use_boundary=True)
    assert np.all(boundary <= center)
    assert not boundary[0, 1]

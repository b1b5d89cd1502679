"""Fast built-in property checks, runnable from an installed package."""

from __future__ import annotations

import os
import tempfile
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .contrastive import dcl_loss
from .geodesy import (
    CellIndex, RegionLayout, band_step_range, cell_center, cell_of_point, shape_report,
)
from .gradcheck import finite_difference_check
from .mining import cluster_indices, pool_size_schedule
from .model import ModelConfig, init_params, load_checkpoint, save_checkpoint
from .raster import lod_sidelengths, patch_specs_for_cell
from .retrieval import EmbeddingDatabase, knn_exact


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def check_layout_round_trip(seed: int) -> str:
    layout = RegionLayout()
    rng = np.random.default_rng(seed)
    n = layout.max_band
    bad = 0
    for i in rng.integers(-n, n + 1, 10_000):
        lo, hi = band_step_range(int(i), layout)
        cell = CellIndex(int(i), int(rng.integers(lo, hi + 1)))
        bad += cell_of_point(cell_center(cell, layout), layout) != cell
    assert bad == 0, f"{bad} cells failed the round trip"
    return "10000 cells"


def check_shape_bound(seed: int) -> str:
    layout = RegionLayout()
    rep = shape_report(layout)
    assert rep.min_ratio > 1 - 6.3e-4, rep
    assert rep.side_deviation(layout) <= 0.019, rep
    return f"k_min={rep.min_ratio:.7f}, deviation={100 * rep.side_deviation(layout):.2f} cm"


def check_lod_geometry(seed: int) -> str:
    specs = patch_specs_for_cell(CellIndex(10, 20), RegionLayout(), 4, 76.8, 384)
    assert [s.sidelength for s in specs] == lod_sidelengths(4, 76.8) == [76.8, 153.6, 307.2, 614.4]
    res = [s.resolution for s in specs]
    assert np.allclose(res, [0.2, 0.4, 0.8, 1.6], rtol=1e-12, atol=0), res
    return "4 levels"


def check_loss_unit_value(seed: int) -> str:
    loss = dcl_loss(np.eye(2), ~np.eye(2, dtype=bool), 1.0, 0.0)
    assert abs(loss + 1.0) < 1e-12, loss
    return f"loss={loss!r}"


def check_gradients(seed: int) -> str:
    rep = finite_difference_check(seed)
    assert rep.passed(1e-4), rep
    return f"max relative error {rep.max_relative_error:.2e}"


def check_mining(seed: int) -> str:
    rng = np.random.default_rng(seed)
    for _ in range(100):
        b, groups = int(rng.integers(2, 7)), int(rng.integers(1, 6))
        q, r = _unit(rng.normal(size=(b * groups, 4))), _unit(rng.normal(size=(b * groups, 4)))
        clusters = cluster_indices(q, r, b, rng)
        assert sorted(k for c in clusters for k in c) == list(range(b * groups))
        assert all(len(c) == b for c in clusters)
    trace = pool_size_schedule(30, 2 ** 14, 400)
    assert trace[166] == 30 and trace[167] == 60, trace[160:170]
    return "100 pools"


def check_exact_search(seed: int) -> str:
    rng = np.random.default_rng(seed)
    cells = np.array([(i, j) for i in range(-5, 5) for j in range(-10, 10)])
    db = EmbeddingDatabase(RegionLayout(), cells, _unit(rng.normal(size=(len(cells), 8))))
    for _ in range(50):
        q = _unit(rng.normal(size=8))
        scores = [sum(float(a) * float(b) for a, b in zip(v, q)) for v in db.vectors]
        order = sorted(range(len(db)), key=lambda k: (-scores[k], tuple(db.cells[k])))
        got = knn_exact(db, q, 10).indices.tolist()
        assert got == order[:10], (got, order[:10])
    return "50 queries"


def check_file_round_trips(seed: int) -> str:
    rng = np.random.default_rng(seed)
    layout = RegionLayout()
    lo, hi = band_step_range(-7, layout)
    cells = np.array([[-7, lo], [-7, hi], [3, 0]])
    db = EmbeddingDatabase(layout, cells, _unit(rng.normal(size=(3, 4))))
    params = init_params(ModelConfig(image_size=8, patch_size=4, token_dim=4, heads=2, embed_dim=4,
                                     n_lods=2), seed)
    with tempfile.TemporaryDirectory() as tmp:
        paths = [os.path.join(tmp, n) for n in ("a.gcdb", "b.gcdb", "a.gcm", "b.gcm")]
        db.write(paths[0])
        EmbeddingDatabase.read(paths[0]).write(paths[1])
        save_checkpoint(paths[2], params)
        save_checkpoint(paths[3], load_checkpoint(paths[2]))
        blobs = [open(p, "rb").read() for p in paths]
    assert blobs[0] == blobs[1] and blobs[2] == blobs[3]
    return "database and checkpoint"


CHECKS: list[tuple[str, Callable[[int], str]]] = [
    ("layout round trip", check_layout_round_trip),
    ("cell shape bound", check_shape_bound),
    ("LOD geometry", check_lod_geometry),
    ("loss unit value", check_loss_unit_value),
    ("gradients", check_gradients),
    ("mining", check_mining),
    ("exact search", check_exact_search),
    ("file round trips", check_file_round_trips),
]


def run_selftest(seed: int = 0) -> list[CheckResult]:
    out = []
    for name, fn in CHECKS:
        t = time.perf_counter()
        try:
            detail, ok = fn(seed), True
        except AssertionError as e:
            detail, ok = f"FAILED: {e}", False
        out.append(CheckResult(name, ok, detail, time.perf_counter() - t))
    return out

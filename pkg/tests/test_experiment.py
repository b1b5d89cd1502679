import json

import numpy as np
import pytest

from cvgeoloc.experiment import ExperimentConfig, random_baseline, recall_table, run, variant
from cvgeoloc.geodesy import RegionLayout, cell_center
from cvgeoloc.model import ModelConfig
from cvgeoloc.retrieval import EmbeddingDatabase
from cvgeoloc.training import LodConfig, TrainConfig


def test_single_lod_variant_keeps_pixel_budget():
    cfg = variant(ExperimentConfig(), "single-lod")
    assert cfg.lod == LodConfig(1, 153.6, 64)
    assert cfg.model.n_lods == 1 and cfg.model.image_size == 64
    assert cfg.model.street_image_size == 32
    base = ExperimentConfig()
    assert cfg.lod.n * cfg.lod.pixels ** 2 == base.lod.n * base.lod.pixels ** 2
    # same finest ground resolution
    assert cfg.lod.d0 / cfg.lod.pixels == base.lod.d0 / base.lod.pixels


def test_variants():
    base = ExperimentConfig()
    assert variant(base, "mining") == base
    assert variant(base, "no-mining").train.mining is False
    with pytest.raises(ValueError):
        variant(base, "bogus")


def test_recall_table_and_baseline():
    layout = RegionLayout()
    cells = np.array([[0, j] for j in range(5)])
    vecs = np.eye(5)
    db = EmbeddingDatabase(layout, cells, vecs)

    class Photo:
        def __init__(self, loc):
            self.location = loc

    photos = [Photo(cell_center(db.cell(k), layout)) for k in range(2)]
    # query 0 ranks its own cell first; query 1 ranks a cell 90 m away first,
    # then the zero-score tie goes to step 0, which is 30 m away
    queries = np.array([vecs[0], vecs[4]])
    recall, _ = recall_table(db, photos, queries, 50.0, ns=(1, 2, 5))
    assert recall == {1: 0.5, 2: 1.0, 5: 1.0}
    # cells are 30 m apart along the equator: 2 of 5 within 50 m of cell 0, 3 of 5 of cell 1
    assert random_baseline(db, photos, 50.0) == pytest.approx(np.mean([2 / 5, 3 / 5]))


def test_tiny_run_writes_artifacts(tmp_path):
    cfg = ExperimentConfig(side_m=240.0, n_train=40, n_test=6,
                           model=ModelConfig(image_size=16, patch_size=8, token_dim=8, heads=2,
                                             embed_dim=8, n_lods=2, street_image_size=32),
                           lod=LodConfig(2, 40.0, 16),
                           train=TrainConfig(batch_b=4, iterations=10, s_max=8))
    summary = run(cfg, str(tmp_path), "mining", log_every=0)
    for name in ("train.jsonl", "test.jsonl", "metrics.csv", "model.gcm", "cells.gcdb",
                 "results.csv", "summary.json"):
        assert (tmp_path / name).exists(), name
    data = json.loads((tmp_path / "summary.json").read_text())
    assert set(data["recall"]) == {"R@1", "R@10", "R@100"}
    assert 0 < summary.cells < 100
    assert summary.recall[1] <= summary.recall[10] <= summary.recall[100]

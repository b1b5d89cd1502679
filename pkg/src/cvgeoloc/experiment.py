"""Synthetic end-to-end run: world, photos, training, database, recall.

The same pipeline backs the ``cvgeoloc`` subcommands and the narrative
scripts in ``notebooks/``; everything below is deterministic in the seed.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, replace

import numpy as np

from .dataset import write_manifest
from .geodesy import GeoPoint, RegionLayout, haversine
from .model import ModelConfig, embed_streets
from .retrieval import (
    EmbeddingDatabase, build_database, hits_within, knn_exact_batch, write_results_csv,
)
from .synthetic import SyntheticWorld, square_region, synth_photos
from .training import LodConfig, PairRenderer, TrainConfig, train

logger = logging.getLogger(__name__)

RECALL_NS = (1, 10, 100)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 1
    center_lat_deg: float = 47.0
    center_lon_deg: float = 8.0
    side_m: float = 3000.0
    # the world extends past the search box so the coarsest LOD of every
    # boundary cell is still fully covered
    margin_m: float = 320.0
    resolution: float = 1.0
    n_train: int = 2000
    n_test: int = 500
    model: ModelConfig = ModelConfig()
    lod: LodConfig = LodConfig()
    train: TrainConfig = TrainConfig()
    radius_m: float = 50.0
    threads: int = 1

    @property
    def center(self) -> GeoPoint:
        return GeoPoint.from_degrees(self.center_lat_deg, self.center_lon_deg)

    def world(self) -> SyntheticWorld:
        return SyntheticWorld.square(self.seed, self.center, self.side_m + 2 * self.margin_m,
                                     resolution=self.resolution)

    def search_box(self):
        return square_region(self.center, self.side_m)


def variant(config: ExperimentConfig, name: str) -> ExperimentConfig:
    """``mining`` (the reference run), ``no-mining`` or ``single-lod``.

    The single-LOD variant keeps the aerial pixel budget: one 64 px image at
    the finest ground resolution instead of four 32 px images.
    """
    if name == "mining":
        return config
    if name == "no-mining":
        return replace(config, train=replace(config.train, mining=False))
    if name == "single-lod":
        side = int(round(config.model.image_size * config.model.n_lods ** 0.5))
        d0 = config.lod.d0 * side / config.lod.pixels
        model = replace(config.model, image_size=side, n_lods=1,
                        street_image_size=config.model.street_image_size)
        return replace(config, model=model, lod=LodConfig(1, d0, side))
    raise ValueError(f"unknown variant {name!r}")


VARIANTS = ("mining", "no-mining", "single-lod")


def make_photos(config: ExperimentConfig, world: SyntheticWorld):
    rng = np.random.default_rng([config.seed, 7])
    box = config.search_box()
    return (synth_photos(world, config.n_train, rng, box=box),
            synth_photos(world, config.n_test, rng, box=box, prefix="q"))


def embed_photos(renderer: PairRenderer, params, photos, chunk: int = 256) -> np.ndarray:
    out = []
    for start in range(0, len(photos), chunk):
        imgs = np.stack([renderer.street_image(p) for p in photos[start:start + chunk]])
        out.append(embed_streets(params, imgs))
    return np.concatenate(out)


def random_baseline(db: EmbeddingDatabase, photos, radius_m: float) -> float:
    """Expected R@1 of a uniformly random cell: mean fraction of cells within range."""
    centers = db.centers
    frac = [np.mean(haversine(centers[:, 0], centers[:, 1], p.location.lat, p.location.lon,
                              db.layout.earth_radius) < radius_m) for p in photos]
    return float(np.mean(frac))


def recall_table(db: EmbeddingDatabase, photos, queries: np.ndarray, radius_m: float,
                 ns=RECALL_NS):
    """R@N within ``radius_m`` for each N, from a single exact search per query."""
    results = knn_exact_batch(db, queries, max(ns))
    hits = np.array([hits_within(db, r, p.location, radius_m) for r, p in zip(results, photos)])
    return {n: float(hits[:, :n].any(axis=1).mean()) for n in ns}, results


@dataclass
class RunSummary:
    variant: str
    recall: dict
    random_baseline: float
    cells: int
    seconds: dict
    final_batch_recall: float

    def to_json(self) -> str:
        d = asdict(self)
        d["recall"] = {f"R@{n}": v for n, v in self.recall.items()}
        return json.dumps(d, indent=2, sort_keys=True)


def run(config: ExperimentConfig, out_dir: str, name: str = "mining",
        log_every: int = 500) -> RunSummary:
    """Execute one variant and write its artifacts into ``out_dir``.

    Artifacts: ``train.jsonl``/``test.jsonl`` manifests, ``metrics.csv``,
    checkpoints, ``model.gcm``, ``cells.gcdb``, ``results.csv`` and
    ``summary.json``.
    """
    cfg = variant(config, name)
    os.makedirs(out_dir, exist_ok=True)
    timings = {}
    t = time.perf_counter()
    world = cfg.world()
    raster = world.aerial
    train_photos, test_photos = make_photos(cfg, world)
    write_manifest(os.path.join(out_dir, "train.jsonl"), train_photos)
    write_manifest(os.path.join(out_dir, "test.jsonl"), test_photos)
    timings["world"] = time.perf_counter() - t

    t = time.perf_counter()
    renderer = PairRenderer(raster, cfg.model, cfg.lod, world=world, threads=cfg.threads)
    result = train(renderer, train_photos, cfg.train, out_dir=out_dir, log_every=log_every)
    timings["train"] = time.perf_counter() - t

    t = time.perf_counter()
    layout = RegionLayout(cfg.train.cell_size, raster.earth_radius)
    db = build_database(result.params, layout, raster, cfg.search_box(), cfg.lod.n, cfg.lod.d0,
                        cfg.lod.pixels, threads=cfg.threads)
    db.write(os.path.join(out_dir, "cells.gcdb"))
    timings["database"] = time.perf_counter() - t

    t = time.perf_counter()
    queries = embed_photos(renderer, result.params, test_photos)
    recall, results = recall_table(db, test_photos, queries, cfg.radius_m)
    write_results_csv(os.path.join(out_dir, "results.csv"), db, test_photos,
                      results, cfg.radius_m)
    timings["eval"] = time.perf_counter() - t

    tail = result.metrics[-250:]
    summary = RunSummary(name, recall, random_baseline(db, test_photos, cfg.radius_m), len(db),
                         {k: round(v, 1) for k, v in timings.items()},
                         float(np.mean([m["batch_recall_at1"] for m in tail])))
    with open(os.path.join(out_dir, "summary.json"), "w") as f:
        f.write(summary.to_json() + "\n")
    logger.info("%s: %s", name, " ".join(f"R@{n} {v:.3f}" for n, v in recall.items()))
    return summary

"""Learning-rate schedule, Adam, batch rendering and the training loop."""

from __future__ import annotations

import csv
import itertools
import logging
import math
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Iterator, Sequence

import numpy as np

from .contrastive import (DegenerateBatchError, batch_recall_at1, dcl_loss, dcl_loss_and_grad,
                          similarity_matrix)
from .dataset import (DEDUP_CELL_SIZE, PhotoRecord, TrainingPair, dedup_partition,
                      make_training_pair, negative_mask, sample_batch)
from .geodesy import RegionLayout
from .mining import MiningState, mined_batches
from .model import ModelConfig, ModelParams, NumericError, embed_cells, embed_streets, init_params, \
    loss_and_grads, save_checkpoint
from .raster import GeoRaster, extract_patch_with_coverage, lod_patch_specs, read_ppm, resize_bilinear

__all__ = [
    "TrainConfig", "LodConfig", "AdamState", "PairRenderer", "TrainResult",
    "similarity_matrix", "dcl_loss", "dcl_loss_and_grad", "DegenerateBatchError",
    "lr_at", "adam_step", "sample_stream", "train", "METRICS_HEADER",
]

logger = logging.getLogger(__name__)

METRICS_HEADER = ["iteration", "lr", "loss", "batch_recall_at1", "pool_size_s"]


@dataclass(frozen=True)
class LodConfig:
    n: int = 4
    d0: float = 76.8
    pixels: int = 32

    @classmethod
    def parse(cls, text: str) -> "LodConfig":
        """Parse the ``n,d0,pixels`` command-line form."""
        parts = text.split(",")
        if len(parts) != 3:
            raise ValueError(f"--lod expects n,d0,pixels, got {text!r}")
        return cls(int(parts[0]), float(parts[1]), int(parts[2]))

    def __str__(self):
        return f"{self.n},{self.d0!r},{self.pixels}"


@dataclass(frozen=True)
class TrainConfig:
    batch_b: int = 8
    iterations: int = 5000
    lr_peak: float = 1e-3
    warmup_iters: int = 250
    temperature_tau: float = 1.0 / 36.0
    label_smoothing_eps: float = 0.1
    seed: int = 0
    cell_size: float = 30.0
    l_delta: float = 5.0
    mask_radius_m: float = 100.0
    mask_boundary: bool = False
    mining: bool = True
    s_max: int = 1024
    min_iters_per_increase: int = 0  # 0: ceil(5000 / b)
    checkpoint_every: int = 1000
    threads: int = 1

    def __post_init__(self):
        if self.batch_b < 2:
            raise ValueError("batch size must be >= 2")
        if not 0 <= self.label_smoothing_eps < 1:
            raise ValueError("label smoothing must be in [0, 1)")
        if not self.temperature_tau > 0:
            raise ValueError("temperature must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def lr_at(iteration: int, config: TrainConfig) -> float:
    """Linear warmup to ``lr_peak`` followed by cosine decay to zero."""
    if not 0 <= iteration < config.iterations:
        raise ValueError(f"iteration {iteration} outside [0, {config.iterations})")
    w = config.warmup_iters
    if iteration < w:
        return config.lr_peak * iteration / w
    # the last iteration lands exactly on the end of the cosine
    span = max(config.iterations - 1 - w, 1)
    progress = (iteration - w) / span
    return config.lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam update with bias correction."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for k, g in grads.items():
        if k not in state.m:
            state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params.tensors[k] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def photo_noise_seed(photo: PhotoRecord) -> int:
    return zlib.crc32(photo.id.encode("utf-8"))


class PairRenderer:
    """Turns photos and augmented cells into model inputs.

    Street images come from the synthetic world when a photo carries a pose,
    otherwise from the PPM file referenced by the record.
    """

    def __init__(self, raster: GeoRaster, model_config: ModelConfig, lod: LodConfig,
                 world=None, threads: int = 1, image_root: str | None = None):
        if lod.pixels != model_config.image_size or lod.n != model_config.n_lods:
            raise ValueError("LOD settings do not match the model config")
        self.raster = raster
        self.config = model_config
        self.lod = lod
        self.world = world
        self.threads = max(1, int(threads))
        self.image_root = image_root

    def _map(self, fn, items):
        if self.threads == 1 or len(items) < 2:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(self.threads) as ex:
            return list(ex.map(fn, items))

    def street_image(self, photo: PhotoRecord, noise_seed: int | None = None) -> np.ndarray:
        if photo.pose is not None:
            from .synthetic import synth_street_view
            if self.world is None:
                raise ValueError("synthetic photo without a synthetic world")
            seed = photo_noise_seed(photo) if noise_seed is None else noise_seed
            return synth_street_view(self.world, photo.pose.position, photo.pose.heading, seed)
        path = photo.image
        if self.image_root and not os.path.isabs(path):
            path = os.path.join(self.image_root, path)
        img = read_ppm(path)
        size = self.config.street_image_size
        return img if img.shape[:2] == (size, size) else resize_bilinear(img, size)

    def cell_images(self, center, theta: float) -> tuple[np.ndarray, float]:
        specs = lod_patch_specs(center, self.lod.n, self.lod.d0, self.lod.pixels, theta)
        out = np.empty((len(specs), self.lod.pixels, self.lod.pixels, 3))
        cov = 0.0
        for k, spec in enumerate(specs):
            out[k], c = extract_patch_with_coverage(self.raster, spec)
            cov += c
        return out, cov / len(specs)

    def streets(self, pairs: Sequence[TrainingPair]) -> np.ndarray:
        return np.stack(self._map(lambda p: self.street_image(p.photo, p.noise_seed), pairs))

    def cells(self, pairs: Sequence[TrainingPair]) -> np.ndarray:
        return np.stack(self._map(lambda p: self.cell_images(p.cell_center, p.cell_theta)[0], pairs))

    def embed_pairs(self, params: ModelParams, pairs: Sequence[TrainingPair]):
        return embed_streets(params, self.streets(pairs)), embed_cells(params, self.cells(pairs))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def sample_stream(rng: np.random.Generator, partition, b: int, cell_size: float,
                  l_delta: float, earth_radius: float) -> Iterator[TrainingPair]:
    """Endless stream of augmented pairs, drawn b at a time from the 5 m partition."""
    while True:
        for photo in sample_batch(rng, partition, b):
            yield make_training_pair(photo, rng, cell_size, l_delta, earth_radius)


@dataclass
class TrainResult:
    params: ModelParams
    metrics: list[dict]
    checkpoints: list[str]


def _fmt(x: float) -> str:
    return repr(float(x))


def write_metrics_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([r["iteration"], _fmt(r["lr"]), _fmt(r["loss"]),
                        _fmt(r["batch_recall_at1"]), r["pool_size_s"]])


def train(renderer: PairRenderer, photos: Sequence[PhotoRecord], train_config: TrainConfig,
          params: ModelParams | None = None, out_dir: str | None = None,
          log_every: int = 250) -> TrainResult:
    """Run the contrastive training loop.

    Writes ``metrics.csv``, periodic ``checkpoint_XXXXXX.gcm`` files and a
    final ``model.gcm`` into ``out_dir`` when given.
    """
    cfg = train_config
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    init_seed = int(seeds[0].generate_state(1)[0])
    stream_rng = np.random.default_rng(seeds[1])
    cluster_rng = np.random.default_rng(seeds[2])
    if params is None:
        params = init_params(renderer.config, init_seed)
    radius = renderer.raster.earth_radius

    partition = dedup_partition(photos, RegionLayout(DEDUP_CELL_SIZE, radius))
    stream = sample_stream(stream_rng, partition, cfg.batch_b, cfg.cell_size, cfg.l_delta, radius)
    state = MiningState(cfg.batch_b, max(cfg.s_max, cfg.batch_b),
                        min_iters_per_increase=cfg.min_iters_per_increase)
    if cfg.mining:
        batches = mined_batches(state, lambda: params, stream, cfg.batch_b, cluster_rng,
                                renderer.embed_pairs)
    else:
        batches = iter(lambda: list(itertools.islice(stream, cfg.batch_b)), None)

    adam = AdamState()
    metrics: list[dict] = []
    checkpoints: list[str] = []
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    for it in range(cfg.iterations):
        pairs = next(batches)
        streets = renderer.streets(pairs)
        cells = renderer.cells(pairs)
        mask = negative_mask(pairs, cfg.mask_radius_m, use_boundary=cfg.mask_boundary,
                             cell_size=cfg.cell_size, earth_radius=radius)
        loss, grads, S = loss_and_grads(params, streets, cells, mask, cfg.temperature_tau,
                                        cfg.label_smoothing_eps, skip_degenerate=True,
                                        with_similarity=True)
        lr = lr_at(it, cfg)
        adam_step(params, grads, adam, lr)
        row = {"iteration": it, "lr": lr, "loss": loss,
               "batch_recall_at1": batch_recall_at1(S, mask),
               "pool_size_s": state.pool_size if cfg.mining else cfg.batch_b}
        metrics.append(row)
        if log_every and (it % log_every == 0 or it == cfg.iterations - 1):
            window = metrics[-log_every:]
            logger.info("iter %d lr %.2e loss %.4f recall@1 %.3f s %d", it, lr,
                        np.mean([r["loss"] for r in window]),
                        np.mean([r["batch_recall_at1"] for r in window]), row["pool_size_s"])
        if out_dir and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            path = os.path.join(out_dir, f"checkpoint_{it + 1:06d}.gcm")
            save_checkpoint(path, params)
            checkpoints.append(path)
    if out_dir:
        write_metrics_csv(os.path.join(out_dir, "metrics.csv"), metrics)
        save_checkpoint(os.path.join(out_dir, "model.gcm"), params)
    return TrainResult(params, metrics, checkpoints)

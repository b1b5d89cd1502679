"""Synthetic embedding databases for exercising search code.

Independent Gaussian vectors in 64 dimensions have no neighborhood structure
at all, which is not what a trained model produces: nearby cells get similar
embeddings. These generators place cells on a square grid and embed them
with random Fourier features of their grid position plus isotropic noise,
giving a low intrinsic dimension like real cell embeddings.
"""

from __future__ import annotations

import math

import numpy as np

from .geodesy import RegionLayout
from .retrieval import EmbeddingDatabase

__all__ = ["structured_database", "structured_queries", "random_database"]


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _features(points: np.ndarray, dim: int, seed: int, frequency: float) -> np.ndarray:
    freqs = np.random.default_rng(seed).normal(scale=frequency, size=(2, dim // 2))
    z = 2 * math.pi * points @ freqs
    return _unit(np.concatenate([np.cos(z), np.sin(z)], axis=-1))


def _noisy(v: np.ndarray, rng: np.random.Generator, noise: float) -> np.ndarray:
    return _unit(v + noise * rng.normal(size=v.shape) / math.sqrt(v.shape[1]))


def structured_database(count: int, dim: int = 64, seed: int = 0, noise: float = 0.3,
                        frequency: float = 3.0, layout: RegionLayout | None = None) -> EmbeddingDatabase:
    """``count`` cells on a near-square grid with smoothly varying embeddings."""
    if dim % 2:
        raise ValueError("dim must be even")
    side = int(math.ceil(math.sqrt(count)))
    band, step = np.divmod(np.arange(count), side)
    pos = np.stack([band, step], axis=1) / side
    rng = np.random.default_rng([seed, 1])
    vectors = _noisy(_features(pos, dim, seed, frequency), rng, noise)
    cells = np.stack([band, step], axis=1)
    return EmbeddingDatabase(layout or RegionLayout(), cells, vectors)


def structured_queries(count: int, dim: int = 64, seed: int = 1, database_seed: int = 0,
                       noise: float = 0.3, frequency: float = 3.0) -> np.ndarray:
    """Queries drawn from the same embedding field as :func:`structured_database`."""
    rng = np.random.default_rng([seed, 2])
    pos = rng.random((count, 2))
    return _noisy(_features(pos, dim, database_seed, frequency), rng, noise)


def random_database(count: int, dim: int = 64, seed: int = 0) -> EmbeddingDatabase:
    """Uniform random unit vectors; the hardest case for graph search."""
    rng = np.random.default_rng(seed)
    side = int(math.ceil(math.sqrt(count)))
    band, step = np.divmod(np.arange(count), side)
    return EmbeddingDatabase(RegionLayout(), np.stack([band, step], axis=1), _unit(rng.normal(size=(count, dim))))

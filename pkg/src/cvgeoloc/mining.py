"""Streaming hard example mining.

The next ``s`` samples of the training stream are embedded with the current
model, grouped into ``s / b`` clusters of mutually confusable samples, and the
clusters are handed to the training loop as batches. ``s`` starts at ``b``
(plain random batches) and doubles after a scanned pool has been consumed,
provided enough iterations have passed since the last increase.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

MIN_ITERS_NUMERATOR = 5000


class StreamExhausted(Exception):
    """The sample stream ran out before a full pool could be scanned."""


def max_pool_size(b: int, s_max: int) -> int:
    """Largest b * 2**k that does not exceed s_max."""
    if s_max < b:
        raise ValueError(f"s_max={s_max} is smaller than the batch size {b}")
    s = b
    while 2 * s <= s_max:
        s *= 2
    return s


@dataclass
class MiningState:
    b: int
    s_max: int
    pool_size: int = 0
    iterations_since_increase: int = 0
    min_iters_per_increase: int = 0

    def __post_init__(self):
        if self.pool_size == 0:
            self.pool_size = self.b
        if self.min_iters_per_increase == 0:
            self.min_iters_per_increase = math.ceil(MIN_ITERS_NUMERATOR / self.b)
        self.cap = max_pool_size(self.b, self.s_max)

    def record_iteration(self) -> None:
        self.iterations_since_increase += 1

    def pool_consumed(self) -> None:
        """Double s once a pool is used up and the iteration floor is met."""
        if self.iterations_since_increase >= self.min_iters_per_increase and self.pool_size < self.cap:
            self.pool_size *= 2
            self.iterations_since_increase = 0


def next_pool_size(state: MiningState, b: int | None = None) -> int:
    if b is not None and b != state.b:
        raise ValueError("batch size differs from the mining state")
    return state.pool_size


def pool_size_schedule(b: int, s_max: int, iterations: int,
                       min_iters_per_increase: int | None = None) -> list[int]:
    """Pool size in effect at every training iteration of a simulated run."""
    state = MiningState(b, s_max, min_iters_per_increase=min_iters_per_increase or 0)
    trace: list[int] = []
    while len(trace) < iterations:
        s = next_pool_size(state)
        for _ in range(s // b):
            if len(trace) == iterations:
                break
            trace.append(s)
            state.record_iteration()
        else:
            state.pool_consumed()
    return trace


@dataclass
class MiningPool:
    queries: np.ndarray     # (s, E) street embeddings
    references: np.ndarray  # (s, E) cell embeddings
    samples: list


EmbedPairs = Callable[[object, Sequence], tuple[np.ndarray, np.ndarray]]


def scan_pool(params, sample_stream: Iterator, s: int, embed_pairs: EmbedPairs) -> MiningPool:
    """Consume exactly ``s`` samples and embed both sides with ``params``.

    Raises:
        StreamExhausted: fewer than ``s`` samples were left.
    """
    samples = list(itertools.islice(sample_stream, s))
    if len(samples) < s:
        raise StreamExhausted(f"stream ended after {len(samples)} of {s} samples")
    q, r = embed_pairs(params, samples)
    return MiningPool(np.asarray(q, dtype=np.float64), np.asarray(r, dtype=np.float64), samples)


def cluster_indices(queries: np.ndarray, references: np.ndarray, b: int,
                    rng: np.random.Generator) -> list[list[int]]:
    """Greedy centroid clustering of pool indices into groups of ``b``.

    Each cluster starts from a uniformly random remaining sample; b - 1 times
    the remaining sample whose reference embedding is most similar to the
    mean query embedding of the cluster so far is added. Ties go to the
    lowest pool index.
    """
    s = len(queries)
    if s % b:
        raise ValueError(f"pool size {s} is not divisible by b={b}")
    if s == b:
        return [list(range(s))]
    remaining = np.ones(s, dtype=bool)
    clusters = []
    while remaining.any():
        idx = np.flatnonzero(remaining)
        seed = int(idx[rng.integers(len(idx))])
        remaining[seed] = False
        members = [seed]
        q_sum = queries[seed].copy()
        for _ in range(b - 1):
            idx = np.flatnonzero(remaining)
            # the centroid's norm does not change the argmax
            sims = references[idx] @ (q_sum / len(members))
            pick = int(idx[int(np.argmax(sims))])
            remaining[pick] = False
            members.append(pick)
            q_sum += queries[pick]
        clusters.append(members)
    return clusters


def cluster_pool(pool: MiningPool, b: int, rng: np.random.Generator) -> list[list]:
    return [[pool.samples[k] for k in c]
            for c in cluster_indices(pool.queries, pool.references, b, rng)]


def mined_batches(state: MiningState, get_params: Callable[[], object], stream: Iterator,
                  b: int, rng: np.random.Generator, embed_pairs: EmbedPairs) -> Iterator[list]:
    """Yield training batches, scanning and clustering a new pool as needed.

    ``get_params`` is called once per pool, so all embeddings of a pool come
    from one parameter snapshot. Stops when the stream is exhausted.
    """
    while True:
        s = next_pool_size(state, b)
        if s == b:
            # clustering a single batch is the identity; skip the forward pass
            batch = list(itertools.islice(stream, b))
            if len(batch) < b:
                return
            batches = [batch]
        else:
            try:
                pool = scan_pool(get_params(), stream, s, embed_pairs)
            except StreamExhausted:
                return
            batches = cluster_pool(pool, b, rng)
        for batch in batches:
            yield batch
            state.record_iteration()
        state.pool_consumed()

"""Hierarchical navigable small-world graph for approximate inner-product search."""

from __future__ import annotations

import heapq
import math

import numpy as np

from .retrieval import EmbeddingDatabase, RetrievalResult, _ranked, row_scores

__all__ = ["GraphIndex", "knn_graph", "EmptyIndexError", "build_graph_index"]


class EmptyIndexError(ValueError):
    pass


class GraphIndex:
    """Layered proximity graph over the rows of an :class:`EmbeddingDatabase`.

    Every layer keeps at most ``m`` out-neighbors per node. Similarity is the
    dot product, so larger is closer. Construction is deterministic given
    ``seed``.
    """

    def __init__(self, db: EmbeddingDatabase, m: int = 16, ef_construction: int = 200,
                 ef_search: int = 64, seed: int = 0):
        if len(db) == 0:
            raise EmptyIndexError("cannot index an empty database")
        if m < 2:
            raise ValueError("M must be >= 2")
        self.db = db
        self.m = m
        self.ef_construction = ef_construction
        self.ef_search = ef_search
        self.vectors = db.vectors.astype(np.float64)
        n = len(db)
        rng = np.random.default_rng(seed)
        level_mult = 1.0 / math.log(m)
        self.levels = np.floor(-np.log(1.0 - rng.random(n)) * level_mult).astype(int)
        self.layers: list[dict[int, list[int]]] = [dict() for _ in range(self.levels.max() + 1)]
        self.entry = -1
        for node in range(n):
            self._insert(node)
        self._repair_reachability()

    def __len__(self):
        return len(self.db)

    @property
    def max_level(self) -> int:
        return int(self.levels[self.entry])

    def neighbors(self, node: int, layer: int = 0) -> list[int]:
        return self.layers[layer].get(node, [])

    # -- search primitives --------------------------------------------------

    def _sims(self, q: np.ndarray, nodes) -> np.ndarray:
        return self.vectors[nodes] @ q

    def _greedy(self, q: np.ndarray, start: int, layer: int) -> int:
        cur, cur_sim = start, float(self.vectors[start] @ q)
        improved = True
        while improved:
            improved = False
            nbrs = self.layers[layer].get(cur)
            if not nbrs:
                break
            sims = self._sims(q, nbrs)
            k = int(np.argmax(sims))
            if sims[k] > cur_sim:
                cur, cur_sim = nbrs[k], float(sims[k])
                improved = True
        return cur

    def _search_layer(self, q: np.ndarray, entry: int, ef: int, layer: int) -> list[tuple[float, int]]:
        """Beam search; returns (similarity, node) pairs, best first."""
        s0 = float(self.vectors[entry] @ q)
        visited = {entry}
        candidates = [(-s0, entry)]   # best first
        results = [(s0, entry)]       # worst first
        adj = self.layers[layer]
        while candidates:
            neg, node = heapq.heappop(candidates)
            if -neg < results[0][0] and len(results) >= ef:
                break
            fresh = [v for v in adj.get(node, ()) if v not in visited]
            if not fresh:
                continue
            visited.update(fresh)
            for v, s in zip(fresh, self._sims(q, fresh).tolist()):
                if len(results) < ef or s > results[0][0]:
                    heapq.heappush(candidates, (-s, v))
                    heapq.heappush(results, (s, v))
                    if len(results) > ef:
                        heapq.heappop(results)
        return sorted(results, key=lambda t: (-t[0], t[1]))

    def _select(self, found: list[tuple[float, int]]) -> list[int]:
        """Diversity heuristic: keep a candidate only if it is closer to the
        query than to every neighbor already kept; fill up with the rest."""
        kept: list[int] = []
        pruned: list[int] = []
        for s, v in found:
            if len(kept) == self.m:
                break
            if kept and np.any(self._sims(self.vectors[v], kept) > s):
                pruned.append(v)
            else:
                kept.append(v)
        for v in pruned:
            if len(kept) == self.m:
                break
            kept.append(v)
        return kept

    def _insert(self, node: int) -> None:
        level = int(self.levels[node])
        for layer in range(level + 1):
            self.layers[layer][node] = []
        if self.entry < 0:
            self.entry = node
            return
        q = self.vectors[node]
        cur = self.entry
        for layer in range(self.max_level, level, -1):
            cur = self._greedy(q, cur, layer)
        for layer in range(min(level, self.max_level), -1, -1):
            found = self._search_layer(q, cur, self.ef_construction, layer)
            chosen = self._select(found)
            self.layers[layer][node] = chosen
            for v in chosen:
                self._link(v, node, layer)
            cur = found[0][1]
        if level > self.max_level:
            self.entry = node

    def _link(self, src: int, dst: int, layer: int) -> None:
        nbrs = self.layers[layer][src]
        if len(nbrs) < self.m:
            nbrs.append(dst)
            return
        cand = nbrs + [dst]
        sims = self._sims(self.vectors[src], cand)
        order = sorted(range(len(cand)), key=lambda k: (-sims[k], cand[k]))
        self.layers[layer][src] = self._select([(float(sims[k]), cand[k]) for k in order])

    def reachable(self) -> np.ndarray:
        """Nodes reachable from the entry point along layer-0 edges."""
        seen = np.zeros(len(self), dtype=bool)
        seen[self.entry] = True
        stack = [self.entry]
        adj = self.layers[0]
        while stack:
            for v in adj[stack.pop()]:
                if not seen[v]:
                    seen[v] = True
                    stack.append(v)
        return seen

    def _repair_reachability(self) -> None:
        # pruning can orphan a node; hang each orphan off its most similar
        # reachable node, swapping out that node's least similar edge if full
        for _ in range(len(self)):
            seen = self.reachable()
            orphans = np.flatnonzero(~seen)
            if not len(orphans):
                return
            u = int(orphans[0])
            sources = np.flatnonzero(seen)
            src = int(sources[np.argmax(self.vectors[sources] @ self.vectors[u])])
            nbrs = self.layers[0][src]
            if len(nbrs) >= self.m:
                sims = self._sims(self.vectors[src], nbrs)
                nbrs.pop(int(np.argmin(sims)))
            nbrs.append(u)
        raise RuntimeError("could not make every node reachable")

    def search(self, query: np.ndarray, ef: int) -> list[int]:
        q = np.asarray(query, dtype=np.float64)
        cur = self.entry
        for layer in range(self.max_level, 0, -1):
            cur = self._greedy(q, cur, layer)
        return [v for _, v in self._search_layer(q, cur, ef, 0)]


def build_graph_index(db: EmbeddingDatabase, m: int = 16, ef_construction: int = 200,
                      ef_search: int = 64, seed: int = 0) -> GraphIndex:
    return GraphIndex(db, m, ef_construction, ef_search, seed)


def knn_graph(index: GraphIndex, query: np.ndarray, n: int, ef_search: int | None = None) -> RetrievalResult:
    """Approximate top-N; candidates are re-scored exactly like :func:`knn_exact`."""
    if len(index) == 0:
        raise EmptyIndexError("empty index")
    ef = index.ef_search if ef_search is None else ef_search
    if n < 1:
        raise ValueError("N must be >= 1")
    if ef < n:
        raise ValueError(f"ef_search={ef} is smaller than N={n}")
    found = np.array(sorted(index.search(query, ef)), dtype=np.int64)
    scores = row_scores(index.db.vectors[found], query)
    return _ranked(index.db, found, scores, n)

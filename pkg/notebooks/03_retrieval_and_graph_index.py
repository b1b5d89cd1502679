# ---
# jupyter:
#   jupytext:
#     text_representation:
#       extension: .py
#       format_name: percent
#       format_version: '1.3'
# ---

# %% [markdown]
# # Exact search and the graph index
#
# Searching a region means scoring every cell embedding against the query.
# The exact path is one matrix product plus a partial sort. Ties are broken
# by (band, step), so results do not depend on row order. The graph index
# trades a little recall for far fewer distance evaluations.
#
# The database here is synthetic. Vectors vary smoothly with grid position,
# like a trained model's cell embeddings. Uniformly random unit vectors are a
# known worst case for graph indexes and say little about real use.

# %%
import time

import numpy as np

from cvgeoloc.hnsw import build_graph_index, knn_graph
from cvgeoloc.retrieval import knn_exact
from cvgeoloc.vectors import random_database, structured_database, structured_queries

db = structured_database(10_000, 64, seed=0)
queries = structured_queries(200, 64, seed=1, database_seed=0)
print(len(db), "cells,", db.vectors.shape[1], "dims")

# %%
t = time.perf_counter()
exact = [set(knn_exact(db, q, 10).indices.tolist()) for q in queries]
print(f"exact top-10 for {len(queries)} queries in {time.perf_counter() - t:.2f}s")

t = time.perf_counter()
index = build_graph_index(db)
print(f"graph build {time.perf_counter() - t:.1f}s")

# %% [markdown]
# ## Overlap with the exact top 10 as the beam widens

# %%
for ef in (10, 16, 32, 64, 128, 256):
    t = time.perf_counter()
    hits = [len(exact[k] & set(knn_graph(index, q, 10, ef).indices.tolist())) / 10
            for k, q in enumerate(queries)]
    ms = 1000 * (time.perf_counter() - t) / len(queries)
    print(f"ef {ef:4d}  overlap {np.mean(hits):.3f}  {ms:.2f} ms/query")

# %% [markdown]
# ## Unstructured vectors
#
# With i.i.d. random vectors in 64 dimensions all pairwise similarities are
# close to zero, so the greedy walk has nothing to follow.

# %%
rdb = random_database(2_000, 64, seed=0)
rindex = build_graph_index(rdb)
rq = structured_queries(50, 64, seed=5, database_seed=9)
rexact = [set(knn_exact(rdb, q, 10).indices.tolist()) for q in rq]
for ef in (16, 64, 256):
    hits = [len(rexact[k] & set(knn_graph(rindex, q, 10, ef).indices.tolist())) / 10
            for k, q in enumerate(rq)]
    print(f"ef {ef:4d}  overlap {np.mean(hits):.3f}")

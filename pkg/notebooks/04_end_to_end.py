# ---
# jupyter:
#   jupytext:
#     text_representation:
#       extension: .py
#       format_name: percent
#       format_version: '1.3'
# ---

# %% [markdown]
# # End to end: train, build the region database, localize test photos
#
# Three variants share one world and one photo set. The reference run uses
# hard batch mining. The others switch mining off, or replace the four LOD
# images with a single image of the same pixel budget.
#
# Set `CVGEOLOC_FULL=1` for the 3 km, 5000 iteration configuration. The
# default is a small smoke-sized version that finishes in a few minutes.

# %%
import json
import os
import tempfile
from dataclasses import replace

from cvgeoloc.experiment import VARIANTS, ExperimentConfig, run

config = ExperimentConfig()
if not os.environ.get("CVGEOLOC_FULL"):
    config = replace(config, side_m=600.0, n_train=400, n_test=100,
                     train=replace(config.train, iterations=400, warmup_iters=40,
                                   min_iters_per_increase=60, checkpoint_every=10_000))
print(config.side_m, "m square,", config.train.iterations, "iterations")

# %%
out = tempfile.mkdtemp(prefix="cvgeoloc-")
summaries = {name: run(config, os.path.join(out, name), name, log_every=0) for name in VARIANTS}

# %% [markdown]
# ## Recall within 50 m
#
# The random baseline is the chance that a uniformly drawn cell lies within
# 50 m of the camera.

# %%
for name, s in summaries.items():
    r = "  ".join(f"R@{n} {v:.3f}" for n, v in s.recall.items())
    print(f"{name:10s} {r}  random {s.random_baseline:.4f}  cells {s.cells}  "
          f"train {s.seconds['train']:.0f}s")

# %%
print(json.dumps(json.loads(summaries["mining"].to_json()), indent=1))
print("artifacts in", out)

# ---
# jupyter:
#   jupytext:
#     text_representation:
#       extension: .py
#       format_name: percent
#       format_version: '1.3'
# ---

# %% [markdown]
# # Synthetic world and a short training run
#
# The synthetic world is multi-octave value noise rendered as an RGB aerial
# raster. A street photo is a rotated crop of that raster just ahead of the
# camera, plus photometric noise. The camera heading is unknown to the model,
# so the aerial side is trained with randomly rotated cells.

# %%
import numpy as np

from cvgeoloc.geodesy import GeoPoint
from cvgeoloc.model import ModelConfig
from cvgeoloc.synthetic import SyntheticWorld, square_region, synth_photos
from cvgeoloc.training import LodConfig, PairRenderer, TrainConfig, train

center = GeoPoint.from_degrees(47.0, 8.0)
world = SyntheticWorld.square(3, center, 1000.0, resolution=1.0)
print("raster", world.aerial.data.shape, "at", world.resolution, "m/px")

# %% [markdown]
# ## One photo and the four LOD images of its cell
#
# The LOD images share a center and grow by a factor of two in ground size
# while keeping the same pixel count.

# %%
model = ModelConfig()
lod = LodConfig()
renderer = PairRenderer(world.aerial, model, lod, world=world)
photos = synth_photos(world, 400, np.random.default_rng(0), box=square_region(center, 600.0))
street = renderer.street_image(photos[0])
cells, coverage = renderer.cell_images(photos[0].location, 0.0)
print("street image", street.shape, "mean", street.mean().round(3))
print("cell images", cells.shape, "coverage", coverage)
print("per-LOD mean intensity", cells.mean(axis=(1, 2, 3)).round(3))

# %% [markdown]
# ## Training
#
# A few hundred iterations on 400 photos are enough to see the in-batch
# recall climb well above chance (1 / b). The pool of candidates for hard
# batch mining doubles on schedule.

# %%
cfg = TrainConfig(batch_b=8, iterations=300, warmup_iters=30, s_max=64,
                  min_iters_per_increase=50, seed=0)
res = train(renderer, photos, cfg, log_every=0)
for k in range(0, cfg.iterations, 50):
    window = res.metrics[k:k + 50]
    print(f"iters {k:3d}-{k + 49:3d}  loss {np.mean([m['loss'] for m in window]):7.3f}  "
          f"batch R@1 {np.mean([m['batch_recall_at1'] for m in window]):.2f}  "
          f"pool {window[-1]['pool_size_s']}")

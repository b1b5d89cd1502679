# ---
# jupyter:
#   jupytext:
#     text_representation:
#       extension: .py
#       format_name: percent
#       format_version: '1.3'
# ---

# %% [markdown]
# # Consistent-scale cells versus Web Mercator tiles
#
# Cells are l x l squares on the sphere. Each latitude band i sits at
# phi_i = i * l / r and is cut into ceil(2 pi r cos(phi_i) / l) steps, so a
# cell covers the same ground area everywhere. Web Mercator tiles instead
# shrink on the ground as 1 / cos(lat).

# %%
import numpy as np

from cvgeoloc.geodesy import (
    GeoPoint, MercatorLayout, RegionLayout, band_step_count, cell_center, cell_of_point,
    cells_in_box, layout_scale_table, shape_report,
)

layout = RegionLayout(cell_size=30.0)
print("bands on each side of the equator:", layout.max_band)
for lat in (0.0, 45.0, 60.0, 80.0):
    i = cell_of_point(GeoPoint.from_degrees(lat, 0.0), layout).band
    print(f"lat {lat:4.0f}  band {i:7d}  steps {band_step_count(i, layout):8d}")

# %% [markdown]
# ## Shape error of a cell
#
# The north and south edges of a cell lie on different parallels, so a cell
# is a slight trapezoid. The worst ratio of its parallel sides occurs next to
# the latitude cutoff.

# %%
rep = shape_report(layout)
print(f"worst band {rep.worst_band}, k = {rep.min_ratio:.8f}")
print(f"side length difference {100 * rep.side_deviation(layout):.3f} cm on a 30 m cell")

# %% [markdown]
# ## Metric size of the two tilings

# %%
for row in layout_scale_table([0, 30, 47, 60, 75], layout, MercatorLayout(30.0)):
    print(row)

# %% [markdown]
# ## A search region
#
# A 3 km square around Zurich holds about 10^4 cells. Every cell center maps
# back to its own cell.

# %%
c = GeoPoint.from_degrees(47.37, 8.54)
d = 1500 / layout.earth_radius
sw = GeoPoint(c.lat - d, c.lon - d / np.cos(c.lat))
ne = GeoPoint(c.lat + d, c.lon + d / np.cos(c.lat))
cells = cells_in_box(layout, sw, ne)
print(len(cells), "cells")
assert all(cell_of_point(cell_center(x, layout), layout) == x for x in cells[::97])

"""Cross-view geolocalization over a consistent-scale global cell grid.

Street-level photos are matched against multi-resolution aerial patches of
square search cells; a contrastive two-encoder model embeds both views and
nearest-neighbor search over the cell embeddings returns a location.
"""

__version__ = "0.1.0"

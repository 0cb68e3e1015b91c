"""Fixed red -> yellow -> green colour coding of index rasters."""

from __future__ import annotations

import logging

import numpy as np
from scipy.ndimage import zoom

logger = logging.getLogger(__name__)

COLORMAP_VERSION = "ryg-v1"
# (index value, (r, g, b)); linear between stops
COLORMAP_TABLE = (
    (-1.0, (1.0, 0.0, 0.0)),
    (0.0, (1.0, 1.0, 0.0)),
    (1.0, (0.0, 1.0, 0.0)),
)


def colorize(index: np.ndarray) -> np.ndarray:
    """[H, W] index in [-1, 1] -> [3, H, W] RGB in [0, 1] at native resolution."""
    index = np.asarray(index, dtype=np.float64)
    n_out = int(np.count_nonzero((index < -1.0) | (index > 1.0)))
    if n_out:
        logger.warning("index_to_rgb: clamped %d out-of-range values to [-1, 1]", n_out)
    v = np.clip(index, -1.0, 1.0)
    stops = np.array([s for s, _ in COLORMAP_TABLE])
    colors = np.array([c for _, c in COLORMAP_TABLE])
    return np.stack([np.interp(v, stops, colors[:, ch]) for ch in range(3)])


def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of [..., H, W] to [..., size, size]."""
    h, w = image.shape[-2:]
    if (h, w) == (size, size):
        return image.copy()
    factors = (1,) * (image.ndim - 2) + (size / h, size / w)
    out = zoom(image, factors, order=1, mode="nearest", grid_mode=True)
    return np.clip(out, 0.0, 1.0) if image.min() >= 0 else out


def index_to_rgb(index: np.ndarray, size: int = 224) -> np.ndarray:
    """Colour-code an index raster and resize it to [3, size, size]."""
    return resize_bilinear(colorize(index), size)

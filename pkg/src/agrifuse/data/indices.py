"""Normalized-difference vegetation indices from Sentinel-2 bands."""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from agrifuse.errors import InputError, ShapeError

# band pairs (a, b) for index = (a - b) / (a + b)
INDEX_BANDS = {
    "NDCI": ("B05", "B04"),
    "NDVI": ("B08", "B04"),
    "NDMI": ("B8A", "B11"),
}
INDEX_ORDER = ("NDCI", "NDVI", "NDMI")
BANDS = ("B04", "B05", "B08", "B8A", "B11")


@dataclass
class SceneBands:
    """Reflectance rasters on a common grid, values in [0, 1]."""

    bands: Dict[str, np.ndarray]
    date: Optional[dt.date] = None
    plot_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = {np.shape(v) for v in self.bands.values()}
        if len(shapes) > 1:
            raise ShapeError(f"bands must share one grid, got shapes {sorted(shapes)}")

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.bands[name]
        except KeyError:
            raise InputError(f"band {name} missing from scene {self.plot_id} {self.date}") from None


def normalized_difference(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(a - b) / (a + b), with 0 where the denominator vanishes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    den = a + b
    safe = np.where(den == 0, 1.0, den)
    return np.where(den == 0, 0.0, (a - b) / safe)


def compute_index(bands: SceneBands, kind: str) -> np.ndarray:
    if kind not in INDEX_BANDS:
        raise InputError(f"unknown index {kind!r}; expected one of {sorted(INDEX_BANDS)}")
    a, b = INDEX_BANDS[kind]
    return normalized_difference(bands[a], bands[b])

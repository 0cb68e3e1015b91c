"""Dataset directory layout.

    <root>/manifest.json
    <root>/weather.csv
    <root>/labels.csv            date,plot_id,label
    <root>/<plot>/<index>/       one image series (YYYY-MM-DD.agt + manifest.json)

Derived stages (interpolated, generated) reuse the same layout so every
command can read the output of the previous one.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from agrifuse.data.colormap import COLORMAP_VERSION
from agrifuse.data.indices import INDEX_ORDER
from agrifuse.data.weather_io import WeatherRecord, load_weather, standardize_stats, write_weather
from agrifuse.errors import InputError
from agrifuse.models.weather import WEATHER_FEATURES
from agrifuse.series import ImageSeries, load_series, save_series

Labels = Dict[Tuple[str, dt.date], int]


def write_labels(labels: Mapping[Tuple[str, dt.date], int], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "plot_id", "label"])
        for (plot, d), y in sorted(labels.items(), key=lambda kv: (kv[0][1], kv[0][0])):
            w.writerow([d.isoformat(), plot, int(y)])


def load_labels(path) -> Labels:
    out: Labels = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["date", "plot_id", "label"]:
            raise InputError(f"{path}: header must be date,plot_id,label")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                d, plot, y = dt.date.fromisoformat(row[0]), row[1], int(row[2])
            except (ValueError, IndexError) as exc:
                raise InputError(f"{path}:{line_no}: {exc}") from None
            if y not in (0, 1):
                raise InputError(f"{path}:{line_no}: label must be 0 or 1, got {y}")
            if (plot, d) in out:
                raise InputError(f"{path}:{line_no}: duplicate label for {plot} on {d}")
            out[(plot, d)] = y
    return out


@dataclass
class DatasetDir:
    root: Path
    manifest: dict
    weather: List[WeatherRecord]
    labels: Labels
    series: Dict[str, Dict[str, ImageSeries]] = field(default_factory=dict)

    @property
    def plots(self) -> List[str]:
        return list(self.manifest["plots"])

    @property
    def indices(self) -> List[str]:
        return list(self.manifest.get("indices", INDEX_ORDER))

    @property
    def years(self) -> List[int]:
        return sorted({r.date.year for r in self.weather})


def weather_manifest(weather: Sequence[WeatherRecord]) -> dict:
    mean, std = standardize_stats(np.stack([r.features() for r in weather]))
    return {"features": list(WEATHER_FEATURES), "mean": mean.tolist(), "std": std.tolist()}


def write_dataset(
    root,
    series: Mapping[str, Mapping[str, ImageSeries]],
    weather: Sequence[WeatherRecord],
    labels: Mapping[Tuple[str, dt.date], int],
    manifest: dict,
) -> Path:
    """Write a full dataset directory; ``manifest`` gets plots, indices and stats filled in."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for plot, per_index in series.items():
        for index, s in per_index.items():
            target = root / plot / index
            if target.exists():
                shutil.rmtree(target)
            save_series(s, target)
    write_weather(weather, root / "weather.csv")
    write_labels(labels, root / "labels.csv")
    full = dict(manifest)
    full.setdefault("colormap_version", COLORMAP_VERSION)
    full["plots"] = sorted(series)
    full["indices"] = [k for k in INDEX_ORDER if any(k in v for v in series.values())]
    full["standardization"] = weather_manifest(weather)
    (root / "manifest.json").write_text(json.dumps(full, indent=2, sort_keys=True))
    return root


def load_dataset(root, plots: Optional[Sequence[str]] = None, indices: Optional[Sequence[str]] = None) -> DatasetDir:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    ds = DatasetDir(root, manifest, load_weather(root / "weather.csv"), load_labels(root / "labels.csv"))
    for plot in plots or manifest["plots"]:
        ds.series[plot] = {k: load_series(root / plot / k) for k in indices or manifest["indices"]}
    return ds

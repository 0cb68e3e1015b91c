"""Per-day training samples: stacked index images + standardized weather + label."""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from agrifuse.autodiff.serialize import load_array, save_tensor
from agrifuse.data.indices import INDEX_ORDER
from agrifuse.data.weather_io import WeatherRecord, standardize, standardize_stats
from agrifuse.errors import AlignmentError, ConfigError, InputError, ShapeError
from agrifuse.series import GENERATED, INTERPOLATED, REAL, ImageSeries

# a sample is only as real as its least-real index image
_PROVENANCE_RANK = {REAL: 0, INTERPOLATED: 1, GENERATED: 2}


@dataclass
class Sample:
    image: np.ndarray  # [3 * len(indices), S, S], index blocks in INDEX_ORDER
    weather: np.ndarray  # [n_features], standardized
    label: int
    date: dt.date
    plot_id: str
    provenance: str = REAL


def check_indices(indices: Sequence[str]) -> Tuple[str, ...]:
    if not indices:
        raise ConfigError("need at least one vegetation index")
    unknown = [k for k in indices if k not in INDEX_ORDER]
    if unknown:
        raise ConfigError(f"unknown indices {unknown}; expected a subset of {INDEX_ORDER}")
    if len(set(indices)) != len(indices):
        raise ConfigError(f"duplicate indices in {list(indices)}")
    # channel blocks always follow the canonical order
    return tuple(k for k in INDEX_ORDER if k in indices)


def assemble(
    series: Mapping[str, Mapping[str, ImageSeries]],
    weather: Sequence[WeatherRecord],
    labels: Mapping[Tuple[str, dt.date], int],
    stats: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    indices: Sequence[str] = INDEX_ORDER,
    dtype=np.float32,
) -> List[Sample]:
    """One Sample per (plot, day), sorted by (plot, date).

    ``series[plot][index]`` is a daily ImageSeries; every image date needs
    exactly one weather record and one label, and every weather date needs an
    image.  ``stats`` is (mean, std) for weather standardization, computed
    from ``weather`` when omitted.
    """
    indices = check_indices(indices)
    by_date: Dict[dt.date, WeatherRecord] = {}
    for rec in weather:
        if rec.date in by_date:
            raise AlignmentError(f"two weather records for {rec.date}", date=rec.date)
        by_date[rec.date] = rec
    if stats is None:
        stats = standardize_stats(np.stack([r.features() for r in weather])) if weather else None
    image_dates = set()
    samples: List[Sample] = []
    for plot in sorted(series):
        per_index = series[plot]
        missing = [k for k in indices if k not in per_index]
        if missing:
            raise InputError(f"plot {plot} has no series for {missing}")
        frames = [per_index[k].by_date() for k in indices]
        dates = sorted(frames[0])
        for k, fr in zip(indices[1:], frames[1:]):
            extra = set(fr) ^ set(dates)
            if extra:
                d = min(extra)
                raise AlignmentError(f"plot {plot}: {k} and {indices[0]} disagree on {d}", date=d)
        for d in dates:
            if d not in by_date:
                raise AlignmentError(f"plot {plot}: no weather record for {d}", date=d)
            if (plot, d) not in labels:
                raise AlignmentError(f"plot {plot}: no label for {d}", date=d)
            image = np.concatenate([fr[d].image for fr in frames], axis=0).astype(dtype, copy=False)
            prov = max((fr[d].provenance for fr in frames), key=_PROVENANCE_RANK.__getitem__)
            samples.append(
                Sample(
                    image,
                    standardize(by_date[d].features(), *stats),
                    int(labels[(plot, d)]),
                    d,
                    plot,
                    prov,
                )
            )
        image_dates.update(dates)
    orphans = sorted(set(by_date) - image_dates)
    if orphans:
        raise AlignmentError(f"weather record for {orphans[0]} has no image", date=orphans[0])
    return samples


def stack_samples(samples: Sequence[Sample]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(images [N,C,S,S], weather [N,F], labels [N])."""
    if not samples:
        raise InputError("no samples to stack")
    return (
        np.stack([s.image for s in samples]),
        np.stack([s.weather for s in samples]),
        np.array([s.label for s in samples], dtype=np.int64),
    )


def select_channels(images: np.ndarray, indices: Sequence[str], available: Sequence[str] = INDEX_ORDER) -> np.ndarray:
    """Keep the 3-channel blocks of ``indices`` from images stacked over ``available``."""
    indices = check_indices(indices)
    if images.shape[-3] != 3 * len(available):
        raise ShapeError(f"images have {images.shape[-3]} channels, expected {3 * len(available)}")
    blocks = [available.index(k) for k in indices]
    chans = [3 * b + c for b in blocks for c in range(3)]
    return images[..., chans, :, :]


def save_samples(samples: Sequence[Sample], directory) -> None:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    meta = []
    for n, s in enumerate(samples):
        save_tensor(directory / "images" / f"{n:06d}.agt", s.image)
        meta.append(
            {
                "date": s.date.isoformat(),
                "plot_id": s.plot_id,
                "label": s.label,
                "provenance": s.provenance,
                "weather": [float(v) for v in s.weather],
            }
        )
    dtype = str(samples[0].image.dtype) if samples else "float64"
    (directory / "samples.json").write_text(json.dumps({"dtype": dtype, "samples": meta}))


def load_samples(directory) -> List[Sample]:
    directory = Path(directory)
    doc = json.loads((directory / "samples.json").read_text())
    out = []
    for n, m in enumerate(doc["samples"]):
        image = load_array(directory / "images" / f"{n:06d}.agt").astype(doc["dtype"], copy=False)
        out.append(
            Sample(
                image,
                np.array(m["weather"], dtype=np.float64),
                int(m["label"]),
                dt.date.fromisoformat(m["date"]),
                m["plot_id"],
                m["provenance"],
            )
        )
    return out

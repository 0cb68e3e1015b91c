"""Date-indexed image series: interpolation, noise injection and daily generation."""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from agrifuse.autodiff.serialize import load_array, save_tensor
from agrifuse.errors import ContractError, InputError, ShapeError

REAL, INTERPOLATED, GENERATED = "real", "interpolated", "generated"
PROVENANCES = (REAL, INTERPOLATED, GENERATED)


@dataclass
class Frame:
    date: dt.date
    image: np.ndarray
    provenance: str = REAL


@dataclass
class ImageSeries:
    """Frames in strictly increasing date order, all with one shape."""

    frames: List[Frame] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for a, b in zip(self.frames, self.frames[1:]):
            if b.date <= a.date:
                raise InputError(f"series dates must strictly increase ({a.date} then {b.date})")
        shapes = {f.image.shape for f in self.frames}
        if len(shapes) > 1:
            raise ShapeError(f"series images have mixed shapes {sorted(shapes)}")
        for f in self.frames:
            if f.provenance not in PROVENANCES:
                raise InputError(f"unknown provenance {f.provenance!r} on {f.date}")

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    @property
    def dates(self) -> List[dt.date]:
        return [f.date for f in self.frames]

    @property
    def real_frames(self) -> List[Frame]:
        return [f for f in self.frames if f.provenance == REAL]

    def by_date(self) -> Dict[dt.date, Frame]:
        return {f.date: f for f in self.frames}

    def is_complete(self) -> bool:
        return all((b.date - a.date).days == 1 for a, b in zip(self.frames, self.frames[1:]))

    def stack(self) -> np.ndarray:
        return np.stack([f.image for f in self.frames])


def linear_interpolate(start: np.ndarray, end: np.ndarray, i: int, k: int) -> np.ndarray:
    """Image ``i`` days after ``start`` on the straight line to ``end``, ``k`` days away.

    (start * (k - i) + end * i) / k, for 0 < i < k.
    """
    if not 0 < i < k:
        raise ContractError(f"interpolation offset must satisfy 0 < i < k, got i={i}, k={k}")
    start, end = np.asarray(start, dtype=np.float64), np.asarray(end, dtype=np.float64)
    if start.shape != end.shape:
        raise ShapeError(f"endpoint shapes {start.shape} and {end.shape} differ")
    out = (start * (k - i) + end * i) / k
    # rounding can step one ulp outside the endpoints; keep the bound exact
    return np.clip(out, np.minimum(start, end), np.maximum(start, end))


def inject_noise(image: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. N(0, sigma^2) noise, then clamp to [0, 1]."""
    if sigma < 0:
        raise ContractError(f"noise sigma must be non-negative, got {sigma}")
    image = np.asarray(image, dtype=np.float64)
    if sigma == 0:
        return image.copy()
    return np.clip(image + rng.normal(0.0, sigma, size=image.shape), 0.0, 1.0)


def fill_gaps(
    series: ImageSeries, sigma: float = 0.0, rng: Optional[np.random.Generator] = None, until: Optional[dt.date] = None
) -> ImageSeries:
    """Daily series with every gap between two frames linearly interpolated.

    Interpolated frames get Gaussian noise when ``sigma > 0``; existing frames
    are copied untouched.  ``until`` truncates the output.
    """
    if sigma > 0 and rng is None:
        raise ContractError("noise injection needs an rng")
    out: List[Frame] = []
    frames = series.frames
    for a, b in zip(frames, frames[1:]):
        out.append(Frame(a.date, a.image, a.provenance))
        k = (b.date - a.date).days
        for i in range(1, k):
            img = linear_interpolate(a.image, b.image, i, k)
            if sigma > 0:
                img = inject_noise(img, sigma, rng)
            out.append(Frame(a.date + dt.timedelta(days=i), img, INTERPOLATED))
    if frames:
        last = frames[-1]
        out.append(Frame(last.date, last.image, last.provenance))
    if until is not None:
        out = [f for f in out if f.date <= until]
    return ImageSeries(out)


MIN_REAL_FRAMES = 4


def generate_daily(series: ImageSeries, predict: Callable[[Sequence[np.ndarray]], np.ndarray]) -> ImageSeries:
    """Fill every missing day from the three preceding daily frames.

    The first three days are bootstrapped by interpolating between the first
    acquisitions; afterwards each missing date is predicted recursively
    (generated frames feed later predictions).  Existing frames are never
    overwritten.
    """
    if series.is_complete():
        return ImageSeries([Frame(f.date, f.image, f.provenance) for f in series.frames])
    if len(series.real_frames) < MIN_REAL_FRAMES:
        raise InputError(f"need at least {MIN_REAL_FRAMES} real acquisitions, got {len(series.real_frames)}")
    known = series.by_date()
    first = series.frames[0].date
    bootstrap_end = first + dt.timedelta(days=2)
    bootstrap = fill_gaps(ImageSeries(series.frames[:3]), until=bootstrap_end)
    if len(bootstrap) < 3 or bootstrap.frames[-1].date != bootstrap_end:
        raise InputError(f"cannot bootstrap three daily frames from the acquisitions starting {first}")

    out: List[Frame] = list(bootstrap.frames)
    day = bootstrap_end + dt.timedelta(days=1)
    last = series.frames[-1].date
    while day <= last:
        if day in known:
            out.append(known[day])
        else:
            pred = predict([f.image for f in out[-3:]])
            out.append(Frame(day, np.asarray(pred, dtype=np.float64), GENERATED))
        day += dt.timedelta(days=1)
    return ImageSeries(out)


# -- on-disk layout: <dir>/YYYY-MM-DD.agt + manifest.json -------------------------


def save_series(series: ImageSeries, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for f in series.frames:
        save_tensor(directory / f"{f.date.isoformat()}.agt", f.image)
    manifest = {"frames": [{"date": f.date.isoformat(), "provenance": f.provenance} for f in series.frames]}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_series(directory) -> ImageSeries:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no series manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    frames = []
    for entry in manifest["frames"]:
        date = dt.date.fromisoformat(entry["date"])
        frames.append(Frame(date, load_array(directory / f"{entry['date']}.agt"), entry["provenance"]))
    return ImageSeries(frames)


def split_by_year(series: ImageSeries) -> Dict[int, ImageSeries]:
    years: Dict[int, List[Frame]] = {}
    for f in series.frames:
        years.setdefault(f.date.year, []).append(f)
    return {y: ImageSeries(fr) for y, fr in sorted(years.items())}


def merge(parts: Iterable[ImageSeries]) -> ImageSeries:
    frames: List[Frame] = []
    for part in parts:
        frames.extend(part.frames)
    return ImageSeries(sorted(frames, key=lambda f: f.date))


def windows(series: ImageSeries) -> Tuple[np.ndarray, np.ndarray, List[Frame]]:
    """All (three consecutive days -> next day) pairs in a daily series."""
    frames = series.frames
    xs, ys, targets = [], [], []
    for n in range(3, len(frames)):
        if (frames[n].date - frames[n - 3].date).days != 3:
            continue
        xs.append(np.stack([f.image for f in frames[n - 3 : n]]))
        ys.append(frames[n].image)
        targets.append(frames[n])
    if not xs:
        return np.empty((0,)), np.empty((0,)), []
    return np.stack(xs), np.stack(ys), targets


def per_season(series: ImageSeries, fn: Callable[[ImageSeries], ImageSeries]) -> ImageSeries:
    """Apply ``fn`` to each calendar year separately, so gaps never span off-seasons."""
    return merge(fn(part) for part in split_by_year(series).values())

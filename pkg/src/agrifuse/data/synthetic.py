"""Synthetic vineyard seasons with a label that needs both modalities.

A day/plot is positive only when a localized canopy lesion is visible in the
imagery AND the station reports the warm-humid regime.  Negative days still
show each cue on its own: lesion-like patches appear on some non-humid days,
and the warm-humid regime appears on some days without lesions.  Either
modality alone is therefore ambiguous by construction.
"""

from __future__ import annotations

import datetime as dt
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter, zoom

from agrifuse.data.colormap import index_to_rgb
from agrifuse.data.indices import INDEX_ORDER, SceneBands, compute_index
from agrifuse.data.weather_io import WeatherRecord
from agrifuse.errors import ConfigError
from agrifuse.series import REAL, Frame, ImageSeries


@dataclass
class SyntheticSpec:
    plots: int = 4
    years: Tuple[int, ...] = (2018, 2019, 2020, 2021)
    season_start: Tuple[int, int] = (6, 1)
    season_days: int = 92
    raster_size: int = 64
    image_size: int = 64
    real_counts: Tuple[int, ...] = (38, 33, 40, 29)
    disease_years: Tuple[int, ...] = (2018, 2021)
    disease_months: Tuple[int, ...] = (7, 8)
    humid_fraction: float = 0.35
    lesion_fraction: float = 0.85
    episode_days: Tuple[int, int] = (3, 8)
    lesion_strength: float = 0.65
    ceiling: float = 0.86
    write_truth: bool = False

    def __post_init__(self):
        self.years = tuple(self.years)
        self.real_counts = tuple(self.real_counts)
        self.disease_years = tuple(self.disease_years)
        self.disease_months = tuple(self.disease_months)
        self.season_start = tuple(self.season_start)
        self.episode_days = tuple(self.episode_days)
        if self.season_days < 1 or self.plots < 1 or not self.years:
            raise ConfigError("synthetic spec needs at least one plot, one year and one day")
        if len(self.real_counts) != len(self.years):
            raise ConfigError(f"{len(self.real_counts)} real_counts for {len(self.years)} years")
        if any(not 4 <= n <= self.season_days for n in self.real_counts):
            raise ConfigError(f"real acquisition counts must lie in [4, {self.season_days}]")
        if self.raster_size % 2:
            raise ConfigError("raster_size must be even (20 m bands are synthesized at half resolution)")
        for name in ("humid_fraction", "lesion_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)

    def season_dates(self, year: int) -> List[dt.date]:
        start = dt.date(year, *self.season_start)
        return [start + dt.timedelta(days=i) for i in range(self.season_days)]


def plot_ids(n: int) -> List[str]:
    return [f"plot{i + 1}" for i in range(n)]


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    dates: List[dt.date]
    acquisitions: Dict[int, List[dt.date]]
    images: Dict[Tuple[str, str], np.ndarray]  # (plot, index) -> [days, 3, S, S] float32
    weather: List[WeatherRecord]
    labels: Dict[Tuple[str, dt.date], int]
    lesion: Dict[Tuple[str, dt.date], bool]
    humid: Dict[dt.date, bool]
    plots: List[str] = field(default_factory=list)

    def day_index(self, date: dt.date) -> int:
        return self.dates.index(date)

    def truth_series(self, plot: str, index: str) -> ImageSeries:
        acquired = {d for ds in self.acquisitions.values() for d in ds}
        stack = self.images[(plot, index)]
        return ImageSeries(
            [
                Frame(d, stack[i].astype(np.float64), REAL if d in acquired else "generated")
                for i, d in enumerate(self.dates)
            ]
        )

    def observed_series(self, plot: str, index: str) -> ImageSeries:
        stack = self.images[(plot, index)]
        pos = {d: i for i, d in enumerate(self.dates)}
        frames = [
            Frame(d, stack[pos[d]].astype(np.float64), REAL)
            for year in sorted(self.acquisitions)
            for d in self.acquisitions[year]
        ]
        return ImageSeries(frames)


def _smooth_field(rng, size: int, sigma: float) -> np.ndarray:
    f = gaussian_filter(rng.normal(size=(size, size)), sigma, mode="wrap")
    f -= f.mean()
    return f / (np.abs(f).max() + 1e-12)


def _parcel_mask(rng, size: int) -> np.ndarray:
    """Irregular quadrilateral-ish vine parcel covering most of the raster."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    wobble = 0.06 * _smooth_field(rng, size, size / 8)
    margin = rng.uniform(0.03, 0.08, size=4)
    inside = (
        (xx > margin[0] + wobble)
        & (xx < 1 - margin[1] + wobble)
        & (yy > margin[2] - wobble)
        & (yy < 1 - margin[3] - wobble)
    )
    return inside.astype(np.float64)


def _episodes(rng, n_days: int, p_on: float, lengths: Tuple[int, int]) -> np.ndarray:
    """Piecewise-constant on/off schedule with run lengths in ``lengths``.

    Runs are switched on in random order until ``p_on`` of the days are
    covered, so the on-fraction is stable across seeds.
    """
    bounds = [0]
    while bounds[-1] < n_days:
        bounds.append(min(n_days, bounds[-1] + int(rng.integers(lengths[0], lengths[1] + 1))))
    out = np.zeros(n_days, dtype=bool)
    target = p_on * n_days
    covered = 0
    for r in rng.permutation(len(bounds) - 1):
        run = bounds[r + 1] - bounds[r]
        if covered + run / 2 > target:
            continue
        out[bounds[r] : bounds[r + 1]] = True
        covered += run
    return out


def _lesion_blobs(rng, n_days: int, size: int, lengths: Tuple[int, int], yy, xx) -> List[np.ndarray]:
    """Gaussian lesion footprint per day; the focus moves within the top-left quadrant every few days."""
    out: List[np.ndarray] = []
    while len(out) < n_days:
        cy, cx = rng.uniform(0.15, 0.35, size=2) * size
        radius = rng.uniform(0.09, 0.13) * size
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius**2))
        out.extend([blob] * int(rng.integers(lengths[0], lengths[1] + 1)))
    return out[:n_days]


def _weather_day(rng, date: dt.date, humid: bool) -> WeatherRecord:
    if humid:
        tavg, havg, rain = rng.normal(22.5, 1.2), rng.normal(86.0, 3.0), rng.gamma(3.0, 2.0)
    else:
        kind = rng.integers(3)
        if kind == 0:  # hot and dry
            tavg, havg, rain = rng.normal(27.5, 1.8), rng.normal(55.0, 6.0), rng.gamma(0.5, 1.0)
        elif kind == 1:  # cool and wet
            tavg, havg, rain = rng.normal(15.0, 1.8), rng.normal(82.0, 4.0), rng.gamma(2.0, 2.0)
        else:  # mild
            tavg, havg, rain = rng.normal(19.0, 1.5), rng.normal(64.0, 5.0), rng.gamma(1.0, 1.5)
    havg = float(np.clip(havg, 20.0, 97.0))
    hmin = max(5.0, havg - rng.uniform(10.0, 25.0))
    hmax = min(100.0, havg + rng.uniform(2.0, 12.0))
    tmin = tavg - rng.uniform(4.0, 8.0)
    tmax = tavg + rng.uniform(4.0, 9.0)
    rain = float(rain)
    dur = float(min(24.0, rain * rng.uniform(0.5, 1.2)))
    sun = float(np.clip(rng.normal(12.0 - 0.08 * havg + 0.1 * (tavg - 20), 1.0), 0.0, 15.0))
    evap = float(max(0.0, 0.18 * tavg + 0.2 * sun - 0.02 * havg + rng.normal(0, 0.3)))
    return WeatherRecord(
        date, rain, rain * rng.uniform(0.2, 0.6), dur, float(tmin), float(tavg), float(tmax),
        float(hmin), havg, float(hmax), evap, sun,
    )


def _bands(vigor, chlorophyll, moisture, mask, soil, size) -> Dict[str, np.ndarray]:
    veg_red = 0.12 - 0.08 * vigor
    veg_nir = 0.15 + 0.35 * vigor
    veg_edge = veg_red + 0.02 + 0.10 * chlorophyll
    b04 = mask * veg_red + (1 - mask) * (0.20 + 0.02 * soil)
    b05 = mask * veg_edge + (1 - mask) * (0.22 + 0.02 * soil)
    b08 = mask * veg_nir + (1 - mask) * (0.25 + 0.02 * soil)
    # 20 m bands: average to half resolution, then bilinear back to the 10 m grid
    def coarse(x):
        half = x.reshape(size // 2, 2, size // 2, 2).mean(axis=(1, 3))
        return zoom(half, 2, order=1, mode="nearest", grid_mode=True)

    veg_swir = 0.32 - 0.18 * moisture
    b8a = coarse(mask * 0.98 * veg_nir + (1 - mask) * (0.26 + 0.02 * soil))
    b11 = coarse(mask * veg_swir + (1 - mask) * (0.30 + 0.02 * soil))
    return {"B04": b04, "B05": b05, "B08": b08, "B8A": b8a, "B11": b11}


def synthesize_dataset(spec: SyntheticSpec, rng: np.random.Generator) -> SyntheticDataset:
    """Generate daily scenes, station weather, labels and acquisition dates."""
    size = spec.raster_size
    plots = plot_ids(spec.plots)
    dates: List[dt.date] = []
    acquisitions: Dict[int, List[dt.date]] = {}
    labels: Dict[Tuple[str, dt.date], int] = {}
    lesion: Dict[Tuple[str, dt.date], bool] = {}
    humid: Dict[dt.date, bool] = {}
    weather: List[WeatherRecord] = []
    images = {(p, k): [] for p in plots for k in INDEX_ORDER}

    plot_fields = {}
    for p in plots:
        plot_fields[p] = dict(
            mask=_parcel_mask(rng, size),
            base=0.65 + 0.15 * _smooth_field(rng, size, size / 10),
            trend=0.10 + 0.08 * _smooth_field(rng, size, size / 6),
            chl=0.60 + 0.15 * _smooth_field(rng, size, size / 10),
            moist=0.55 + 0.15 * _smooth_field(rng, size, size / 8),
            soil=_smooth_field(rng, size, size / 12),
        )
    yy, xx = np.mgrid[0:size, 0:size]

    for year, n_real in zip(spec.years, spec.real_counts):
        season = spec.season_dates(year)
        n = len(season)
        dates.extend(season)
        inner = rng.choice(np.arange(1, n - 1), size=n_real - 2, replace=False)
        acquisitions[year] = [season[i] for i in sorted([0, n - 1, *inner.tolist()])]

        positive_day = np.array(
            [year in spec.disease_years and d.month in spec.disease_months for d in season]
        )
        humid_day = positive_day | (_episodes(rng, n, spec.humid_fraction, spec.episode_days) & ~positive_day)
        for d, h in zip(season, humid_day):
            humid[d] = bool(h)
            weather.append(_weather_day(rng, d, bool(h)))

        for p in plots:
            f = plot_fields[p]
            year_shift = rng.normal(0.0, 0.03)
            blobs = _lesion_blobs(rng, n, size, spec.episode_days, yy, xx)
            # lesion episodes on a fraction of the non-humid days only
            dry = np.flatnonzero(~humid_day)
            spurious = np.zeros(n, dtype=bool)
            spurious[dry] = _episodes(rng, len(dry), spec.lesion_fraction, spec.episode_days)
            plot_lesion = positive_day | spurious
            for i, d in enumerate(season):
                t = i / max(n - 1, 1)
                vigor = np.clip(f["base"] + year_shift + f["trend"] * (t - 0.5), 0.05, 0.95)
                chl = np.clip(f["chl"] + year_shift + 0.05 * (t - 0.5), 0.05, 0.95)
                moist = np.clip(f["moist"] - 0.1 * (t - 0.5), 0.05, 0.95)
                if plot_lesion[i]:
                    damage = 1.0 - spec.lesion_strength * blobs[i]
                    vigor, chl = vigor * damage, chl * damage
                scene = SceneBands(_bands(vigor, chl, moist, f["mask"], f["soil"], size), d, p)
                for k in INDEX_ORDER:
                    rgb = index_to_rgb(compute_index(scene, k), spec.image_size)
                    images[(p, k)].append(rgb.astype(np.float32))
                lesion[(p, d)] = bool(plot_lesion[i])
                labels[(p, d)] = int(positive_day[i])

    stacked = {key: np.stack(v) for key, v in images.items()}
    return SyntheticDataset(spec, dates, acquisitions, stacked, weather, labels, lesion, humid, plots)


def single_modality_ceilings(ds: SyntheticDataset, years: Optional[Sequence[int]] = None) -> Dict[str, float]:
    """Accuracy of the Bayes-optimal classifier that sees only one latent cue.

    The image classifier observes the lesion flag plus the calendar month
    (phenology makes the season visible); the weather classifier observes
    only the regime flag, since regimes are stationary over the season.  The
    optimum predicts the majority label within every observable cell.
    """
    keys = [(p, d) for (p, d) in ds.labels if years is None or d.year in years]
    if not keys:
        raise ConfigError("no labelled days in the requested years")
    cells = {"image_only": Counter(), "weather_only": Counter(), "fusion": Counter()}
    for p, d in keys:
        y = ds.labels[(p, d)]
        cells["image_only"][(ds.lesion[(p, d)], d.month, y)] += 1
        cells["weather_only"][(ds.humid[d], y)] += 1
        cells["fusion"][(ds.lesion[(p, d)], ds.humid[d], y)] += 1
    out = {}
    for name, counter in cells.items():
        groups: Dict[tuple, List[int]] = {}
        for key, count in counter.items():
            groups.setdefault(key[:-1], [0, 0])[key[-1]] += count
        out[name] = sum(max(g) for g in groups.values()) / len(keys)
    return out


@dataclass
class RampSpec:
    """Per-pixel linear trends observed every few days.

    Each year gets its own smooth start field and slope field; ``drift`` is
    the RMS daily change and ``spread`` the largest departure of a start
    value from 0.5.  Linear interpolation of such series is exact.
    """

    years: Tuple[int, ...] = (2018, 2019, 2020, 2021)
    season_start: Tuple[int, int] = (6, 1)
    season_days: int = 40
    channels: int = 3
    size: int = 32
    drift: float = 0.004
    revisit: Tuple[int, int] = (3, 7)
    spread: float = 0.15

    def __post_init__(self):
        self.years = tuple(self.years)
        self.season_start = tuple(self.season_start)
        self.revisit = tuple(self.revisit)
        if self.season_days < 8 or not self.years:
            raise ConfigError("ramp series need at least one year of 8 or more days")
        if self.spread + self.drift * self.season_days > 0.5:
            raise ConfigError("drift too large: ramps would leave [0, 1]")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def ramp_series(spec: RampSpec, rng: np.random.Generator) -> Tuple[ImageSeries, ImageSeries]:
    """(observed real frames, daily ground truth) over all years."""
    observed: List[Frame] = []
    truth: List[Frame] = []
    shape = (spec.channels, spec.size, spec.size)
    for year in spec.years:
        start = np.stack([0.5 + spec.spread * _smooth_field(rng, spec.size, spec.size / 6) for _ in range(spec.channels)])
        slope = np.stack([_smooth_field(rng, spec.size, spec.size / 6) for _ in range(spec.channels)])
        slope *= spec.drift / np.sqrt(np.mean(slope**2))
        days = [0]
        while days[-1] < spec.season_days - 1:
            days.append(min(spec.season_days - 1, days[-1] + int(rng.integers(spec.revisit[0], spec.revisit[1] + 1))))
        first = dt.date(year, *spec.season_start)
        for t in range(spec.season_days):
            img = (start + slope * (t - spec.season_days / 2)).reshape(shape)
            d = first + dt.timedelta(days=t)
            truth.append(Frame(d, img, REAL if t in days else "interpolated"))
            if t in days:
                observed.append(Frame(d, img.copy(), REAL))
    return ImageSeries(observed), ImageSeries(truth)

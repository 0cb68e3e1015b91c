"""Daily weather-station records and their CSV format."""

from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import astuple, dataclass, fields
from typing import List, Sequence

import numpy as np

from agrifuse.errors import InputError, ValidationError
from agrifuse.models.weather import WEATHER_FEATURES

CSV_HEADER = ("date",) + WEATHER_FEATURES


@dataclass(frozen=True)
class WeatherRecord:
    date: dt.date
    precip_mm: float
    rain_var: float
    rain_dur_h: float
    tmin_c: float
    tavg_c: float
    tmax_c: float
    hmin_pct: float
    havg_pct: float
    hmax_pct: float
    pot_evap_mm: float
    sun_h: float

    def features(self) -> np.ndarray:
        return np.array(astuple(self)[1:], dtype=np.float64)

    def validate(self) -> None:
        for f in fields(self)[1:]:
            if not math.isfinite(getattr(self, f.name)):
                raise ValidationError(f"{self.date}: {f.name} is not finite", field=f.name)
        if not self.tmin_c <= self.tavg_c <= self.tmax_c:
            raise ValidationError(f"{self.date}: temperatures violate tmin <= tavg <= tmax", field="tavg_c")
        if not self.hmin_pct <= self.havg_pct <= self.hmax_pct:
            raise ValidationError(f"{self.date}: humidity violates hmin <= havg <= hmax", field="havg_pct")
        for name in ("hmin_pct", "havg_pct", "hmax_pct"):
            if not 0.0 <= getattr(self, name) <= 100.0:
                raise ValidationError(f"{self.date}: {name} outside [0, 100]", field=name)
        for name in ("precip_mm", "rain_dur_h", "pot_evap_mm", "sun_h"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{self.date}: {name} is negative", field=name)


def load_weather(path) -> List[WeatherRecord]:
    """Parse and validate a weather CSV; records come back sorted by date."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise InputError(f"{path}: header must be {','.join(CSV_HEADER)}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise InputError(f"{path}:{line_no}: expected {len(CSV_HEADER)} fields, got {len(row)}")
            try:
                record = WeatherRecord(dt.date.fromisoformat(row[0].strip()), *(float(v) for v in row[1:]))
            except ValueError as exc:
                raise InputError(f"{path}:{line_no}: {exc}") from None
            try:
                record.validate()
            except ValidationError as exc:
                raise ValidationError(f"{path}:{line_no}: {exc}", field=exc.field, line=line_no) from None
            records.append(record)
    records.sort(key=lambda r: r.date)
    for a, b in zip(records, records[1:]):
        if a.date == b.date:
            raise ValidationError(f"{path}: duplicate date {a.date}", field="date")
    return records


def write_weather(records: Sequence[WeatherRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow([r.date.isoformat()] + [repr(float(v)) for v in astuple(r)[1:]])


def check_season_contiguous(records: Sequence[WeatherRecord], start: dt.date, end: dt.date) -> None:
    """Every day in [start, end] must have exactly one record."""
    have = {r.date for r in records}
    day = start
    while day <= end:
        if day not in have:
            raise ValidationError(f"weather record missing for {day}", field="date")
        day += dt.timedelta(days=1)


def standardize_stats(features: np.ndarray):
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    return mean, np.where(std > 0, std, 1.0)


def standardize(features: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (np.asarray(features, dtype=np.float64) - mean) / std

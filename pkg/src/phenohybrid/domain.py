"""Core data types, season calendar arithmetic and CSV ingestion.

A season starts on October 1 and spans ``SEASON_LENGTH`` consecutive days.
Days inside a season are addressed by a 1-based season index, so index 1 is
October 1 and index 274 is July 1 of the following (non-leap) year.
"""

from __future__ import annotations

import csv
import datetime as dt
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SEASON_LENGTH = 274
HOURS = 24
SEASON_START_MONTH = 10
MIN_PLAUSIBLE_TEMP = -60.0
MAX_PLAUSIBLE_TEMP = 60.0
HOUR_COLUMNS = tuple(f"h{h:02d}" for h in range(HOURS))


class DataError(ValueError):
    """Raised when input data violates a domain invariant."""


def season_start(season_start_year: int) -> dt.date:
    return dt.date(season_start_year, SEASON_START_MONTH, 1)


def season_window(season_start_year: int, length: int = SEASON_LENGTH) -> tuple[dt.date, dt.date]:
    """First and last calendar date (inclusive) of a season."""
    first = season_start(season_start_year)
    return first, first + dt.timedelta(days=length - 1)


def doy_to_season_index(date: dt.date, season_start_year: int, length: int = SEASON_LENGTH) -> int:
    """Convert a calendar date to its 1-based index within the season.

    Raises ``ValueError`` naming the valid window if ``date`` falls outside it.
    """
    first, last = season_window(season_start_year, length)
    if not first <= date <= last:
        raise ValueError(
            f"{date.isoformat()} is outside season {season_start_year}: "
            f"valid window is {first.isoformat()} .. {last.isoformat()}"
        )
    return (date - first).days + 1


def season_index_to_date(index: int, season_start_year: int, length: int = SEASON_LENGTH) -> dt.date:
    if not 1 <= index <= length:
        raise ValueError(f"season index {index} outside [1, {length}]")
    return season_start(season_start_year) + dt.timedelta(days=index - 1)


def daily_stats(day_temps) -> tuple[float, float, float]:
    """Return ``(min, max, mean)`` of one day of hourly temperatures."""
    x = np.asarray(day_temps, dtype=float)
    if x.shape != (HOURS,):
        raise ValueError(f"expected {HOURS} hourly values, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite hourly temperature")
    return float(x.min()), float(x.max()), float(x.mean())


@dataclass(frozen=True)
class SeasonSeries:
    """Hourly temperatures (degC) of one season, shape ``(S, 24)``."""

    temps: np.ndarray
    season_start_year: int

    def __post_init__(self):
        temps = np.array(self.temps, dtype=float)
        if temps.shape != (SEASON_LENGTH, HOURS):
            raise DataError(f"season temps must have shape ({SEASON_LENGTH}, {HOURS}), got {temps.shape}")
        if not np.all(np.isfinite(temps)):
            raise DataError("season contains missing or non-finite temperatures")
        lo, hi = temps.min(), temps.max()
        if lo < MIN_PLAUSIBLE_TEMP or hi > MAX_PLAUSIBLE_TEMP:
            raise DataError(f"temperature outside plausible range [{MIN_PLAUSIBLE_TEMP}, {MAX_PLAUSIBLE_TEMP}]: {lo}..{hi}")
        temps.flags.writeable = False
        object.__setattr__(self, "temps", temps)

    @property
    def length(self) -> int:
        return self.temps.shape[0]


@dataclass(frozen=True)
class BloomRecord:
    location_id: str
    variety: str
    season_start_year: int
    bloom_day: int

    def __post_init__(self):
        if not self.location_id:
            raise DataError("empty location_id")
        if not self.variety:
            raise DataError(f"empty variety for location {self.location_id!r}")
        if not 1 <= self.bloom_day <= SEASON_LENGTH:
            raise DataError(f"bloom_day {self.bloom_day} outside [1, {SEASON_LENGTH}]")


@dataclass(frozen=True)
class Location:
    location_id: str
    latitude: float
    longitude: float
    variety: str

    def __post_init__(self):
        if not self.location_id:
            raise DataError("empty location_id")
        if not -90.0 <= self.latitude <= 90.0:
            raise DataError(f"latitude {self.latitude} outside [-90, 90]")
        if not -180.0 <= self.longitude <= 180.0:
            raise DataError(f"longitude {self.longitude} outside [-180, 180]")
        if not self.variety:
            raise DataError(f"empty variety for location {self.location_id!r}")


@dataclass(frozen=True)
class Dataset:
    """Paired seasons and bloom observations plus the location table."""

    samples: tuple[tuple[SeasonSeries, BloomRecord], ...]
    locations: dict[str, Location] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        seen = set()
        for i, (series, rec) in enumerate(self.samples):
            if rec.location_id not in self.locations:
                raise DataError(f"sample {i}: location {rec.location_id!r} missing from location table")
            if series.season_start_year != rec.season_start_year:
                raise DataError(f"sample {i}: series year {series.season_start_year} != record year {rec.season_start_year}")
            key = (rec.location_id, rec.season_start_year)
            if key in seen:
                raise DataError(f"sample {i}: duplicate (location, season) {key}")
            seen.add(key)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def records(self) -> list[BloomRecord]:
        return [rec for _, rec in self.samples]

    @cached_property
    def temps(self) -> np.ndarray:
        """All seasons stacked, shape ``(N, S, 24)``."""
        if not self.samples:
            return np.zeros((0, SEASON_LENGTH, HOURS))
        out = np.stack([s.temps for s, _ in self.samples])
        out.flags.writeable = False
        return out

    @cached_property
    def bloom_days(self) -> np.ndarray:
        return np.array([r.bloom_day for _, r in self.samples], dtype=int)

    @cached_property
    def years(self) -> np.ndarray:
        return np.array([r.season_start_year for _, r in self.samples], dtype=int)

    @cached_property
    def location_ids(self) -> list[str]:
        return [r.location_id for _, r in self.samples]

    @cached_property
    def varieties(self) -> list[str]:
        return [r.variety for _, r in self.samples]

    def group_keys(self, grouping: str) -> list[str]:
        """Per-sample group key for ``grouping`` in {"location", "variety"}."""
        if grouping == "location":
            return self.location_ids
        if grouping == "variety":
            return self.varieties
        raise ValueError(f"unknown grouping {grouping!r}; expected 'location' or 'variety'")

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset(tuple(self.samples[i] for i in indices), self.locations)


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


@dataclass
class IngestResult:
    dataset: Dataset
    rejected: list[str]


def _parse_date(text: str, where: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError:
        raise DataError(f"{where}: invalid ISO-8601 date {text!r}") from None


def read_blooms_csv(path: str | Path) -> tuple[dict[str, Location], list[tuple[int, BloomRecord]], list[str]]:
    """Parse ``blooms.csv`` into a location table and bloom records.

    Returns ``(locations, [(row_number, record)], rejections)``. A row whose
    bloom date falls outside Jan 1 .. end of season is rejected, as are rows
    that break a type invariant or disagree with an earlier row's location
    metadata.
    """
    locations: dict[str, Location] = {}
    records: list[tuple[int, BloomRecord]] = []
    rejected: list[str] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"location_id", "latitude", "longitude", "variety", "bloom_date"} - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{path}: missing columns {sorted(missing)}")
        for row_no, row in enumerate(reader, start=2):
            where = f"{Path(path).name} row {row_no}"
            try:
                loc = Location(
                    row["location_id"].strip(),
                    float(row["latitude"]),
                    float(row["longitude"]),
                    row["variety"].strip(),
                )
                prev = locations.get(loc.location_id)
                if prev is not None and prev != loc:
                    raise DataError(f"location {loc.location_id!r} metadata differs from earlier rows")
                date = _parse_date(row["bloom_date"], where)
                year = date.year - 1
                _, last = season_window(year)
                if date > last:
                    raise DataError(f"bloom date {date} outside Jan 1 .. {last} of season {year}")
                rec = BloomRecord(loc.location_id, loc.variety, year, doy_to_season_index(date, year))
            except (DataError, ValueError) as exc:
                rejected.append(f"{where}: {exc}")
                continue
            locations[loc.location_id] = loc
            records.append((row_no, rec))
    return locations, records, rejected


def read_temps_csv(path: str | Path) -> dict[str, dict[dt.date, np.ndarray]]:
    """Parse ``temps.csv`` into ``{location_id: {date: 24 hourly values}}``.

    Empty cells are kept as NaN so the season that contains them is rejected
    later; nothing is imputed.
    """
    out: dict[str, dict[dt.date, np.ndarray]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"location_id", "date", *HOUR_COLUMNS} - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{path}: missing columns {sorted(missing)}")
        for row_no, row in enumerate(reader, start=2):
            where = f"{Path(path).name} row {row_no}"
            date = _parse_date(row["date"], where)
            try:
                vals = np.array([float(row[c]) if row[c].strip() else np.nan for c in HOUR_COLUMNS])
            except ValueError as exc:
                raise DataError(f"{where}: {exc}") from None
            days = out.setdefault(row["location_id"].strip(), {})
            if date in days:
                raise DataError(f"{where}: duplicate date {date} for location {row['location_id']!r}")
            days[date] = vals
    return out


def assemble_season(days: dict[dt.date, np.ndarray], season_start_year: int) -> SeasonSeries:
    first, _ = season_window(season_start_year)
    rows = []
    for i in range(SEASON_LENGTH):
        date = first + dt.timedelta(days=i)
        if date not in days:
            raise DataError(f"missing temperatures for {date}")
        rows.append(days[date])
    return SeasonSeries(np.stack(rows), season_start_year)


def available_seasons(days: dict[dt.date, np.ndarray]) -> list[int]:
    """Season start years whose full window is present in ``days``."""
    if not days:
        return []
    years = sorted({d.year for d in days})
    out = []
    for year in range(years[0] - 1, years[-1] + 1):
        first, last = season_window(year)
        if first in days and last in days and all(
            (first + dt.timedelta(days=i)) in days for i in range(SEASON_LENGTH)
        ):
            out.append(year)
    return out


def load_dataset(temps_path: str | Path, blooms_path: str | Path, strict: bool = True) -> IngestResult:
    """Ingest the two CSV files into a validated :class:`Dataset`.

    With ``strict`` any rejected row raises :class:`DataError`; otherwise
    rejected rows are skipped and listed in the result.
    """
    locations, records, rejected = read_blooms_csv(blooms_path)
    temps = read_temps_csv(temps_path)
    samples = []
    seen = set()
    for row_no, rec in records:
        where = f"{Path(blooms_path).name} row {row_no}"
        key = (rec.location_id, rec.season_start_year)
        if key in seen:
            rejected.append(f"{where}: duplicate bloom record for {key}")
            continue
        try:
            series = assemble_season(temps.get(rec.location_id, {}), rec.season_start_year)
        except DataError as exc:
            rejected.append(f"{where}: season {rec.season_start_year} of {rec.location_id!r}: {exc}")
            continue
        seen.add(key)
        samples.append((series, rec))
    if rejected:
        if strict:
            raise DataError("; ".join(rejected))
        for msg in rejected:
            logger.warning("rejected %s", msg)
    used = {rec.location_id for _, rec in samples}
    locs = {k: v for k, v in locations.items() if k in used}
    return IngestResult(Dataset(tuple(samples), locs), rejected)


def write_dataset_csv(data: Dataset, temps_path: str | Path, blooms_path: str | Path) -> None:
    """Write ``data`` in the ``temps.csv`` / ``blooms.csv`` schemas."""
    with open(temps_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["location_id", "date", *HOUR_COLUMNS])
        for series, rec in data.samples:
            first = season_start(rec.season_start_year)
            for i, row in enumerate(series.temps):
                date = first + dt.timedelta(days=i)
                w.writerow([rec.location_id, date.isoformat(), *(repr(float(v)) for v in row)])
    with open(blooms_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["location_id", "latitude", "longitude", "variety", "bloom_date"])
        for _, rec in data.samples:
            loc = data.locations[rec.location_id]
            date = season_index_to_date(rec.bloom_day, rec.season_start_year)
            w.writerow([loc.location_id, repr(loc.latitude), repr(loc.longitude), loc.variety, date.isoformat()])


def stack_temps(series: Sequence[SeasonSeries]) -> np.ndarray:
    return np.stack([s.temps for s in series])

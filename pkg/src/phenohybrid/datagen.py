"""Synthetic hourly climates and oracle bloom dates.

Seasons are sinusoidal in day of year and hour of day plus Gaussian noise.
Bloom labels come from a mechanistic model with known parameters, so fitted
models can be checked against the truth.

Random streams are derived from ``(seed, purpose, location, year, retry)``
through :class:`numpy.random.SeedSequence`, so every season is reproducible
on its own regardless of generation order.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .domain import HOURS, SEASON_LENGTH, Dataset, Location, BloomRecord, SeasonSeries
from .mechanistic.models import (
    NO_BLOOM,
    ChillModelKind,
    MechanisticParams,
    predict_bloom_hard,
)

SEASON_START_DOY = 274  # Oct 1 in a 365-day year
DIURNAL_PEAK_HOUR = 14

_STREAM_WEATHER = 0
_STREAM_LOCATION = 1
_STREAM_JITTER = 2


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ClimateSpec:
    mean_temp: float = 12.0
    seasonal_amplitude: float = 10.0
    diurnal_amplitude: float = 5.0
    daily_noise_std: float = 2.5
    hourly_noise_std: float = 0.5
    seed: int = 0
    # AR(1) coefficient of the daily anomalies; 0 gives independent days
    daily_noise_autocorr: float = 0.0
    peak_day_of_year: float = 200.0
    # location offsets are drawn uniformly from [-range, range]
    location_offset_range: float = 3.0

    def __post_init__(self):
        for name in ("seasonal_amplitude", "diurnal_amplitude", "daily_noise_std",
                     "hourly_noise_std", "location_offset_range"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not -1.0 < self.daily_noise_autocorr < 1.0:
            raise ValueError("daily_noise_autocorr must lie in (-1, 1)")


@dataclass(frozen=True)
class OracleSpec:
    kind: ChillModelKind
    params: MechanisticParams
    jitter_std: float = 0.0
    # requirements shift linearly with the location's climate offset (per degC)
    chill_req_per_degree: float = 0.0
    forcing_req_per_degree: float = 0.0
    floor_utah: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", ChillModelKind(self.kind))
        if self.jitter_std < 0:
            raise ValueError("jitter_std must be >= 0")

    def params_at(self, offset: float) -> MechanisticParams:
        p = self.params
        return MechanisticParams(
            max(p.chill_req + self.chill_req_per_degree * offset, 0.0),
            max(p.forcing_req + self.forcing_req_per_degree * offset, 0.0),
            p.base_temp,
        )


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng([int(k) & 0xFFFFFFFF for k in keys])


def season_day_of_year(length: int = SEASON_LENGTH) -> np.ndarray:
    """Day of year (365-day calendar) of every season day."""
    return (SEASON_START_DOY - 1 + np.arange(length)) % 365 + 1


def expected_temps(spec: ClimateSpec, location_offset: float = 0.0, length: int = SEASON_LENGTH) -> np.ndarray:
    """Noise-free temperature field, shape ``(length, 24)``."""
    doy = season_day_of_year(length)
    hours = np.arange(HOURS)
    seasonal = spec.seasonal_amplitude * np.cos(2 * np.pi * (doy - spec.peak_day_of_year) / 365.0)
    diurnal = spec.diurnal_amplitude * np.cos(2 * np.pi * (hours - DIURNAL_PEAK_HOUR) / HOURS)
    return spec.mean_temp + location_offset + seasonal[:, None] + diurnal[None, :]


def gen_season(spec: ClimateSpec, location_offset: float, year_seed, season_start_year: int | None = None,
               length: int = SEASON_LENGTH) -> SeasonSeries | np.ndarray:
    """One season of hourly temperatures.

    ``year_seed`` (an int or a sequence of ints) selects the noise stream.
    Returns a :class:`SeasonSeries` for full-length seasons and a bare array
    otherwise.
    """
    keys = [int(k) for k in np.atleast_1d(year_seed)]
    rng = _rng(spec.seed, _STREAM_WEATHER, *keys)
    temps = expected_temps(spec, location_offset, length)
    rho = spec.daily_noise_autocorr
    innov = rng.normal(0.0, spec.daily_noise_std, size=length)
    daily = np.empty(length)
    daily[0] = innov[0]
    step = np.sqrt(1.0 - rho * rho)
    for t in range(1, length):
        daily[t] = rho * daily[t - 1] + step * innov[t]
    hourly = rng.normal(0.0, spec.hourly_noise_std, size=(length, HOURS))
    temps = temps + daily[:, None] + hourly
    if length != SEASON_LENGTH:
        return temps
    year = keys[-1] if season_start_year is None else season_start_year
    return SeasonSeries(temps, year)


@dataclass
class SyntheticTruth:
    climate: ClimateSpec
    oracle: OracleSpec
    offsets: dict[str, float] = field(default_factory=dict)
    location_params: dict[str, MechanisticParams] = field(default_factory=dict)
    retries: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        oracle = asdict(self.oracle)
        oracle["kind"] = self.oracle.kind.value
        return {
            "climate": asdict(self.climate),
            "oracle": oracle,
            "locations": {
                loc: {"offset": self.offsets[loc], **asdict(self.location_params[loc])}
                for loc in sorted(self.offsets)
            },
            "retries": dict(sorted(self.retries.items())),
        }

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def gen_dataset_with_truth(climate: ClimateSpec, oracle: OracleSpec, n_locations: int, years: Sequence[int],
                           n_varieties: int = 1, max_retries: int = 10,
                           retry_cooling: float = 1.0) -> tuple[Dataset, SyntheticTruth]:
    """Generate a labelled dataset and a record of the generating truth.

    A season in which the oracle never blooms is redrawn with its offset
    lowered by ``retry_cooling`` degC, at most ``max_retries`` times.
    """
    if n_locations < 1:
        raise ValueError("n_locations must be >= 1")
    years = list(years)
    if not years:
        raise ValueError("years must be non-empty")
    truth = SyntheticTruth(climate, oracle)
    locations = {}
    samples = []
    for li in range(n_locations):
        loc_id = f"L{li:03d}"
        lrng = _rng(climate.seed, _STREAM_LOCATION, li)
        offset = float(lrng.uniform(-climate.location_offset_range, climate.location_offset_range))
        lat = float(lrng.uniform(30.0, 50.0))
        lon = float(lrng.uniform(-10.0, 140.0))
        variety = f"V{li % n_varieties}"
        locations[loc_id] = Location(loc_id, lat, lon, variety)
        params = oracle.params_at(offset)
        truth.offsets[loc_id] = offset
        truth.location_params[loc_id] = params
        for year in years:
            for retry in range(max_retries + 1):
                series = gen_season(climate, offset - retry * retry_cooling, (li, year, retry), year)
                day = predict_bloom_hard(series, params, oracle.kind, oracle.floor_utah)
                if day is not NO_BLOOM:
                    break
            else:
                raise GenerationError(
                    f"location {loc_id} season {year}: no bloom after {max_retries} colder retries")
            if retry:
                truth.retries[f"{loc_id}/{year}"] = retry
            if oracle.jitter_std > 0:
                jitter = int(np.rint(_rng(climate.seed, _STREAM_JITTER, li, year).normal(0.0, oracle.jitter_std)))
                day = int(np.clip(day + jitter, 1, SEASON_LENGTH))
            samples.append((series, BloomRecord(loc_id, variety, year, int(day))))
    return Dataset(tuple(samples), locations), truth


def gen_dataset(climate: ClimateSpec, oracle: OracleSpec, n_locations: int, years: Sequence[int],
                **kwargs) -> Dataset:
    return gen_dataset_with_truth(climate, oracle, n_locations, years, **kwargs)[0]

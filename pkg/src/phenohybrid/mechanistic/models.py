"""Chill and forcing unit functions and the hard-threshold bloom predictor.

Every unit function accepts hourly temperatures with the 24 hours on the last
axis, so the same call works for a single day ``(24,)``, a season ``(S, 24)``
or a batch of seasons ``(N, S, 24)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from ..domain import HOURS, SeasonSeries
from . import constants


class ChillModelKind(str, enum.Enum):
    CHILL_HOURS = "chill-hours"
    UTAH = "utah"
    CHILL_DAYS = "chill-days"


class _NoBloom:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "NoBloom"

    def __reduce__(self):
        return (_NoBloom, ())


NO_BLOOM = _NoBloom()
# Integer code used in batched arrays of bloom days.
NO_BLOOM_CODE = -1


def score_day(day, season_length: int) -> int:
    """Map a predicted day to the value used in error metrics (NoBloom -> S)."""
    return season_length if day is NO_BLOOM else int(day)


def score_days(days: np.ndarray, season_length: int) -> np.ndarray:
    days = np.asarray(days)
    return np.where(days == NO_BLOOM_CODE, season_length, days)


@dataclass(frozen=True)
class MechanisticParams:
    chill_req: float
    forcing_req: float
    base_temp: float

    def __post_init__(self):
        if not self.chill_req >= 0:
            raise ValueError(f"chill_req must be non-negative, got {self.chill_req}")
        if not self.forcing_req >= 0:
            raise ValueError(f"forcing_req must be non-negative, got {self.forcing_req}")
        if not np.isfinite(self.base_temp):
            raise ValueError("base_temp must be finite")


def _hours(temps) -> np.ndarray:
    x = np.asarray(temps, dtype=float)
    if x.shape[-1] != HOURS:
        raise ValueError(f"last axis must hold {HOURS} hourly values, got shape {x.shape}")
    return x


def chill_hours(day_temps, upper_threshold: float = constants.CHILL_HOURS_UPPER) -> np.ndarray:
    """Number of hours with ``0 <= T <= upper_threshold``."""
    x = _hours(day_temps)
    inside = (x >= constants.CHILL_HOURS_LOWER) & (x <= upper_threshold)
    return inside.sum(axis=-1).astype(float)


def utah_weight(temps) -> np.ndarray:
    """Utah chill units of individual hourly temperatures."""
    idx = np.searchsorted(constants.UTAH_UPPER_BOUNDS, np.asarray(temps, dtype=float), side="left")
    return constants.UTAH_WEIGHTS[idx]


def utah_chill(day_temps) -> np.ndarray:
    return utah_weight(_hours(day_temps)).sum(axis=-1)


def chill_days(day_min, day_max, day_mean, base_temp) -> np.ndarray:
    """Daily chill of the Chill Days model as a non-negative quantity.

    Implements the five-case table in :mod:`.constants` and returns ``-Cd``
    floored at zero. Raises ``ValueError`` when ``min <= mean <= max`` fails.
    """
    tn, tx, tm = (np.asarray(v, dtype=float) for v in (day_min, day_max, day_mean))
    tc = np.broadcast_to(np.asarray(base_temp, dtype=float), np.broadcast(tn, tx, tm).shape)
    if np.any(tn > tm) or np.any(tm > tx) or not np.all(np.isfinite(tn + tx + tm)):
        raise ValueError("invalid day: expected finite day_min <= day_mean <= day_max")
    tn, tx, tm = np.broadcast_arrays(tn, tx, tm)

    span = np.where(tx > tn, tx - tn, 1.0)
    below_zero_part = (tx / span) * (tx / 2.0)
    cd = np.select(
        [
            (0 <= tc) & (tc <= tn),
            (0 <= tn) & (tn <= tc) & (tc < tx),
            (0 <= tn) & (tx <= tc),
            (tn < 0) & (0 < tx) & (tx <= tc),
            (tn < 0) & (0 < tc) & (tc < tx),
        ],
        [
            np.zeros_like(tn),
            -((tm - tn) - (tx - tc) / 2.0),
            -(tm - tn),
            -below_zero_part,
            -(below_zero_part - (tx - tc) / 2.0),
        ],
        default=0.0,
    )
    return np.maximum(-cd, 0.0)


def chill_days_hourly(day_temps, base_temp) -> np.ndarray:
    """Chill Days units computed from hourly data via the daily extrema."""
    x = _hours(day_temps)
    return chill_days(x.min(axis=-1), x.max(axis=-1), x.mean(axis=-1), base_temp)


def gdh_forcing(day_temps, base_temp) -> np.ndarray:
    """Growing degree hours: sum over hours of ``max(0, T - base_temp)``."""
    x = _hours(day_temps)
    return np.maximum(0.0, x - np.asarray(base_temp, dtype=float)[..., None]).sum(axis=-1)


def daily_chill(temps, kind: ChillModelKind, base_temp: float = 0.0,
                upper_threshold: float = constants.CHILL_HOURS_UPPER) -> np.ndarray:
    kind = ChillModelKind(kind)
    if kind is ChillModelKind.CHILL_HOURS:
        return chill_hours(temps, upper_threshold)
    if kind is ChillModelKind.UTAH:
        return utah_chill(temps)
    return chill_days_hourly(temps, base_temp)


def cumulative_chill(daily: np.ndarray, floor: bool = True) -> np.ndarray:
    """Running chill sum along the last axis.

    With ``floor`` the running total is reset to zero whenever it would turn
    negative, ``C_t = max(0, C_{t-1} + c_t)``. This only changes anything for
    the Utah model, whose hourly weights can be negative.
    """
    daily = np.asarray(daily, dtype=float)
    if not floor or np.all(daily >= 0):
        return np.cumsum(daily, axis=-1)
    out = np.empty_like(daily)
    acc = np.zeros(daily.shape[:-1])
    for t in range(daily.shape[-1]):
        acc = np.maximum(acc + daily[..., t], 0.0)
        out[..., t] = acc
    return out


def predict_bloom_hard(series, params: MechanisticParams, kind: ChillModelKind,
                       floor_utah: bool = True):
    """Walk the season and return the 1-based bloom day or ``NO_BLOOM``.

    Chilling is complete on the first day the running chill total reaches
    ``chill_req``; from that day on (inclusive) forcing units accumulate and
    bloom is the first day their total reaches ``forcing_req``.
    """
    temps = series.temps if isinstance(series, SeasonSeries) else np.asarray(series, dtype=float)
    kind = ChillModelKind(kind)
    chill = daily_chill(temps, kind, params.base_temp)
    force = gdh_forcing(temps, params.base_temp)
    floor = floor_utah and kind is ChillModelKind.UTAH
    c_total = 0.0
    f_total = 0.0
    chilled = False
    for t in range(temps.shape[0]):
        c_total += chill[t]
        if floor:
            c_total = max(c_total, 0.0)
        if not chilled and c_total >= params.chill_req:
            chilled = True
        if chilled:
            f_total += force[t]
            if f_total >= params.forcing_req:
                return t + 1
    return NO_BLOOM


def first_crossing(cum: np.ndarray, threshold: float) -> np.ndarray:
    """0-based index of the first ``cum[..., t] >= threshold`` (``S`` if never)."""
    hit = cum >= threshold
    idx = hit.argmax(axis=-1)
    return np.where(hit.any(axis=-1), idx, cum.shape[-1])


def bloom_days_for_grid(chill_cum: np.ndarray, force: np.ndarray,
                        chill_reqs, forcing_reqs) -> np.ndarray:
    """Bloom days of ``N`` seasons for every (chill_req, forcing_req) pair.

    ``chill_cum`` is the running chill total and ``force`` the daily forcing,
    both ``(N, S)``. Returns an ``(N, len(chill_reqs), len(forcing_reqs))``
    integer array of 1-based days with ``NO_BLOOM_CODE`` for no bloom. The
    forcing sum for each start day is accumulated left to right exactly as in
    :func:`predict_bloom_hard`.
    """
    chill_reqs = np.asarray(chill_reqs, dtype=float)
    forcing_reqs = np.asarray(forcing_reqs, dtype=float)
    n, s = force.shape
    out = np.full((n, chill_reqs.size, forcing_reqs.size), NO_BLOOM_CODE, dtype=int)
    # cummax turns the first-crossing search into a sorted lookup even when
    # the running chill total dips (unfloored Utah).
    reach = np.maximum.accumulate(chill_cum, axis=1)
    for i in range(n):
        starts = np.searchsorted(reach[i], chill_reqs, side="left")
        for start in np.unique(starts):
            if start >= s:
                continue
            f_cum = np.cumsum(force[i, start:])
            pos = np.searchsorted(f_cum, forcing_reqs, side="left")
            days = np.where(pos < f_cum.size, start + pos + 1, NO_BLOOM_CODE)
            out[i, starts == start, :] = days
    return out


def predict_bloom_batch(temps: np.ndarray, params: MechanisticParams, kind: ChillModelKind,
                        floor_utah: bool = True) -> np.ndarray:
    """Vectorized :func:`predict_bloom_hard` for ``(N, S, 24)`` input."""
    kind = ChillModelKind(kind)
    temps = np.asarray(temps, dtype=float)
    chill = cumulative_chill(daily_chill(temps, kind, params.base_temp),
                             floor=floor_utah and kind is ChillModelKind.UTAH)
    force = gdh_forcing(temps, params.base_temp)
    days = bloom_days_for_grid(chill, force, [params.chill_req], [params.forcing_req])
    return days[:, 0, 0]

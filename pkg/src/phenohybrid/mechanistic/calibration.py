"""Grid-search calibration of the mechanistic models."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from ..domain import Dataset
from .models import (
    ChillModelKind,
    MechanisticParams,
    bloom_days_for_grid,
    cumulative_chill,
    daily_chill,
    gdh_forcing,
    predict_bloom_batch,
    score_days,
)

logger = logging.getLogger(__name__)

DEFAULT_CHILL_RANGES = {
    ChillModelKind.CHILL_HOURS: (100.0, 2000.0),
    ChillModelKind.UTAH: (100.0, 2000.0),
    ChillModelKind.CHILL_DAYS: (20.0, 400.0),
}
DEFAULT_FORCING_RANGE = (1000.0, 20000.0)
DEFAULT_STEPS = 20


@dataclass(frozen=True)
class GridSpec:
    chill_reqs: tuple[float, ...]
    forcing_reqs: tuple[float, ...]
    base_temps: tuple[float, ...]

    def __post_init__(self):
        for name in ("chill_reqs", "forcing_reqs", "base_temps"):
            axis = tuple(float(v) for v in getattr(self, name))
            if not axis:
                raise ValueError(f"grid axis {name} is empty")
            if any(b <= a for a, b in zip(axis, axis[1:])):
                raise ValueError(f"grid axis {name} must be strictly increasing")
            object.__setattr__(self, name, axis)

    @classmethod
    def default(cls, kind: ChillModelKind, steps: int = DEFAULT_STEPS) -> "GridSpec":
        lo, hi = DEFAULT_CHILL_RANGES[ChillModelKind(kind)]
        return cls(
            tuple(np.linspace(lo, hi, steps)),
            tuple(np.linspace(*DEFAULT_FORCING_RANGE, steps)),
            tuple(float(t) for t in range(16)),
        )

    @property
    def shape(self) -> tuple[int, int, int]:
        return len(self.chill_reqs), len(self.forcing_reqs), len(self.base_temps)

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items()}


class Calibration(dict):
    """Mapping of group key to fitted :class:`MechanisticParams`.

    ``mse`` holds the training mean squared error of each group and
    ``skipped`` the requested groups that had no training samples.
    """

    def __init__(self, params, mse, n_samples, skipped=(), kind=None, grouping=None, grid=None):
        super().__init__(params)
        self.mse = dict(mse)
        self.n_samples = dict(n_samples)
        self.skipped = list(skipped)
        self.kind = kind
        self.grouping = grouping
        self.grid = grid


def _sse_for_base_temp(temps, observed, group_idx, n_groups, kind, grid, base_temp, floor_utah):
    s = temps.shape[1]
    chill = cumulative_chill(daily_chill(temps, kind, base_temp),
                             floor=floor_utah and kind is ChillModelKind.UTAH)
    force = gdh_forcing(temps, base_temp)
    days = score_days(bloom_days_for_grid(chill, force, grid.chill_reqs, grid.forcing_reqs), s)
    sq = (days - observed[:, None, None]) ** 2
    sse = np.zeros((n_groups,) + sq.shape[1:], dtype=np.int64)
    np.add.at(sse, group_idx, sq)
    return sse


def grid_search(train: Dataset, kind: ChillModelKind, grid: GridSpec | None = None,
                grouping: str = "location", groups=None, floor_utah: bool = True,
                n_jobs: int = 1) -> Calibration:
    """Fit one parameter set per group by exhaustive search.

    For each group the grid point with the lowest training MSE is chosen;
    ties go to the lexicographically smallest ``(chill_req, forcing_req,
    base_temp)``. Squared errors are summed as integers, so the result does
    not depend on sample order or on how the work is split across jobs.

    ``groups`` optionally lists keys that must be fitted; any of them without
    training samples is logged and reported in ``Calibration.skipped``.
    """
    kind = ChillModelKind(kind)
    grid = grid or GridSpec.default(kind)
    if len(train) == 0:
        raise ValueError("grid search needs a non-empty training set")
    keys = train.group_keys(grouping)
    present = sorted(set(keys))
    skipped = sorted(set(groups or ()) - set(present))
    for key in skipped:
        logger.warning("group %r has no training samples; skipped", key)
    index = {k: i for i, k in enumerate(present)}
    group_idx = np.array([index[k] for k in keys])
    temps = train.temps
    observed = train.bloom_days.astype(np.int64)

    per_tb = Parallel(n_jobs=n_jobs)(
        delayed(_sse_for_base_temp)(temps, observed, group_idx, len(present), kind, grid, tb, floor_utah)
        for tb in grid.base_temps
    )
    # (groups, chill, forcing, base_temp): C-order argmin is the lexicographic tie-break.
    sse = np.stack(per_tb, axis=-1)
    counts = np.bincount(group_idx, minlength=len(present))
    params, mse, n_samples = {}, {}, {}
    for key, g in index.items():
        flat = int(np.argmin(sse[g].ravel()))
        i, j, k = np.unravel_index(flat, grid.shape)
        params[key] = MechanisticParams(grid.chill_reqs[i], grid.forcing_reqs[j], grid.base_temps[k])
        mse[key] = float(sse[g][i, j, k]) / counts[g]
        n_samples[key] = int(counts[g])
    return Calibration(params, mse, n_samples, skipped, kind, grouping, grid)


def save_calibration(cal: Calibration, path: str | Path) -> None:
    doc = {
        "model": ChillModelKind(cal.kind).value,
        "grouping": cal.grouping,
        "grid": cal.grid.to_dict() if cal.grid else None,
        "groups": {
            key: {
                "chill_req": p.chill_req,
                "forcing_req": p.forcing_req,
                "base_temp": p.base_temp,
                "train_mse": cal.mse.get(key),
                "n_samples": cal.n_samples.get(key),
            }
            for key, p in sorted(cal.items())
        },
        "skipped": cal.skipped,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_calibration(path: str | Path) -> Calibration:
    doc = json.loads(Path(path).read_text())
    grid = GridSpec(**doc["grid"]) if doc.get("grid") else None
    groups = doc["groups"]
    params = {k: MechanisticParams(v["chill_req"], v["forcing_req"], v["base_temp"]) for k, v in groups.items()}
    return Calibration(
        params,
        {k: v.get("train_mse") for k, v in groups.items()},
        {k: v.get("n_samples") for k, v in groups.items()},
        doc.get("skipped", []),
        ChillModelKind(doc["model"]),
        doc["grouping"],
        grid,
    )


def params_filename(kind: ChillModelKind, grouping: str) -> str:
    return f"params_{ChillModelKind(kind).value}_{grouping}.json"


@dataclass
class MechanisticPredictor:
    """Predicts bloom days of a dataset from a fitted :class:`Calibration`."""

    calibration: Calibration
    floor_utah: bool = True
    grouping: str = field(init=False)

    def __post_init__(self):
        self.grouping = self.calibration.grouping

    def predict(self, data: Dataset) -> np.ndarray:
        keys = data.group_keys(self.grouping)
        out = np.empty(len(data), dtype=int)
        for key in sorted(set(keys)):
            if key not in self.calibration:
                raise KeyError(f"no fitted parameters for group {key!r}")
            idx = [i for i, k in enumerate(keys) if k == key]
            out[idx] = predict_bloom_batch(data.temps[idx], self.calibration[key],
                                           self.calibration.kind, self.floor_utah)
        return score_days(out, data.temps.shape[1])

"""Train/test protocols, repeated-seed evaluation and figure-data exports.

Three protocols are supported:

* ``temporal``: years are split into train and test; all locations appear in
  both; models are fitted per location.
* ``temporal-variety``: the same split, models fitted per variety.
* ``spatiotemporal``: additionally a share of the locations is held out
  entirely; test holds only (held-out location, test year) samples and train
  only (retained location, train year) samples; models are fitted per variety.

Splits are global over ``season_start_year`` and are drawn from
``numpy.random.default_rng((seed, stream))``. Both the split and the model
initialization of a run are driven by the same seed.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np
from joblib import Parallel, delayed
from threadpoolctl import threadpool_limits

from .domain import HOURS, Dataset
from .hybrid.model import ChillResponse, HybridParams
from .hybrid.training import HybridModel, TrainConfig, train, train_ablation_utah
from .mechanistic.calibration import GridSpec, MechanisticPredictor, grid_search
from .mechanistic.models import ChillModelKind

logger = logging.getLogger(__name__)

_YEAR_STREAM = 0
_LOCATION_STREAM = 1


class SplitError(ValueError):
    pass


class EvaluationError(RuntimeError):
    pass


class Setting(str, Enum):
    TEMPORAL = "temporal"
    TEMPORAL_VARIETY = "temporal-variety"
    SPATIOTEMPORAL = "spatiotemporal"

    @property
    def grouping(self) -> str:
        return "location" if self is Setting.TEMPORAL else "variety"


@dataclass(frozen=True)
class SplitSpec:
    setting: Setting = Setting.TEMPORAL
    train_year_fraction: float = 0.75
    holdout_location_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "setting", Setting(self.setting))
        for name in ("train_year_fraction", "holdout_location_fraction"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")


def holdout_count(n: int, fraction: float) -> int:
    """``max(1, round(fraction * n))`` with halves rounded up."""
    return max(1, int(math.floor(fraction * n + 0.5)))


def _canonical(data: Dataset, keep) -> Dataset:
    # sorting by (location, year) makes every split independent of row order
    idx = [i for i, (_, r) in enumerate(data.samples) if keep(r)]
    idx.sort(key=lambda i: (data.samples[i][1].location_id, data.samples[i][1].season_start_year))
    return data.subset(idx)


def make_split(data: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    years = sorted(set(int(y) for y in data.years))
    if len(years) < 2:
        raise SplitError(f"need at least 2 distinct years to split, got {len(years)}")
    n_test = min(holdout_count(len(years), 1.0 - spec.train_year_fraction), len(years) - 1)
    perm = np.random.default_rng((spec.seed, _YEAR_STREAM)).permutation(years)
    test_years = {int(y) for y in perm[:n_test]}

    if spec.setting is not Setting.SPATIOTEMPORAL:
        return (_canonical(data, lambda r: r.season_start_year not in test_years),
                _canonical(data, lambda r: r.season_start_year in test_years))

    locs = sorted(set(data.location_ids))
    if len(locs) < 2:
        raise SplitError(f"spatiotemporal split needs at least 2 locations, got {len(locs)}")
    n_hold = min(holdout_count(len(locs), spec.holdout_location_fraction), len(locs) - 1)
    held = set(np.random.default_rng((spec.seed, _LOCATION_STREAM)).permutation(locs)[:n_hold].tolist())
    train_set = _canonical(data, lambda r: r.location_id not in held and r.season_start_year not in test_years)
    test_set = _canonical(data, lambda r: r.location_id in held and r.season_start_year in test_years)
    return train_set, test_set


# ---------------------------------------------------------------------------
# fitters
# ---------------------------------------------------------------------------

class Predictor(Protocol):
    def predict(self, data: Dataset) -> np.ndarray: ...


class Fitter(Protocol):
    name: str

    def fit(self, train: Dataset, seed: int, grouping: str) -> Predictor: ...


@dataclass(frozen=True)
class MechanisticFitter:
    kind: ChillModelKind
    grid: GridSpec | None = None
    floor_utah: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", ChillModelKind(self.kind))

    @property
    def name(self) -> str:
        return self.kind.value

    def fit(self, train_data, seed, grouping):
        cal = grid_search(train_data, self.kind, self.grid, grouping, floor_utah=self.floor_utah)
        return MechanisticPredictor(cal, self.floor_utah)


@dataclass(frozen=True)
class HybridFitter:
    config: TrainConfig = field(default_factory=TrainConfig)
    name: str = "hybrid"

    def fit(self, train_data, seed, grouping):
        return train(train_data, seed, self.config, grouping).model


@dataclass(frozen=True)
class AblationFitter:
    config: TrainConfig = field(default_factory=TrainConfig)
    name: str = "hybrid-utah-ablation"

    def fit(self, train_data, seed, grouping):
        return train_ablation_utah(train_data, seed, self.config, grouping).model


@dataclass(frozen=True)
class _Constant:
    day: int

    def predict(self, data):
        return np.full(len(data), self.day, dtype=int)


@dataclass(frozen=True)
class MedianFitter:
    """Predicts the median training bloom day (halves rounded up) everywhere."""

    name: str = "median"

    def fit(self, train_data, seed, grouping):
        return _Constant(int(math.floor(np.median(train_data.bloom_days) + 0.5)))


@dataclass(frozen=True)
class FunctionFitter:
    """Adapts a plain ``fn(train, seed, grouping) -> predictor`` callable."""

    fn: Callable[[Dataset, int, str], Predictor]
    name: str = "custom"

    def fit(self, train_data, seed, grouping):
        return self.fn(train_data, seed, grouping)


def make_fitter(model: str, config: TrainConfig | None = None, grid: GridSpec | None = None,
                floor_utah: bool = True) -> Fitter:
    if model == "hybrid":
        return HybridFitter(config or TrainConfig())
    if model in ("ablation", "hybrid-utah-ablation"):
        return AblationFitter(config or TrainConfig())
    if model == "median":
        return MedianFitter()
    try:
        kind = ChillModelKind(model)
    except ValueError:
        raise ValueError(f"unknown model {model!r}") from None
    return MechanisticFitter(kind, grid, floor_utah)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class SeedResult:
    seed: int
    mae: float | None
    n_train: int
    n_test: int
    error: str | None = None
    # (location, variety, year, observed, predicted)
    samples: list[tuple[str, str, int, int, int]] = field(default_factory=list)


@dataclass
class EvalReport:
    model: str
    setting: Setting
    seeds: list[SeedResult]
    mean_mae: float
    se_mae: float
    config: dict = field(default_factory=dict)

    @property
    def n_seeds(self) -> int:
        """Number of seeds that produced a score."""
        return sum(r.error is None for r in self.seeds)

    @property
    def per_seed_mae(self) -> list[float]:
        return [r.mae for r in self.seeds if r.error is None]

    def pairs(self) -> list[dict]:
        return [
            {"seed": r.seed, "location_id": loc, "variety": var, "season_start_year": year,
             "observed": obs, "predicted": pred}
            for r in self.seeds for loc, var, year, obs, pred in r.samples
        ]

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "setting": self.setting.value,
            "n_seeds": self.n_seeds,
            "mean_mae": _json_float(self.mean_mae),
            "se_mae": _json_float(self.se_mae),
            "config": self.config,
            "seeds": [
                {"seed": r.seed, "mae": _json_float(r.mae), "n_train": r.n_train, "n_test": r.n_test,
                 "error": r.error, "samples": [list(s) for s in r.samples]}
                for r in self.seeds
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: Mapping) -> "EvalReport":
        seeds = [SeedResult(s["seed"], s["mae"], s["n_train"], s["n_test"], s["error"],
                            [tuple(x) for x in s["samples"]]) for s in doc["seeds"]]
        nan = float("nan")
        return cls(doc["model"], Setting(doc["setting"]), seeds,
                   nan if doc["mean_mae"] is None else doc["mean_mae"],
                   nan if doc["se_mae"] is None else doc["se_mae"], doc.get("config", {}))


def _json_float(x):
    return None if x is None or not math.isfinite(x) else float(x)


def mean_and_se(values: Sequence[float]) -> tuple[float, float]:
    """Mean and standard error using the sample standard deviation (ddof=1).

    The standard error of a single value is undefined and returned as NaN.
    """
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return float("nan"), float("nan")
    if v.size == 1:
        return float(v[0]), float("nan")
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size))


def mae(observed, predicted) -> float:
    return float(np.mean(np.abs(np.asarray(observed, dtype=int) - np.asarray(predicted, dtype=int))))


def run_seed(fitter: Fitter, data: Dataset, spec: SplitSpec, seed: int) -> SeedResult:
    """Split, fit and score one seed; failures are returned, not raised."""
    spec = replace(spec, seed=seed)
    stage = "split"
    try:
        train_data, test_data = make_split(data, spec)
        if len(train_data) == 0 or len(test_data) == 0:
            raise SplitError(f"empty split: {len(train_data)} train / {len(test_data)} test samples")
        stage = "fit"
        with threadpool_limits(limits=1):
            model = fitter.fit(train_data, seed, spec.setting.grouping)
            stage = "predict"
            pred = np.rint(np.asarray(model.predict(test_data))).astype(int)
    except Exception as exc:  # recorded per seed, surfaced by evaluate
        n_train = n_test = 0
        if stage != "split":
            n_train, n_test = len(train_data), len(test_data)
        return SeedResult(seed, None, n_train, n_test, f"{stage}: {type(exc).__name__}: {exc}")
    obs = test_data.bloom_days
    samples = [(r.location_id, r.variety, int(r.season_start_year), int(o), int(p))
               for r, o, p in zip(test_data.records, obs, pred)]
    return SeedResult(seed, mae(obs, pred), len(train_data), len(test_data), None, samples)


def evaluate(fitter: Fitter, data: Dataset, spec: SplitSpec, n_seeds: int | None = None,
             seeds: Sequence[int] | None = None, jobs: int = 1, config: dict | None = None) -> EvalReport:
    """Repeated-seed evaluation of ``fitter`` under ``spec.setting``.

    Seeds default to ``0 .. n_seeds-1``. Each seed runs in its own worker
    with BLAS pinned to one thread, so ``jobs`` does not change any number.
    Failed seeds are kept in the report with their error and excluded from
    the aggregate; if every seed fails an :class:`EvaluationError` is raised.
    """
    if seeds is None:
        if n_seeds is None or n_seeds < 1:
            raise ValueError("n_seeds must be >= 1")
        seeds = range(n_seeds)
    if not hasattr(fitter, "fit"):
        fitter = FunctionFitter(fitter, getattr(fitter, "__name__", "custom"))
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("seeds must be non-empty")
    if jobs == 1 or len(seeds) == 1:
        results = [run_seed(fitter, data, spec, s) for s in seeds]
    else:
        results = Parallel(n_jobs=jobs)(delayed(run_seed)(fitter, data, spec, s) for s in seeds)

    failed = [r for r in results if r.error is not None]
    for r in failed:
        msg = f"{fitter.name} seed {r.seed} failed: {r.error}"
        logger.warning(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    if len(failed) == len(results):
        raise EvaluationError(f"all {len(results)} seeds failed; first error: {failed[0].error}")
    mean, se = mean_and_se([r.mae for r in results if r.error is None])
    echo = {"split": {**asdict(spec), "setting": spec.setting.value}, **(config or {})}
    echo["split"].pop("seed")
    return EvalReport(fitter.name, spec.setting, results, mean, se, echo)


# ---------------------------------------------------------------------------
# figure data
# ---------------------------------------------------------------------------

def _chill_of(model) -> ChillResponse:
    if isinstance(model, ChillResponse):
        return model
    if isinstance(model, (HybridModel, HybridParams)):
        return model.chill
    raise TypeError(f"cannot take a chill response from {type(model).__name__}")


def export_response_density(model, test: Dataset, temp_bin: float = 0.5,
                            response_bin: float = 0.01) -> list[tuple[float, float, float]]:
    """Heat-map data of the daily chill response against the daily mean temperature.

    Every test day contributes one point (mean of its 24 hourly values, chill
    response). Temperatures are binned at ``temp_bin`` and responses at
    ``response_bin`` (lower bin edges). Rows are ``(temp_bin_lower,
    response_bin_lower, density)`` with densities summing to 1 within each
    temperature bin; empty cells are omitted.
    """
    if len(test) == 0:
        raise ValueError("export_response_density needs a non-empty dataset")
    rows = np.asarray(test.temps).reshape(-1, HOURS)
    response = _chill_of(model).evaluate(rows)
    tbin = np.floor(rows.mean(axis=1) / temp_bin).astype(np.int64)
    # a small guard keeps values like 0.07 from falling into the 0.06 bin
    rbin = np.floor(response / response_bin + 1e-9).astype(np.int64)
    cells, counts = np.unique(np.stack([tbin, rbin], axis=1), axis=0, return_counts=True)
    totals = {t: c for t, c in zip(*np.unique(tbin, return_counts=True))}
    return [(round(float(t) * temp_bin, 10), round(float(r) * response_bin, 10), float(c) / float(totals[t]))
            for (t, r), c in zip(cells, counts)]


def export_scatter(report: EvalReport, by_variety: bool = False) -> list[dict]:
    """Observed/predicted pairs with residuals ``predicted - observed``.

    With ``by_variety`` the rows are ordered by variety first.
    """
    rows = [{**p, "residual": p["predicted"] - p["observed"]} for p in report.pairs()]
    if by_variety:
        rows.sort(key=lambda p: p["variety"])
    return rows


def write_rows_csv(rows: Sequence, header: Sequence[str], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([row[h] for h in header] if isinstance(row, Mapping) else list(row))


RESPONSE_HEADER = ("mean_temp_bin", "response_bin", "density")
SCATTER_HEADER = ("seed", "location_id", "variety", "season_start_year", "observed", "predicted", "residual")

__all__ = [
    "AblationFitter", "EvalReport", "EvaluationError", "FunctionFitter", "HybridFitter", "MechanisticFitter", "MedianFitter",
    "Setting", "SeedResult", "SplitError", "SplitSpec", "evaluate", "export_response_density",
    "export_scatter", "holdout_count", "mae", "make_fitter", "make_split", "mean_and_se", "run_seed",
    "write_rows_csv",
]

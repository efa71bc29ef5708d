"""Command-line entry point.

Every subcommand writes into a fresh run directory ``<out>/<subcommand>-<UTC
timestamp>`` that appears atomically (it is assembled under a hidden name and
renamed when complete). Each run directory holds ``config.json`` (the resolved
configuration), the artifacts and ``manifest.json`` listing every artifact
with its SHA-256.

Options may come from a flat JSON file (``--config``); flags given on the
command line override file values. Exit status: 0 on success, 2 on a
configuration error, 1 on a failure while running.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__
from .domain import (
    Dataset,
    available_seasons,
    assemble_season,
    load_dataset,
    read_blooms_csv,
    read_temps_csv,
    season_index_to_date,
    write_dataset_csv,
)

logger = logging.getLogger("phenohybrid")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(exc).__name__}: {exc}")
        self.stage = stage


# ---------------------------------------------------------------------------
# option schema
# ---------------------------------------------------------------------------

def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _int(value) -> int:
    if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
        raise ValueError(f"expected an integer, got {value!r}")
    return int(value)


def _float(value) -> float:
    if isinstance(value, bool):
        raise ValueError(f"expected a number, got {value!r}")
    return float(value)


def _str(value) -> str:
    if not isinstance(value, str):
        raise ValueError(f"expected a string, got {value!r}")
    return value


def parse_seeds(value) -> list[int]:
    """``N`` means seeds ``0..N-1``; ``a,b,c`` (or a JSON list) lists them."""
    if isinstance(value, list):
        seeds = [_int(v) for v in value]
    elif isinstance(value, int) and not isinstance(value, bool):
        seeds = list(range(value))
    else:
        text = str(value).strip()
        if "," in text:
            seeds = [int(v) for v in text.split(",") if v.strip()]
        else:
            seeds = list(range(int(text)))
    if not seeds:
        raise ValueError("at least one seed is required")
    if len(set(seeds)) != len(seeds):
        raise ValueError("seeds must be distinct")
    return seeds


@dataclass(frozen=True)
class Opt:
    name: str
    type: Callable[[Any], Any]
    default: Any = None
    help: str = ""
    choices: tuple | None = None
    required: bool = False
    path: bool = False  # must name an existing file

    @property
    def flag(self) -> str:
        return "--" + self.name.replace("_", "-")


def _default_jobs() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


COMMON = [
    Opt("out", _str, "runs", "parent directory of the run directory"),
    Opt("jobs", _int, None, "worker processes (default: available cores)"),
    Opt("log_level", _str, "WARNING", "logging level", ("DEBUG", "INFO", "WARNING", "ERROR")),
]
DATA = [
    Opt("temps", _str, None, "hourly temperature CSV", required=True, path=True),
    Opt("blooms", _str, None, "bloom date CSV", required=True, path=True),
]
MODEL_KINDS = ("chill-hours", "utah", "chill-days")
TRAIN = [
    Opt("epochs", _int, 20000, "training epochs"),
    Opt("lr", _float, 1e-3, "initial learning rate"),
    Opt("weight_decay", _float, 1e-4, "weight decay on the MLP weights"),
    Opt("decay_factor", _float, 0.9, "learning-rate decay factor"),
    Opt("decay_every", _int, 2000, "epochs between learning-rate decays"),
    Opt("decay_phi", _bool, False, "also decay the threshold parameters"),
    Opt("normalize_inputs", _bool, False, "standardize MLP inputs with training statistics"),
    Opt("init", _str, "data", "threshold initialization", ("data", "fixed")),
]
GRID = [Opt("grid_file", _str, None, "JSON grid with chill_reqs, forcing_reqs, base_temps", path=True)]

SUBCOMMANDS: dict[str, tuple[str, list[Opt]]] = {
    "ingest": ("validate CSV inputs and write the accepted samples", DATA + [
        Opt("strict", _bool, False, "fail on the first rejected row instead of skipping it"),
    ]),
    "gen-synthetic": ("generate synthetic temperatures and oracle bloom dates", [
        Opt("oracle", _str, "utah", "generating chill model", MODEL_KINDS),
        Opt("chill_req", _float, 800.0, "oracle chill requirement"),
        Opt("forcing_req", _float, 6000.0, "oracle forcing requirement (degree hours)"),
        Opt("base_temp", _float, 5.0, "oracle base temperature"),
        Opt("chill_req_per_degree", _float, 0.0, "chill requirement shift per degC of location offset"),
        Opt("forcing_req_per_degree", _float, 0.0, "forcing requirement shift per degC of location offset"),
        Opt("jitter", _float, 0.0, "bloom-day jitter std (days)"),
        Opt("n_locations", _int, 10, "number of locations"),
        Opt("n_varieties", _int, 1, "number of varieties (assigned round-robin)"),
        Opt("first_year", _int, 2000, "first season start year"),
        Opt("n_years", _int, 20, "number of seasons per location"),
        Opt("seed", _int, 0, "random seed"),
        Opt("mean_temp", _float, 12.0, "mean annual temperature"),
        Opt("seasonal_amplitude", _float, 10.0, "seasonal amplitude"),
        Opt("diurnal_amplitude", _float, 5.0, "diurnal amplitude"),
        Opt("daily_noise_std", _float, 2.5, "day-to-day noise std"),
        Opt("daily_noise_autocorr", _float, 0.0, "AR(1) coefficient of the daily noise"),
        Opt("hourly_noise_std", _float, 0.5, "hourly noise std"),
        Opt("location_offset_range", _float, 3.0, "location offsets are uniform in +-range"),
    ]),
    "calibrate": ("grid-search a biophysical model", DATA + GRID + [
        Opt("model", _str, "utah", "chill model", MODEL_KINDS),
        Opt("grouping", _str, "location", "parameter grouping", ("location", "variety")),
        Opt("floor_utah", _bool, True, "floor the cumulative Utah chill at zero"),
    ]),
    "train": ("train the hybrid model", DATA + TRAIN + [
        Opt("grouping", _str, "location", "threshold-parameter grouping", ("location", "variety")),
        Opt("seed", _int, 0, "initialization seed"),
        Opt("ablation", _bool, False, "replace the MLP by the fixed scaled Utah response"),
    ]),
    "predict": ("predict bloom dates for every complete season in a temperature CSV", [
        Opt("model_file", _str, None, "hybrid model or calibration JSON", required=True, path=True),
        Opt("temps", _str, None, "hourly temperature CSV", required=True, path=True),
        Opt("blooms", _str, None, "bloom CSV supplying location varieties", path=True),
    ]),
    "evaluate": ("repeated-seed evaluation under a split protocol", DATA + TRAIN + GRID + [
        Opt("model", _str, "utah", "model to evaluate",
            MODEL_KINDS + ("hybrid", "ablation", "median")),
        Opt("setting", _str, "temporal", "split protocol", ("temporal", "temporal-variety", "spatiotemporal")),
        Opt("seeds", parse_seeds, [0], "seed count N or comma-separated seed list"),
        Opt("train_year_fraction", _float, 0.75, "share of years used for training"),
        Opt("holdout_location_fraction", _float, 0.25, "share of locations held out (spatiotemporal)"),
        Opt("floor_utah", _bool, True, "floor the cumulative Utah chill at zero"),
    ]),
    "export-response": ("chill response density against daily mean temperature", DATA + [
        Opt("model_file", _str, None, "hybrid model JSON", required=True, path=True),
        Opt("temp_bin", _float, 0.5, "temperature bin width"),
        Opt("response_bin", _float, 0.01, "response bin width"),
    ]),
    "export-scatter": ("observed vs predicted pairs of an evaluation report", [
        Opt("report", _str, None, "report.json of an evaluate run", required=True, path=True),
        Opt("by_variety", _bool, False, "order rows by variety"),
    ]),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="phenohybrid", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", required=True)
    for name, (help_text, opts) in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="flat JSON file of option values; flags override it")
        for opt in opts + COMMON:
            if opt.required:
                note = " (required)"
            elif opt.default is None:
                note = ""
            else:
                note = f" (default: {opt.default})"
            kwargs = {"dest": opt.name, "help": opt.help + note}
            if opt.type is _bool:
                kwargs["action"] = argparse.BooleanOptionalAction
            else:
                kwargs["type"] = opt.type
                kwargs["metavar"] = opt.name.upper()
                if opt.choices:
                    kwargs["choices"] = opt.choices
            p.add_argument(opt.flag, **kwargs)
    return parser


def resolve_config(command: str, flags: dict, config_path: str | None) -> dict:
    """Defaults, overridden by the config file, overridden by explicit flags."""
    opts = {o.name: o for o in SUBCOMMANDS[command][1] + COMMON}
    values = {name: o.default for name, o in opts.items()}
    if config_path:
        try:
            doc = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError("config", f"cannot read {config_path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config", "config file must hold a JSON object")
        for key, raw in doc.items():
            name = key.replace("-", "_")
            if name not in opts:
                raise ConfigError(key, f"unknown option for {command}")
            try:
                values[name] = None if raw is None else opts[name].type(raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(key, str(exc)) from None
    values.update(flags)
    for name, opt in opts.items():
        value = values[name]
        if opt.required and value is None:
            raise ConfigError(name, f"required (pass {opt.flag} or set it in the config file)")
        if value is not None and opt.choices and value not in opt.choices:
            raise ConfigError(name, f"must be one of {list(opt.choices)}, got {value!r}")
        if opt.path and value is not None and not Path(value).is_file():
            raise ConfigError(name, f"file not found: {value}")
    if values["jobs"] is None:
        values["jobs"] = _default_jobs()
    if values["jobs"] < 1:
        raise ConfigError("jobs", "must be >= 1")
    return values


# ---------------------------------------------------------------------------
# run directory
# ---------------------------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump_json(doc, path: Path) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


@dataclass
class Run:
    command: str
    config: dict
    workdir: Path
    stage: str = "setup"
    notes: list[str] = field(default_factory=list)

    def path(self, name: str) -> Path:
        return self.workdir / name

    def finish(self, parent: Path, started: dt.datetime) -> Path:
        artifacts = []
        for p in sorted(self.workdir.rglob("*")):
            if p.is_file():
                artifacts.append({"path": p.relative_to(self.workdir).as_posix(),
                                  "sha256": _sha256(p), "bytes": p.stat().st_size})
        _dump_json({"command": self.command, "created_utc": started.isoformat(), "version": __version__,
                    "artifacts": artifacts}, self.workdir / "manifest.json")
        stamp = started.strftime("%Y%m%dT%H%M%S%fZ")
        for n in range(1000):
            final = parent / (f"{self.command}-{stamp}" + (f"-{n}" if n else ""))
            try:
                os.rename(self.workdir, final)
                return final
            except OSError:
                if not final.exists():
                    raise
        raise FileExistsError(f"cannot find a free run directory name under {parent}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _load(run: Run, strict: bool = True) -> Dataset:
    run.stage = "ingest"
    return load_dataset(run.config["temps"], run.config["blooms"], strict=strict).dataset


def _train_config(cfg: dict):
    from .hybrid.training import TrainConfig

    return TrainConfig(epochs=cfg["epochs"], lr=cfg["lr"], weight_decay=cfg["weight_decay"],
                       decay_factor=cfg["decay_factor"], decay_every=cfg["decay_every"],
                       decay_phi=cfg["decay_phi"], normalize_inputs=cfg["normalize_inputs"], init=cfg["init"])


def _grid(cfg: dict, kind):
    from .mechanistic.calibration import GridSpec

    if not cfg.get("grid_file"):
        return GridSpec.default(kind)
    try:
        doc = json.loads(Path(cfg["grid_file"]).read_text())
        return GridSpec(**{k: doc[k] for k in ("chill_reqs", "forcing_reqs", "base_temps")})
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError("grid_file", str(exc)) from None


def cmd_ingest(run: Run) -> None:
    cfg = run.config
    run.stage = "ingest"
    result = load_dataset(cfg["temps"], cfg["blooms"], strict=cfg["strict"])
    run.stage = "write"
    write_dataset_csv(result.dataset, run.path("temps.csv"), run.path("blooms.csv"))
    with open(run.path("rejected.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["reason"])
        w.writerows([r] for r in result.rejected)
    _dump_json({"n_samples": len(result.dataset), "n_rejected": len(result.rejected),
                "n_locations": len(set(result.dataset.location_ids))}, run.path("summary.json"))


def cmd_gen_synthetic(run: Run) -> None:
    from .datagen import ClimateSpec, OracleSpec, gen_dataset_with_truth
    from .mechanistic.models import MechanisticParams

    cfg = run.config
    run.stage = "config"
    try:
        climate = ClimateSpec(cfg["mean_temp"], cfg["seasonal_amplitude"], cfg["diurnal_amplitude"],
                              cfg["daily_noise_std"], cfg["hourly_noise_std"], cfg["seed"],
                              cfg["daily_noise_autocorr"], location_offset_range=cfg["location_offset_range"])
    except ValueError as exc:
        raise ConfigError(str(exc).split()[0], str(exc)) from None
    if cfg["jitter"] < 0:
        raise ConfigError("jitter", "must be >= 0")
    for name in ("n_locations", "n_years", "n_varieties"):
        if cfg[name] < 1:
            raise ConfigError(name, "must be >= 1")
    oracle = OracleSpec(cfg["oracle"], MechanisticParams(cfg["chill_req"], cfg["forcing_req"], cfg["base_temp"]),
                        cfg["jitter"], cfg["chill_req_per_degree"], cfg["forcing_req_per_degree"])
    run.stage = "generate"
    years = range(cfg["first_year"], cfg["first_year"] + cfg["n_years"])
    data, truth = gen_dataset_with_truth(climate, oracle, cfg["n_locations"], years, n_varieties=cfg["n_varieties"])
    run.stage = "write"
    write_dataset_csv(data, run.path("temps.csv"), run.path("blooms.csv"))
    truth.write(run.path("truth.json"))


def cmd_calibrate(run: Run) -> None:
    from .mechanistic.calibration import grid_search, params_filename, save_calibration

    cfg = run.config
    grid = _grid(cfg, cfg["model"])
    data = _load(run)
    run.stage = "calibrate"
    cal = grid_search(data, cfg["model"], grid, cfg["grouping"], floor_utah=cfg["floor_utah"], n_jobs=cfg["jobs"])
    run.stage = "write"
    save_calibration(cal, run.path(params_filename(cfg["model"], cfg["grouping"])))


def cmd_train(run: Run) -> None:
    from .hybrid.io import save_model, write_loss_trace
    from .hybrid.training import train, train_ablation_utah

    cfg = run.config
    try:
        tc = _train_config(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc).split()[0], str(exc)) from None
    data = _load(run)
    run.stage = "train"
    fit = train_ablation_utah if cfg["ablation"] else train
    result = fit(data, cfg["seed"], tc, cfg["grouping"])
    run.stage = "write"
    save_model(result.model, run.path("model.json"))
    write_loss_trace(result.loss_trace, run.path("loss_trace.csv"))


@dataclass
class _Seasons:
    """Unlabelled seasons exposing what the predictors read from a Dataset."""

    keys: list[tuple[str, int]]
    temps: np.ndarray
    variety: dict[str, str]

    def __len__(self):
        return len(self.keys)

    def group_keys(self, grouping: str) -> list[str]:
        if grouping == "location":
            return [loc for loc, _ in self.keys]
        missing = sorted({loc for loc, _ in self.keys} - set(self.variety))
        if missing:
            raise KeyError(f"no variety known for locations {missing}; pass --blooms")
        return [self.variety[loc] for loc, _ in self.keys]


def load_predictor(path: str | Path):
    """A hybrid model or a mechanistic calibration, by file content."""
    from .hybrid.io import MODEL_FORMAT, load_model
    from .mechanistic.calibration import MechanisticPredictor, load_calibration

    doc = json.loads(Path(path).read_text())
    if doc.get("format") == MODEL_FORMAT:
        return load_model(path)
    if "model" in doc and "groups" in doc:
        return MechanisticPredictor(load_calibration(path))
    raise ValueError(f"{path} is neither a hybrid model nor a calibration file")


def cmd_predict(run: Run) -> None:
    cfg = run.config
    run.stage = "load-model"
    model = load_predictor(cfg["model_file"])
    run.stage = "ingest"
    temps = read_temps_csv(cfg["temps"])
    variety = {}
    if cfg["blooms"]:
        locations, _, _ = read_blooms_csv(cfg["blooms"])
        variety = {k: v.variety for k, v in locations.items()}
    keys, series = [], []
    for loc in sorted(temps):
        for year in available_seasons(temps[loc]):
            keys.append((loc, year))
            series.append(assemble_season(temps[loc], year).temps)
    if not keys:
        raise ValueError("no complete season found in the temperature file")
    run.stage = "predict"
    pred = np.asarray(model.predict(_Seasons(keys, np.stack(series), variety)), dtype=int)
    run.stage = "write"
    with open(run.path("predictions.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["location_id", "season_start_year", "predicted_day", "predicted_date"])
        for (loc, year), day in zip(keys, pred):
            w.writerow([loc, year, int(day), season_index_to_date(int(day), year).isoformat()])


def cmd_evaluate(run: Run) -> None:
    from .evaluation import SplitSpec, evaluate, make_fitter

    cfg = run.config
    try:
        spec = SplitSpec(cfg["setting"], cfg["train_year_fraction"], cfg["holdout_location_fraction"])
        tc = _train_config(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc).split()[0], str(exc)) from None
    grid = _grid(cfg, cfg["model"]) if cfg["model"] in MODEL_KINDS else None
    fitter = make_fitter(cfg["model"], tc, grid, cfg["floor_utah"])
    data = _load(run)
    run.stage = "evaluate"
    echo = {"model": cfg["model"], "seeds": cfg["seeds"]}
    if cfg["model"] in ("hybrid", "ablation"):
        echo["train"] = tc.to_dict()
    elif grid is not None:
        echo["grid"] = grid.to_dict()
    report = evaluate(fitter, data, spec, seeds=cfg["seeds"], jobs=cfg["jobs"], config=echo)
    run.stage = "write"
    run.path("report.json").write_text(report.to_json())
    print(f"{report.model} {report.setting.value}: MAE {report.mean_mae:.3f} +- {report.se_mae:.3f} "
          f"over {report.n_seeds} seeds")


def cmd_export_response(run: Run) -> None:
    from .evaluation import RESPONSE_HEADER, export_response_density, write_rows_csv
    from .hybrid.io import load_model

    cfg = run.config
    run.stage = "load-model"
    model = load_model(cfg["model_file"])
    data = _load(run)
    run.stage = "export"
    rows = export_response_density(model, data, cfg["temp_bin"], cfg["response_bin"])
    write_rows_csv(rows, RESPONSE_HEADER, run.path("response_density.csv"))


def cmd_export_scatter(run: Run) -> None:
    from .evaluation import SCATTER_HEADER, EvalReport, export_scatter, write_rows_csv

    cfg = run.config
    run.stage = "load-report"
    report = EvalReport.from_dict(json.loads(Path(cfg["report"]).read_text()))
    run.stage = "export"
    write_rows_csv(export_scatter(report, cfg["by_variety"]), SCATTER_HEADER, run.path("scatter.csv"))


COMMANDS = {
    "ingest": cmd_ingest,
    "gen-synthetic": cmd_gen_synthetic,
    "calibrate": cmd_calibrate,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "export-response": cmd_export_response,
    "export-scatter": cmd_export_scatter,
}


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    flags = vars(ns)
    command = flags.pop("command")
    config_path = flags.pop("config", None)
    try:
        cfg = resolve_config(command, flags, config_path)
    except ConfigError as exc:
        print(f"phenohybrid {command}: config error in field {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=cfg["log_level"], format="%(levelname)s %(name)s: %(message)s")

    started = dt.datetime.now(dt.timezone.utc)
    parent = Path(cfg["out"])
    try:
        parent.mkdir(parents=True, exist_ok=True)
        workdir = Path(tempfile.mkdtemp(prefix=f".{command}-", dir=parent))
    except OSError as exc:
        print(f"phenohybrid {command}: cannot create run directory under {parent}: {exc}", file=sys.stderr)
        return 1
    state = Run(command, cfg, workdir)
    try:
        _dump_json(cfg, state.path("config.json"))
        if config_path:
            shutil.copyfile(config_path, state.path("config_input.json"))
        COMMANDS[command](state)
        state.stage = "manifest"
        final = state.finish(parent, started)
    except ConfigError as exc:
        shutil.rmtree(workdir, ignore_errors=True)
        print(f"phenohybrid {command}: config error in field {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        shutil.rmtree(workdir, ignore_errors=True)
        logger.debug("failure", exc_info=True)
        print(f"phenohybrid {command}: {StageError(state.stage, exc)}", file=sys.stderr)
        return 1
    print(final)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

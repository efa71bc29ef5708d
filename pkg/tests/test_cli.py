import csv
import json
from pathlib import Path

import numpy as np
import pytest

from phenohybrid.cli import build_parser, parse_seeds, run
from phenohybrid.domain import load_dataset
from phenohybrid.hybrid import load_model


def _run_dir(capsys, argv):
    code = run(argv)
    out, err = capsys.readouterr()
    assert code == 0, err
    return Path(out.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    code = run(["gen-synthetic", "--n-locations", "3", "--n-years", "6", "--n-varieties", "2", "--jitter", "1",
                "--daily-noise-autocorr", "0.8", "--seed", "1", "--out", str(out)])
    assert code == 0
    (d,) = out.iterdir()
    return d


@pytest.fixture
def grid_file(tmp_path):
    path = tmp_path / "grid.json"
    path.write_text(json.dumps({"chill_reqs": [600, 800, 1000], "forcing_reqs": [5000, 6000, 7000],
                                "base_temps": [4, 5, 6]}))
    return path


def _data_args(d):
    return ["--temps", str(d / "temps.csv"), "--blooms", str(d / "blooms.csv")]


def test_gen_synthetic_outputs(synth):
    names = sorted(p.name for p in synth.iterdir())
    assert names == ["blooms.csv", "config.json", "manifest.json", "temps.csv", "truth.json"]
    manifest = json.loads((synth / "manifest.json").read_text())
    listed = {a["path"] for a in manifest["artifacts"]}
    assert listed == set(names) - {"manifest.json"}
    assert len(load_dataset(synth / "temps.csv", synth / "blooms.csv").dataset) == 18


def test_evaluate_ten_seeds(synth, grid_file, tmp_path, capsys):
    d = _run_dir(capsys, ["evaluate", *_data_args(synth), "--model", "utah", "--setting", "temporal",
                          "--seeds", "10", "--grid-file", str(grid_file), "--jobs", "1", "--out", str(tmp_path)])
    report = json.loads((d / "report.json").read_text())
    assert report["n_seeds"] == 10 and len(report["seeds"]) == 10
    assert all(s["mae"] is not None for s in report["seeds"])


def test_rerun_is_byte_identical(synth, grid_file, tmp_path, capsys):
    argv = ["evaluate", *_data_args(synth), "--model", "median", "--setting", "spatiotemporal",
            "--seeds", "0,3,5", "--out", str(tmp_path)]
    a = _run_dir(capsys, argv + ["--jobs", "1"])
    b = _run_dir(capsys, argv + ["--jobs", "2"])
    assert a != b
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()


def test_calibrate_then_predict(synth, grid_file, tmp_path, capsys):
    d = _run_dir(capsys, ["calibrate", *_data_args(synth), "--grid-file", str(grid_file), "--out", str(tmp_path)])
    params = d / "params_utah_location.json"
    assert params.exists()
    p = _run_dir(capsys, ["predict", "--model-file", str(params), "--temps", str(synth / "temps.csv"),
                          "--out", str(tmp_path)])
    with open(p / "predictions.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 18
    assert set(rows[0]) == {"location_id", "season_start_year", "predicted_day", "predicted_date"}


def test_train_predict_round_trip(synth, tmp_path, capsys):
    d = _run_dir(capsys, ["train", *_data_args(synth), "--epochs", "3", "--grouping", "variety",
                          "--out", str(tmp_path)])
    model = load_model(d / "model.json")
    trace = (d / "loss_trace.csv").read_text().splitlines()
    assert trace[0] == "epoch,mean_nll,lr" and len(trace) == 4
    # variety grouping needs the location table from the bloom file
    assert run(["predict", "--model-file", str(d / "model.json"), "--temps", str(synth / "temps.csv"),
                "--out", str(tmp_path)]) == 1
    assert "stage 'predict'" in capsys.readouterr().err
    p = _run_dir(capsys, ["predict", "--model-file", str(d / "model.json"), *_data_args(synth),
                          "--out", str(tmp_path)])
    with open(p / "predictions.csv") as fh:
        got = {(r["location_id"], int(r["season_start_year"])): int(r["predicted_day"]) for r in csv.DictReader(fh)}
    data = load_dataset(synth / "temps.csv", synth / "blooms.csv").dataset
    expected = model.predict(data)
    for rec, day in zip(data.records, expected):
        assert got[(rec.location_id, rec.season_start_year)] == day


def test_exports(synth, tmp_path, capsys):
    t = _run_dir(capsys, ["train", *_data_args(synth), "--epochs", "1", "--ablation", "--out", str(tmp_path)])
    r = _run_dir(capsys, ["export-response", "--model-file", str(t / "model.json"), *_data_args(synth),
                          "--out", str(tmp_path)])
    with open(r / "response_density.csv") as fh:
        rows = list(csv.DictReader(fh))
    sums = {}
    for row in rows:
        sums[row["mean_temp_bin"]] = sums.get(row["mean_temp_bin"], 0.0) + float(row["density"])
    assert all(abs(v - 1) < 1e-9 for v in sums.values())
    e = _run_dir(capsys, ["evaluate", *_data_args(synth), "--model", "median", "--seeds", "2", "--out", str(tmp_path)])
    s = _run_dir(capsys, ["export-scatter", "--report", str(e / "report.json"), "--by-variety",
                          "--out", str(tmp_path)])
    lines = (s / "scatter.csv").read_text().splitlines()
    report = json.loads((e / "report.json").read_text())
    assert len(lines) - 1 == sum(x["n_test"] for x in report["seeds"])


def test_ingest(synth, tmp_path, capsys):
    d = _run_dir(capsys, ["ingest", *_data_args(synth), "--out", str(tmp_path)])
    assert json.loads((d / "summary.json").read_text())["n_samples"] == 18
    assert (d / "temps.csv").read_bytes() == (synth / "temps.csv").read_bytes()


def test_unknown_flag_exits_2(capsys):
    assert run(["evaluate", "--bogus"]) == 2
    assert "usage" in capsys.readouterr().err


def test_config_file_and_flag_precedence(synth, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 2, "grouping": "variety", "seed": 3, **{
        "temps": str(synth / "temps.csv"), "blooms": str(synth / "blooms.csv")}}))
    d = _run_dir(capsys, ["train", "--config", str(cfg), "--epochs", "1", "--out", str(tmp_path)])
    echo = json.loads((d / "config.json").read_text())
    assert echo["epochs"] == 1 and echo["grouping"] == "variety" and echo["seed"] == 3
    assert (d / "config_input.json").read_bytes() == cfg.read_bytes()


@pytest.mark.parametrize("doc, field", [({"epochs": "many"}, "epochs"), ({"nope": 1}, "nope"),
                                        ({"grouping": "planet"}, "grouping"), ({"lr": -1}, "lr")])
def test_config_errors_name_the_field(synth, tmp_path, capsys, doc, field):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps(doc))
    assert run(["train", "--config", str(cfg), *_data_args(synth), "--out", str(tmp_path)]) == 2
    assert field in capsys.readouterr().err
    assert not any(p.name.startswith("train-") for p in tmp_path.iterdir())


def test_missing_input_is_config_error(tmp_path, capsys):
    assert run(["calibrate", "--temps", str(tmp_path / "none.csv"), "--blooms", "x", "--out", str(tmp_path)]) == 2
    assert "temps" in capsys.readouterr().err


def test_runtime_failure_names_stage(tmp_path, capsys):
    bad = tmp_path / "t.csv"
    bad.write_text("nope\n")
    blooms = tmp_path / "b.csv"
    blooms.write_text("location_id,latitude,longitude,variety,bloom_date\n")
    assert run(["calibrate", "--temps", str(bad), "--blooms", str(blooms), "--out", str(tmp_path / "o")]) == 1
    assert "stage 'ingest'" in capsys.readouterr().err
    assert list((tmp_path / "o").iterdir()) == []


def test_parse_seeds():
    assert parse_seeds("3") == [0, 1, 2]
    assert parse_seeds("4,7") == [4, 7]
    assert parse_seeds([1, 2]) == [1, 2]
    with pytest.raises(ValueError):
        parse_seeds("1,1")


def test_help_lists_subcommands():
    text = build_parser().format_help()
    for cmd in ("ingest", "gen-synthetic", "calibrate", "train", "predict", "evaluate", "export-response",
                "export-scatter"):
        assert cmd in text

"""JSON model files and loss-trace CSVs.

A model file is a JSON object::

    {"format": "phenohybrid-model/1",
     "chill": {"kind": "mlp", "input_shift": 0.0, "input_scale": 1.0,
               "layers": [{"shape": [24, 64], "weights": [... row-major ...],
                           "bias": [...]}, ...]},
     "chill_slope": 50.0,
     "grouping": "location",
     "groups": {"<key>": {"chill_inflection": ..., "forcing_inflection": ...,
                          "base_temp": ..., "forcing_scale": ...}},
     "seed": 0, "config_hash": "<sha256 of the training config>"}

Floats are written with ``repr`` precision, so a save/load round trip is exact.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable

from .training import HybridModel

MODEL_FORMAT = "phenohybrid-model/1"


def model_to_json(model: HybridModel) -> str:
    return json.dumps(model.to_dict(), indent=1, sort_keys=True) + "\n"


def save_model(model: HybridModel, path: str | Path) -> None:
    Path(path).write_text(model_to_json(model))


def load_model(path: str | Path) -> HybridModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"{path}: not a {MODEL_FORMAT} model file (format={doc.get('format')!r})")
    return HybridModel.from_dict(doc)


def write_loss_trace(trace: Iterable[tuple[int, float, float]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_nll", "lr"])
        for epoch, loss, lr in trace:
            w.writerow([epoch, repr(float(loss)), repr(float(lr))])


def read_loss_trace(path: str | Path) -> list[tuple[int, float, float]]:
    with open(path, newline="") as fh:
        return [(int(r["epoch"]), float(r["mean_nll"]), float(r["lr"])) for r in csv.DictReader(fh)]

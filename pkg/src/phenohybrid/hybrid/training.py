"""Full-batch Adam training of the hybrid model and its Utah ablation."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping

import numpy as np

from ..autodiff import AdamHyper, AdamState, Tape, adam_step, stable_logistic
from ..domain import HOURS, Dataset
from ..mechanistic.models import cumulative_chill, gdh_forcing
from .model import (
    PHI_NAMES,
    BloomDistribution,
    ChillResponse,
    HybridParams,
    MlpChill,
    ScaledUtahChill,
    build_forward,
    chill_from_dict,
    distribution_from_graph,
    nll_from_graph,
    predict_bloom_soft,
)

logger = logging.getLogger(__name__)

PREDICT_CHUNK = 256


class TrainingDiverged(FloatingPointError):
    """The training loss became non-finite."""

    def __init__(self, epoch: int, snapshot: dict):
        super().__init__(f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch
        self.snapshot = snapshot


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20000
    lr: float = 1e-3
    weight_decay: float = 1e-4
    decay_factor: float = 0.9
    decay_every: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    decoupled_weight_decay: bool = False
    # weight decay on the threshold parameters as well as the MLP weights
    decay_phi: bool = False
    chill_slope: float = 50.0
    forcing_scale_init: float = 1.0
    forcing_scale_floor: float = 0.01
    base_temp_init: float = 5.0
    # "data": thresholds start at medians of the initial model's traces;
    # "fixed": chill_inflection_init / forcing_inflection_init are used as is.
    init: str = "data"
    chill_inflection_init: float = 0.25
    forcing_inflection_init: float = 10.0
    chill_completion_fraction: float = 0.5
    hidden: tuple[int, ...] = (64, 64)
    normalize_inputs: bool = False
    nll_eps: float = 1e-12
    # skip days after the observed bloom during training (loss is unchanged)
    truncate_after_bloom: bool = True
    floor_utah: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        for name in ("lr", "decay_factor", "decay_every", "forcing_scale_init", "forcing_scale_floor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.init not in ("data", "fixed"):
            raise ValueError(f"init must be 'data' or 'fixed', got {self.init!r}")

    def lr_at(self, epoch: int) -> float:
        """Step decay: multiply by ``decay_factor`` every ``decay_every`` epochs."""
        return self.lr * self.decay_factor ** (epoch // self.decay_every)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class HybridModel:
    """A shared chill response with per-group threshold parameters."""

    chill: ChillResponse
    groups: tuple[str, ...]
    phi: dict[str, np.ndarray]
    grouping: str
    chill_slope: float = 50.0
    seed: int | None = None
    config_hash: str | None = None

    def params_for(self, key: str) -> HybridParams:
        g = self.groups.index(key)
        return HybridParams(self.chill, **{n: float(self.phi[n][g]) for n in PHI_NAMES},
                            chill_slope=self.chill_slope)

    def params_map(self) -> dict[str, HybridParams]:
        return {k: self.params_for(k) for k in self.groups}

    def group_index(self, keys) -> np.ndarray:
        lookup = {k: i for i, k in enumerate(self.groups)}
        missing = sorted(set(keys) - set(lookup))
        if missing:
            raise KeyError(f"no fitted parameters for groups {missing}")
        return np.array([lookup[k] for k in keys], dtype=int)

    def distribution(self, temps: np.ndarray, group_idx: np.ndarray) -> BloomDistribution:
        parts = []
        for start in range(0, temps.shape[0], PREDICT_CHUNK):
            sl = slice(start, start + PREDICT_CHUNK)
            tape = Tape()
            theta = {k: tape.const(v) for k, v in self.chill.param_arrays().items()}
            phi = {k: tape.const(v) for k, v in self.phi.items()}
            graph = build_forward(tape, temps[sl], self.chill, theta, phi, group_idx[sl], self.chill_slope)
            parts.append(distribution_from_graph(graph))
        return BloomDistribution(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                                   ("prob", "chill_cum", "chill_gate", "forcing_cum", "cdf", "cdf_start")))

    def predict(self, data: Dataset) -> np.ndarray:
        if len(data) == 0:
            return np.zeros(0, dtype=int)
        idx = self.group_index(data.group_keys(self.grouping))
        return predict_bloom_soft(self.distribution(data.temps, idx))

    def chill_response(self, rows: np.ndarray) -> np.ndarray:
        return self.chill.evaluate(rows)

    def to_dict(self) -> dict:
        return {
            "format": "phenohybrid-model/1",
            "chill": self.chill.to_dict(),
            "chill_slope": self.chill_slope,
            "grouping": self.grouping,
            "groups": {k: {n: float(self.phi[n][g]) for n in PHI_NAMES} for g, k in enumerate(self.groups)},
            "seed": self.seed,
            "config_hash": self.config_hash,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "HybridModel":
        groups = tuple(doc["groups"])
        phi = {n: np.array([doc["groups"][k][n] for k in groups], dtype=float) for n in PHI_NAMES}
        return cls(chill_from_dict(doc["chill"]), groups, phi, doc["grouping"],
                   doc.get("chill_slope", 50.0), doc.get("seed"), doc.get("config_hash"))


@dataclass
class TrainResult:
    model: HybridModel
    loss_trace: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def params(self) -> dict[str, HybridParams]:
        return self.model.params_map()


def initial_phi(chill: ChillResponse, temps: np.ndarray, observed: np.ndarray, group_idx: np.ndarray,
                n_groups: int, config: TrainConfig) -> dict[str, np.ndarray]:
    """Starting threshold parameters for every group.

    In "data" mode the chill inflection is set to the median normalized chill
    reached ``chill_completion_fraction`` of the way to the observed bloom, and
    the forcing inflection to the median normalized forcing reached on the
    observed bloom day, both under the initial chill response.
    """
    n, s, _ = temps.shape
    base = np.full(n_groups, config.base_temp_init)
    scale = np.full(n_groups, config.forcing_scale_init)
    if config.init == "fixed":
        return {
            "chill_inflection": np.full(n_groups, config.chill_inflection_init),
            "forcing_inflection": np.full(n_groups, config.forcing_inflection_init),
            "base_temp": base,
            "forcing_scale": scale,
        }
    daily = chill.evaluate(temps.reshape(-1, HOURS)).reshape(n, s)
    chill_norm = cumulative_chill(daily, floor=chill.floor_cumulative) / s
    beta_c = np.empty(n_groups)
    for g in range(n_groups):
        idx = np.flatnonzero(group_idx == g)
        t_c = max(1, int(round(config.chill_completion_fraction * np.median(observed[idx]))))
        beta_c[g] = np.clip(np.median(chill_norm[idx, t_c - 1]), 0.01, 0.99)
    gate = stable_logistic(config.chill_slope * (chill_norm - beta_c[group_idx][:, None]))
    force = gdh_forcing(temps, base[group_idx][:, None])
    forcing_norm = np.cumsum(force * gate, axis=1) / s
    at_bloom = forcing_norm[np.arange(n), observed - 1]
    beta_f = np.array([max(np.median(at_bloom[group_idx == g]), 1e-3) for g in range(n_groups)])
    return {"chill_inflection": beta_c, "forcing_inflection": beta_f, "base_temp": base, "forcing_scale": scale}


def _projections(config: TrainConfig):
    floor = config.forcing_scale_floor
    return {
        "phi.forcing_scale": lambda x: np.maximum(x, floor),
        "phi.chill_inflection": lambda x: np.clip(x, 1e-6, 1.0 - 1e-6),
        "phi.forcing_inflection": lambda x: np.maximum(x, 1e-6),
    }


def train(train_data: Dataset, init_seed: int, config: TrainConfig | None = None,
          grouping: str = "location", chill: ChillResponse | None = None) -> TrainResult:
    """Fit the hybrid model by full-batch Adam on the mean bloom-day NLL.

    The chill response (an MLP unless ``chill`` is given) is shared by all
    groups; each group of ``grouping`` gets its own chill and forcing
    inflections, base temperature and forcing scale. Raises
    :class:`TrainingDiverged` if the loss turns non-finite.
    """
    config = config or TrainConfig()
    if len(train_data) == 0:
        raise ValueError("training set is empty")
    keys = train_data.group_keys(grouping)
    groups = tuple(sorted(set(keys)))
    lookup = {k: i for i, k in enumerate(groups)}
    group_idx = np.array([lookup[k] for k in keys], dtype=int)
    temps = np.asarray(train_data.temps)
    observed = train_data.bloom_days
    if chill is None:
        shift, scale = (float(temps.mean()), float(temps.std())) if config.normalize_inputs else (0.0, 1.0)
        chill = MlpChill.init(init_seed, config.hidden, shift, scale)

    phi0 = initial_phi(chill, temps, observed, group_idx, len(groups), config)
    params = {f"theta.{k}": v for k, v in chill.param_arrays().items()}
    params.update({f"phi.{k}": v for k, v in phi0.items()})
    decay = {name: name.startswith("theta.") or config.decay_phi for name in params}
    projections = _projections(config)
    horizon = observed if config.truncate_after_bloom else None
    state = AdamState()
    trace = []

    for epoch in range(config.epochs):
        tape = Tape()
        leaves = {name: tape.leaf(value) for name, value in params.items()}
        theta = {k[6:]: v for k, v in leaves.items() if k.startswith("theta.")}
        phi = {k[4:]: v for k, v in leaves.items() if k.startswith("phi.")}
        graph = build_forward(tape, temps, chill, theta, phi, group_idx, config.chill_slope, horizon)
        loss = nll_from_graph(graph, observed, config.nll_eps)
        value = float(loss.value)
        if not np.isfinite(value):
            raise TrainingDiverged(epoch, {k: v.copy() for k, v in params.items()})
        grads = tape.backward(loss)
        lr = config.lr_at(epoch)
        trace.append((epoch, value, lr))
        hyper = AdamHyper(lr, config.beta1, config.beta2, config.adam_eps,
                          config.weight_decay, config.decoupled_weight_decay)
        params, state = adam_step(params, {k: grads[v] for k, v in leaves.items()}, state, hyper,
                                  decay, projections)
        if epoch % 500 == 0:
            logger.debug("epoch %d loss %.5f lr %.2e", epoch, value, lr)

    chill = chill.with_params({k[6:]: v for k, v in params.items() if k.startswith("theta.")})
    phi = {k[4:]: np.asarray(v, dtype=float) for k, v in params.items() if k.startswith("phi.")}
    model = HybridModel(chill, groups, phi, grouping, config.chill_slope, init_seed, config.digest())
    return TrainResult(model, trace)


def train_ablation_utah(train_data: Dataset, init_seed: int, config: TrainConfig | None = None,
                        grouping: str = "location") -> TrainResult:
    """Same as :func:`train` with the MLP swapped for the fixed scaled Utah response."""
    config = config or TrainConfig()
    return train(train_data, init_seed, config, grouping, chill=ScaledUtahChill(config.floor_utah))

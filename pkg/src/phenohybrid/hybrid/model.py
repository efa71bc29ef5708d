"""Piece-wise differentiable dormancy model with a pluggable chill response.

The hard indicators of the two-stage chill/forcing model are replaced by
generalized logistic functions. Chill accumulates from a daily response in
(0, 1); the chill gate is a logistic of the normalized running chill total;
forcing (growing degree hours) accumulates weighted by that gate, and a
logistic of the normalized forcing total is read as the CDF of the bloom day.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tape, Var, stable_logistic
from ..domain import HOURS, SeasonSeries
from ..mechanistic.constants import CHILL_HOURS_LOWER, CHILL_HOURS_UPPER, UTAH_MAX_WEIGHT
from ..mechanistic.models import cumulative_chill, utah_chill

DEFAULT_CHILL_SLOPE = 50.0
DEFAULT_NLL_EPS = 1e-12
PHI_NAMES = ("chill_inflection", "forcing_inflection", "base_temp", "forcing_scale")

# Assert the distribution invariants on every forward pass (enabled by tests).
CHECK_INVARIANTS = os.environ.get("PHENOHYBRID_CHECK_INVARIANTS", "") not in ("", "0")


def soft_threshold(x, alpha, beta, gamma=1.0):
    """Generalized logistic ``gamma / (1 + exp(-alpha * (x - beta)))``."""
    return gamma * stable_logistic(alpha * (np.asarray(x, dtype=float) - beta))


# ---------------------------------------------------------------------------
# chill responses
# ---------------------------------------------------------------------------


class ChillResponse:
    """Maps rows of 24 hourly temperatures to a daily chill contribution.

    Subclasses with learnable weights expose them through ``param_arrays``
    and build their graph in ``build``; fixed responses only implement
    ``evaluate``.
    """

    kind = "abstract"
    #: running chill total is floored at zero (only meaningful for fixed responses)
    floor_cumulative = False

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {}

    def with_params(self, arrays: Mapping[str, np.ndarray]) -> "ChillResponse":
        return self

    def evaluate(self, rows: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def build(self, tape: Tape, rows: np.ndarray, theta: Mapping[str, Var]) -> Var:
        return tape.const(self.evaluate(rows))

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class MlpChill(ChillResponse):
    """24 -> 64 -> 64 -> 1 perceptron, ReLU hidden layers, logistic output.

    ``layers`` holds ``(W, b)`` pairs with ``W`` of shape ``(fan_in,
    fan_out)``. Inputs are ``(x - input_shift) / input_scale``; the defaults
    feed raw degrees Celsius.
    """

    layers: tuple[tuple[np.ndarray, np.ndarray], ...]
    input_shift: float = 0.0
    input_scale: float = 1.0
    kind = "mlp"

    @classmethod
    def init(cls, seed, hidden=(64, 64), input_shift=0.0, input_scale=1.0) -> "MlpChill":
        """Uniform(+-sqrt(1/fan_in)) weights and zero biases."""
        rng = np.random.default_rng(seed)
        sizes = (HOURS, *hidden, 1)
        layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(1.0 / fan_in)
            layers.append((rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)))
        return cls(tuple(layers), input_shift, input_scale)

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.layers[0][0].shape[0], *(w.shape[1] for w, _ in self.layers))

    def param_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(self.layers):
            out[f"W{i}"] = w
            out[f"b{i}"] = b
        return out

    def with_params(self, arrays):
        layers = tuple((np.asarray(arrays[f"W{i}"]), np.asarray(arrays[f"b{i}"])) for i in range(len(self.layers)))
        return MlpChill(layers, self.input_shift, self.input_scale)

    def _inputs(self, rows):
        x = np.asarray(rows, dtype=float)
        if self.input_shift or self.input_scale != 1.0:
            x = (x - self.input_shift) / self.input_scale
        return x

    def evaluate(self, rows):
        h = self._inputs(rows)
        for i, (w, b) in enumerate(self.layers):
            h = h @ w + b
            if i < len(self.layers) - 1:
                h = np.maximum(h, 0.0)
        return stable_logistic(h[..., 0])

    def build(self, tape, rows, theta):
        h = tape.const(self._inputs(rows))
        n_layers = len(self.layers)
        for i in range(n_layers):
            h = ad.matmul(h, theta[f"W{i}"]) + theta[f"b{i}"]
            if i < n_layers - 1:
                h = ad.relu(h)
        return ad.logistic(ad.reshape(h, (-1,)))

    def to_dict(self):
        return {
            "kind": self.kind,
            "input_shift": self.input_shift,
            "input_scale": self.input_scale,
            "layers": [
                {"shape": list(w.shape), "weights": w.ravel().tolist(), "bias": b.tolist()}
                for w, b in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, doc):
        layers = tuple(
            (np.asarray(l["weights"], dtype=float).reshape(l["shape"]), np.asarray(l["bias"], dtype=float))
            for l in doc["layers"]
        )
        return cls(layers, doc.get("input_shift", 0.0), doc.get("input_scale", 1.0))


@dataclass(frozen=True)
class ScaledUtahChill(ChillResponse):
    """Fixed Utah response divided by ``24 * max weight`` (range [-1, 1])."""

    floor_cumulative: bool = True
    kind = "utah"

    def evaluate(self, rows):
        return utah_chill(rows) / (HOURS * UTAH_MAX_WEIGHT)

    def to_dict(self):
        return {"kind": self.kind, "floor_cumulative": self.floor_cumulative}


@dataclass(frozen=True)
class ChillHoursSurrogate(ChillResponse):
    """Smooth stand-in for the fraction of hours inside the Chill Hours band."""

    steepness: float = 50.0
    lower: float = CHILL_HOURS_LOWER
    upper: float = CHILL_HOURS_UPPER
    kind = "chill-hours-surrogate"

    def evaluate(self, rows):
        x = np.asarray(rows, dtype=float)
        inside = stable_logistic(self.steepness * (x - self.lower)) * stable_logistic(self.steepness * (self.upper - x))
        return inside.mean(axis=-1)

    def to_dict(self):
        return {"kind": self.kind, "steepness": self.steepness, "lower": self.lower, "upper": self.upper}


@dataclass(frozen=True)
class ConstantChill(ChillResponse):
    value: float = 0.5
    kind = "constant"

    def evaluate(self, rows):
        return np.full(np.shape(rows)[:-1], float(self.value))

    def to_dict(self):
        return {"kind": self.kind, "value": self.value}


def chill_from_dict(doc: Mapping) -> ChillResponse:
    kind = doc["kind"]
    if kind == "mlp":
        return MlpChill.from_dict(doc)
    if kind == "utah":
        return ScaledUtahChill(doc.get("floor_cumulative", True))
    if kind == "chill-hours-surrogate":
        return ChillHoursSurrogate(doc["steepness"], doc["lower"], doc["upper"])
    if kind == "constant":
        return ConstantChill(doc["value"])
    raise ValueError(f"unknown chill response kind {kind!r}")


# ---------------------------------------------------------------------------
# parameters and outputs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HybridParams:
    """Chill response plus the threshold parameters of one group.

    ``chill_inflection`` lives on the normalized chill axis (total / S) and
    must lie in (0, 1); ``forcing_inflection`` on the normalized forcing axis.
    The forcing gate has slope ``1 / forcing_scale``.
    """

    chill: ChillResponse
    chill_inflection: float
    forcing_inflection: float
    base_temp: float
    forcing_scale: float = 1.0
    chill_slope: float = DEFAULT_CHILL_SLOPE

    def __post_init__(self):
        if not 0.0 < self.chill_inflection < 1.0:
            raise ValueError(f"chill_inflection must lie in (0, 1), got {self.chill_inflection}")
        if not self.forcing_scale > 0.0:
            raise ValueError(f"forcing_scale must be positive, got {self.forcing_scale}")
        for name in ("forcing_inflection", "base_temp", "chill_slope"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    @property
    def forcing_slope(self) -> float:
        return 1.0 / self.forcing_scale

    def phi(self) -> dict[str, float]:
        return {name: float(getattr(self, name)) for name in PHI_NAMES}


@dataclass(frozen=True)
class BloomDistribution:
    """Per-day bloom probabilities and the traces that produced them.

    Arrays have the season on the last axis (``(S,)`` or ``(N, S)``).
    ``prob[..., t-1]`` is ``cdf_t - cdf_{t-1}`` with ``cdf_0 = cdf_start``.
    """

    prob: np.ndarray
    chill_cum: np.ndarray
    chill_gate: np.ndarray
    forcing_cum: np.ndarray
    cdf: np.ndarray
    cdf_start: np.ndarray

    @property
    def no_bloom_mass(self) -> np.ndarray:
        return 1.0 - self.cdf[..., -1]


@dataclass
class Graph:
    chill_daily: Var
    chill_cum: Var
    chill_gate: Var
    forcing_cum: Var
    cdf: Var
    cdf_start: Var
    season_length: int


def build_forward(
    tape: Tape,
    temps: np.ndarray,
    chill: ChillResponse,
    theta: Mapping[str, Var],
    phi: Mapping[str, Var],
    group_idx: np.ndarray,
    chill_slope: float = DEFAULT_CHILL_SLOPE,
    horizon: np.ndarray | None = None,
) -> Graph:
    """Record the forward pass for a batch of seasons on ``tape``.

    ``temps`` is ``(N, S, 24)``; ``phi`` maps each name in ``PHI_NAMES`` to a
    ``(G,)`` vector and ``group_idx`` picks the group of every season.
    With ``horizon`` (1-based last day needed per season) the days after it
    are skipped; totals up to the horizon are unchanged.
    """
    temps = np.asarray(temps, dtype=float)
    n, s, _ = temps.shape
    group_idx = np.asarray(group_idx)
    if horizon is None:
        flat_index = np.arange(n * s)
    else:
        flat_index = np.flatnonzero(np.arange(s)[None, :] < np.asarray(horizon)[:, None])
    rows = temps.reshape(n * s, HOURS)[flat_index]
    row_sample = flat_index // s

    daily = chill.build(tape, rows, theta)
    if daily.kind == "const":
        mat = np.zeros(n * s)
        mat[flat_index] = daily.value
        chill_daily = tape.const(mat.reshape(n, s))
        chill_cum = tape.const(cumulative_chill(chill_daily.value, floor=chill.floor_cumulative))
    else:
        chill_daily = ad.scatter(daily, flat_index, (n, s))
        chill_cum = ad.cumsum(chill_daily, axis=1)

    def per_sample(name):
        return ad.reshape(ad.take(phi[name], group_idx), (n, 1))

    chill_gate = ad.logistic(chill_slope * (chill_cum * (1.0 / s) - per_sample("chill_inflection")))

    base_rows = ad.reshape(ad.take(phi["base_temp"], group_idx[row_sample]), (-1, 1))
    excess = ad.relu(tape.const(rows) - base_rows)
    force_rows = ad.sum(excess, axis=1)
    force_daily = ad.scatter(force_rows, flat_index, (n, s))
    forcing_cum = ad.cumsum(force_daily * chill_gate, axis=1)

    slope = ad.reciprocal(per_sample("forcing_scale"))
    beta_f = per_sample("forcing_inflection")
    cdf = ad.logistic((forcing_cum * (1.0 / s) - beta_f) * slope)
    cdf_start = ad.logistic(ad.neg(beta_f) * slope)
    return Graph(chill_daily, chill_cum, chill_gate, forcing_cum, cdf, cdf_start, s)


def nll_from_graph(graph: Graph, observed_day: np.ndarray, eps: float = DEFAULT_NLL_EPS) -> Var:
    """Mean of ``-log(max(p_y, eps))`` over the batch."""
    observed_day = np.asarray(observed_day)
    n = observed_day.shape[0]
    s = graph.season_length
    full = ad.concat([graph.cdf_start, graph.cdf], axis=1)
    base = np.arange(n) * (s + 1)
    p = ad.take(full, base + observed_day) - ad.take(full, base + observed_day - 1)
    return ad.mean(ad.neg(ad.log(ad.maximum(p, eps))))


def _phi_vectors(tape: Tape, params: HybridParams) -> dict[str, Var]:
    return {name: tape.const(np.array([getattr(params, name)], dtype=float)) for name in PHI_NAMES}


def distribution_from_graph(graph: Graph) -> BloomDistribution:
    cdf = graph.cdf.value
    start = graph.cdf_start.value
    prob = np.diff(np.concatenate([start, cdf], axis=1), axis=1)
    dist = BloomDistribution(prob, graph.chill_cum.value, graph.chill_gate.value,
                             graph.forcing_cum.value, cdf, start[:, 0])
    if CHECK_INVARIANTS:
        check_distribution(dist)
    return dist


def check_distribution(dist: BloomDistribution) -> None:
    if np.any(np.diff(dist.cdf, axis=-1) < 0) or np.any(dist.cdf < dist.cdf_start[..., None]):
        raise AssertionError("bloom CDF decreased")
    for name in ("prob", "chill_gate", "cdf"):
        arr = getattr(dist, name)
        if np.any(arr < 0) or np.any(arr > 1):
            raise AssertionError(f"{name} outside [0, 1]")
    if np.any(dist.prob.sum(axis=-1) > 1 + 1e-12):
        raise AssertionError("probabilities sum above 1")


def forward(series, params: HybridParams) -> BloomDistribution:
    """Bloom distribution of one season (``SeasonSeries`` or ``(S, 24)`` array)."""
    temps = series.temps if isinstance(series, SeasonSeries) else np.asarray(series, dtype=float)
    single = temps.ndim == 2
    batch = temps[None] if single else temps
    tape = Tape()
    theta = {k: tape.const(v) for k, v in params.chill.param_arrays().items()}
    graph = build_forward(tape, batch, params.chill, theta, _phi_vectors(tape, params),
                          np.zeros(batch.shape[0], dtype=int), params.chill_slope)
    dist = distribution_from_graph(graph)
    if single:
        dist = BloomDistribution(*(np.asarray(getattr(dist, f))[0] for f in
                                   ("prob", "chill_cum", "chill_gate", "forcing_cum", "cdf", "cdf_start")))
    return dist


def nll_loss(dist: BloomDistribution, observed_day: int, eps: float = DEFAULT_NLL_EPS) -> float:
    """Negative log-likelihood of the observed (1-based) bloom day."""
    s = dist.prob.shape[-1]
    if not 1 <= observed_day <= s:
        raise ValueError(f"observed_day {observed_day} outside [1, {s}]")
    return float(-np.log(max(float(dist.prob[..., observed_day - 1]), eps)))


def predict_bloom_soft(dist_or_prob) -> np.ndarray | int:
    """Earliest day (1-based) with maximal bloom probability."""
    prob = dist_or_prob.prob if isinstance(dist_or_prob, BloomDistribution) else np.asarray(dist_or_prob)
    day = np.argmax(prob, axis=-1) + 1
    return int(day) if np.ndim(day) == 0 else day

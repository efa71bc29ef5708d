"""Adam with bias correction, optional weight decay and parameter projections."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np


class OptimizerError(FloatingPointError):
    """Raised when a gradient handed to the optimizer is not finite."""


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    # False: classic Adam, decay enters the gradient as weight_decay * param.
    # True: decoupled (AdamW-style) decay applied to the parameter directly.
    decoupled: bool = False


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    hyper: AdamHyper,
    decay: Mapping[str, bool] | None = None,
    projections: Mapping[str, Callable[[np.ndarray], np.ndarray]] | None = None,
) -> tuple[dict, AdamState]:
    """One Adam update; returns new parameter arrays and a new state.

    ``decay`` selects which parameters receive weight decay (all by default);
    ``projections`` maps parameter names to functions re-projecting the
    updated value onto its feasible set, e.g. a lower bound.
    """
    step = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    bc1 = 1.0 - hyper.beta1**step
    bc2 = 1.0 - hyper.beta2**step
    for name, p in params.items():
        p = np.asarray(p, dtype=float)
        g = np.asarray(grads[name], dtype=float)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for {name!r} at step {step}")
        wd = hyper.weight_decay if (decay is None or decay.get(name, True)) else 0.0
        if wd and not hyper.decoupled:
            g = g + wd * p
        m = hyper.beta1 * state.m.get(name, 0.0) + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * state.v.get(name, 0.0) + (1.0 - hyper.beta2) * g * g
        denom = np.sqrt(v) / np.sqrt(bc2) + hyper.eps
        updated = p - hyper.lr * (m / bc1) / denom
        if wd and hyper.decoupled:
            updated = updated - hyper.lr * wd * p
        if projections and name in projections:
            updated = projections[name](updated)
        new_params[name] = updated
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(step, new_m, new_v)

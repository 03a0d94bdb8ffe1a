"""Adam updates and the two learning-rate schedules (step decay and SGDR)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .errors import DimensionError, InstabilityError, ParameterError, StateError


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update.  Inputs are left untouched."""
    if lr < 0:
        raise ParameterError(f"learning rate must be >= 0, got {lr}")
    for name, p in params.items():
        if name not in grads:
            raise DimensionError(f"missing gradient for {name!r}")
        g = grads[name]
        if np.shape(g) != p.shape:
            raise DimensionError(f"gradient for {name!r} has shape {np.shape(g)}, "
                                 f"parameter has {p.shape}")
        if not np.isfinite(g).all():
            raise InstabilityError(f"non-finite gradient in {name!r}")

    t = state.step_count + 1
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * (g * g) if v is None else b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(new_m, new_v, t, b1, b2, eps)


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------

def step_decay_lr(epoch: int, base_lr: float, factor: float = 0.8, period: int = 25) -> float:
    """``base_lr * factor ** (epoch // period)``."""
    if epoch < 0 or not 0 < factor <= 1 or period < 1:
        raise ParameterError(f"bad step decay arguments epoch={epoch} "
                             f"factor={factor} period={period}")
    return base_lr * factor ** (epoch // period)


@dataclass(frozen=True)
class ScheduleState:
    """Position inside a cosine-annealing cycle.

    ``t_cur`` counts epochs since the last restart and ``t_i`` is the length
    of the current cycle.  A cycle visits ``t_cur = 0 .. t_i`` inclusive.
    """

    eta_max: float
    eta_min: float = 0.0
    t_cur: int = 0
    t_i: int = 250
    t_mult: int = 2
    cycle_index: int = 0


def sgdr_lr(state: ScheduleState) -> float:
    if not 0 <= state.t_cur <= state.t_i:
        raise StateError(f"t_cur={state.t_cur} outside [0, {state.t_i}]")
    cos = math.cos(math.pi * state.t_cur / state.t_i)
    return state.eta_min + 0.5 * (state.eta_max - state.eta_min) * (1.0 + cos)


def sgdr_advance(state: ScheduleState) -> ScheduleState:
    t_cur = state.t_cur + 1
    if t_cur > state.t_i:
        return replace(state, t_cur=0, t_i=state.t_mult * state.t_i,
                       cycle_index=state.cycle_index + 1)
    return replace(state, t_cur=t_cur)


@dataclass(frozen=True)
class StepDecay:
    factor: float = 0.8
    period: int = 25
    kind: str = field(default="step", init=False)

    def to_dict(self) -> dict:
        return {"kind": "step", "factor": self.factor, "period": self.period}


@dataclass(frozen=True)
class SGDR:
    t0: int = 250
    t_mult: int = 2
    eta_min: float = 0.0
    kind: str = field(default="sgdr", init=False)

    def __post_init__(self):
        if self.t0 < 1 or self.t_mult < 1:
            raise ParameterError(f"SGDR needs t0 >= 1 and t_mult >= 1, got {self.t0}, {self.t_mult}")

    def to_dict(self) -> dict:
        return {"kind": "sgdr", "t0": self.t0, "t_mult": self.t_mult, "eta_min": self.eta_min}


Schedule = StepDecay | SGDR


def schedule_from_dict(d: Mapping) -> Schedule:
    d = dict(d)
    kind = d.pop("kind", "sgdr")
    if kind in ("step", "step_decay"):
        return StepDecay(**d)
    if kind == "sgdr":
        return SGDR(**d)
    raise ParameterError(f"unknown schedule kind {kind!r}")


def lr_schedule(schedule: Schedule, base_lr: float, epochs: int) -> list[float]:
    """Learning rate for each of ``epochs`` consecutive epochs."""
    if isinstance(schedule, StepDecay):
        return [step_decay_lr(e, base_lr, schedule.factor, schedule.period)
                for e in range(epochs)]
    state = ScheduleState(eta_max=base_lr, eta_min=schedule.eta_min, t_i=schedule.t0,
                          t_mult=schedule.t_mult)
    out = []
    for _ in range(epochs):
        out.append(sgdr_lr(state))
        state = sgdr_advance(state)
    return out

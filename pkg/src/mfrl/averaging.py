"""Weight-space averaging of training snapshots (tail SWA and EMA)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import ParamVector, ShapeError


@dataclass
class SwaState:
    running_mean: ParamVector | None = None
    count: int = 0

    def average(self) -> ParamVector:
        if self.running_mean is None:
            raise ValueError("no snapshots accumulated")
        return self.running_mean.copy()


@dataclass
class EmaState:
    avg: ParamVector | None = None
    a: float = 0.99

    def __post_init__(self):
        if not 0.0 <= self.a <= 1.0:
            raise ValueError(f"forgetting factor must lie in [0, 1], got {self.a}")


def swa_accumulate(state: SwaState, snapshot: ParamVector) -> SwaState:
    """Fold one end-of-epoch snapshot into the running arithmetic mean."""
    if state.running_mean is None:
        return SwaState(snapshot.copy(), 1)
    if len(snapshot) != len(state.running_mean):
        raise ShapeError(f"snapshot has {len(snapshot)} entries, running mean has {len(state.running_mean)}")
    mean = state.running_mean.values
    new = mean + (snapshot.values - mean) / (state.count + 1)
    return SwaState(ParamVector(new, state.running_mean.shapes), state.count + 1)


def ema_update(state: EmaState, new: ParamVector) -> EmaState:
    """``avg <- a * avg + (1 - a) * new``; the first call seeds the average."""
    if not 0.0 <= state.a <= 1.0:
        raise ValueError(f"forgetting factor must lie in [0, 1], got {state.a}")
    if state.avg is None:
        return EmaState(new.copy(), state.a)
    if len(new) != len(state.avg):
        raise ShapeError(f"snapshot has {len(new)} entries, average has {len(state.avg)}")
    a = state.a
    if a == 0.0:
        vals = new.values.copy()
    elif a == 1.0:
        vals = state.avg.values.copy()
    else:
        vals = a * state.avg.values + (1.0 - a) * new.values
    return EmaState(ParamVector(vals, state.avg.shapes), a)


def average_snapshots(snapshots) -> ParamVector:
    state = SwaState()
    for s in snapshots:
        state = swa_accumulate(state, s)
    return state.average()


def ema_of_snapshots(snapshots, a: float, init: ParamVector | None = None) -> ParamVector:
    state = EmaState(init.copy() if init is not None else None, a)
    for s in snapshots:
        state = ema_update(state, s)
    if state.avg is None:
        raise ValueError("no snapshots given")
    return state.avg

"""Synthetic drive cycles over the (engine_speed, fuel_rate) plane.

Three generators share a common recipe: pick a sequence of target
operating points, then chase them under per-step slew limits so that the
resulting trace is physically plausible at the 20 ms control period.

* ``staircase`` visits every lattice node once, in a seeded random order,
  with equal dwell per node — systematic coverage for identification
  and validation sweeps.
* ``urban`` draws waypoints uniformly over a wide band every 4–12 s,
  emulating stop-and-go load changes.
* ``highway`` holds sustained high speeds with occasional load steps.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .config import GridConfig
from .plant import OperatingPoint

__all__ = ["CycleKind", "DriveCycle", "make_cycle", "make_highway",
           "make_staircase", "make_urban"]

MIN_CYCLE_DURATION = 60.0

_RATE_SLACK = 1.0e-9


class CycleKind(Enum):
    STAIRCASE = "staircase"
    URBAN = "urban"
    HIGHWAY = "highway"


@dataclass(frozen=True)
class DriveCycle:
    """A slew-limited (engine_speed, fuel_rate) trace sampled at ``dt``."""

    name: str
    rhos: np.ndarray
    dt: float = 0.02
    max_speed_rate: float = 400.0
    max_fuel_rate: float = 60.0

    def __post_init__(self):
        rhos = np.array(self.rhos, dtype=float)
        if rhos.ndim != 2 or rhos.shape[1] != 2 or rhos.shape[0] < 2:
            raise ValueError(f"rhos must have shape (n >= 2, 2), got "
                             f"{rhos.shape}")
        if not np.all(np.isfinite(rhos)):
            raise ValueError("rhos contains non-finite entries")
        if np.any(rhos <= 0.0):
            raise ValueError("engine speed and fuel rate must be positive")
        if not self.dt > 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        steps = np.abs(np.diff(rhos, axis=0))
        lim_s = self.max_speed_rate * self.dt + _RATE_SLACK
        lim_f = self.max_fuel_rate * self.dt + _RATE_SLACK
        if np.any(steps[:, 0] > lim_s):
            k = int(np.argmax(steps[:, 0]))
            raise ValueError(f"engine speed slews {steps[k, 0]:.3f} rpm in "
                             f"one step at sample {k}, limit {lim_s:.3f}")
        if np.any(steps[:, 1] > lim_f):
            k = int(np.argmax(steps[:, 1]))
            raise ValueError(f"fuel rate slews {steps[k, 1]:.4f} mm^3 in "
                             f"one step at sample {k}, limit {lim_f:.4f}")
        rhos.flags.writeable = False
        object.__setattr__(self, "rhos", rhos)

    @property
    def n_steps(self) -> int:
        return self.rhos.shape[0]

    @property
    def duration(self) -> float:
        return self.n_steps * self.dt

    def operating_point(self, k: int) -> OperatingPoint:
        s, f = self.rhos[k]
        return OperatingPoint(float(s), float(f))


def _check_duration(duration: float) -> float:
    if not duration >= MIN_CYCLE_DURATION:
        raise ValueError(f"cycle duration must be at least "
                         f"{MIN_CYCLE_DURATION:g} s, got {duration}")
    return float(duration)


def make_staircase(duration: float, seed: int, speed_axis=None,
                   fuel_axis=None, dt: float = 0.02,
                   max_speed_rate: float = 400.0,
                   max_fuel_rate: float = 60.0) -> DriveCycle:
    """Visit every lattice node once in seeded random order, equal dwell."""
    duration = _check_duration(duration)
    grid = GridConfig()
    speed_axis = tuple(grid.speed_axis if speed_axis is None else speed_axis)
    fuel_axis = tuple(grid.fuel_axis if fuel_axis is None else fuel_axis)
    rng = np.random.default_rng(seed)
    nodes = [(s, f) for s in speed_axis for f in fuel_axis]
    order = rng.permutation(len(nodes))
    n = round(duration / dt)
    dwell = duration / len(nodes)
    rhos = np.empty((n, 2))
    s, f = nodes[order[0]]
    for k in range(n):
        idx = min(int(k * dt / dwell), len(nodes) - 1)
        ts, tf = nodes[order[idx]]
        s += np.clip(ts - s, -max_speed_rate * dt, max_speed_rate * dt)
        f += np.clip(tf - f, -max_fuel_rate * dt, max_fuel_rate * dt)
        rhos[k] = (s, f)
    return DriveCycle("staircase", rhos, dt, max_speed_rate, max_fuel_rate)


def make_urban(duration: float, seed: int, dt: float = 0.02,
               speed_band=(1000.0, 2600.0), fuel_band=(15.0, 75.0),
               max_speed_rate: float = 400.0,
               max_fuel_rate: float = 60.0) -> DriveCycle:
    """Stop-and-go waypoints drawn every 4-12 s over a wide band."""
    duration = _check_duration(duration)
    rng = np.random.default_rng(seed)
    n = round(duration / dt)
    rhos = np.empty((n, 2))
    s, f = 1400.0, 30.0
    ts, tf = s, f
    next_wp = 0
    for k in range(n):
        if k >= next_wp:
            ts = rng.uniform(*speed_band)
            tf = rng.uniform(*fuel_band)
            next_wp = k + round(rng.uniform(4.0, 12.0) / dt)
        ds = np.clip(ts - s, -max_speed_rate * dt, max_speed_rate * dt)
        df = np.clip(tf - f, -max_fuel_rate * dt, max_fuel_rate * dt)
        s += ds
        f += df
        rhos[k] = (s, f)
    return DriveCycle("urban", rhos, dt, max_speed_rate, max_fuel_rate)


def make_highway(duration: float, seed: int, dt: float = 0.02,
                 speed_band=(2200.0, 2900.0), fuel_band=(40.0, 90.0),
                 max_speed_rate: float = 400.0,
                 max_fuel_rate: float = 60.0) -> DriveCycle:
    """Sustained high speed with slow drift and occasional load steps."""
    duration = _check_duration(duration)
    rng = np.random.default_rng(seed)
    n = round(duration / dt)
    rhos = np.empty((n, 2))
    s, f = 2400.0, 60.0
    ts, tf = s, f
    next_speed_wp = 0
    next_fuel_wp = 0
    for k in range(n):
        if k >= next_speed_wp:
            ts = rng.uniform(*speed_band)
            next_speed_wp = k + round(rng.uniform(10.0, 20.0) / dt)
        if k >= next_fuel_wp:
            tf = rng.uniform(*fuel_band)
            next_fuel_wp = k + round(rng.uniform(8.0, 20.0) / dt)
        s += np.clip(ts - s, -max_speed_rate * dt, max_speed_rate * dt)
        f += np.clip(tf - f, -max_fuel_rate * dt, max_fuel_rate * dt)
        rhos[k] = (s, f)
    return DriveCycle("highway", rhos, dt, max_speed_rate, max_fuel_rate)


def make_cycle(kind: CycleKind | str, duration: float, seed: int,
               dt: float = 0.02) -> DriveCycle:
    """Dispatch on cycle kind with each generator's default bands."""
    kind = CycleKind(kind)
    if kind is CycleKind.STAIRCASE:
        return make_staircase(duration, seed, dt=dt)
    if kind is CycleKind.URBAN:
        return make_urban(duration, seed, dt=dt)
    return make_highway(duration, seed, dt=dt)

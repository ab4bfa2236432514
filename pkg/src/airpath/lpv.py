"""Gridded linear models scheduled over the operating envelope.

A lattice of discrete-time submodels, each anchored at an operating point
with its equilibrium state/input, is interpolated bilinearly in engine
speed and fuel rate.  The scheduled matrices feed either the absolute
one-step predictor (deviation form around the interpolated equilibrium) or
the rate predictor used by the incremental controller.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .plant import OperatingPoint

LPV_FORMAT_VERSION = 1


class ModelVariant(Enum):
    """Identification recipe tag.

    A: wall temperature pinned at equilibrium during data generation, two
       actuator inputs.  B: slow wall dynamics active, two inputs.  C: slow
       wall dynamics active and the fuel rate appended as a third input.
    """

    A = "A"
    B = "B"
    C = "C"

    @property
    def n_inputs(self) -> int:
        return 3 if self is ModelVariant.C else 2

    @property
    def uses_transient_thermal(self) -> bool:
        return self is not ModelVariant.A


def _checked_array(values, shape, name) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class LinearSubmodel:
    """One identified model with its equilibrium anchor.

    x covers (p_im, egr_rate); u covers (egr_pos, vgt_pos[, fuel_rate]).
    """

    a: np.ndarray
    b: np.ndarray
    x_ss: np.ndarray
    u_ss: np.ndarray
    rho: OperatingPoint

    def __post_init__(self):
        b = np.array(self.b, dtype=float)
        if b.ndim != 2 or b.shape[0] != 2 or b.shape[1] not in (2, 3):
            raise ValueError(f"b must be 2x2 or 2x3, got {b.shape}")
        b.flags.writeable = False
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "a", _checked_array(self.a, (2, 2), "a"))
        object.__setattr__(self, "x_ss", _checked_array(self.x_ss, (2,), "x_ss"))
        object.__setattr__(self, "u_ss",
                           _checked_array(self.u_ss, (b.shape[1],), "u_ss"))
        radius = float(np.max(np.abs(np.linalg.eigvals(self.a))))
        if radius >= 1.0:
            raise ValueError(
                f"submodel dynamics unstable (spectral radius {radius:.6f}) "
                f"at ({self.rho.engine_speed} rpm, {self.rho.fuel_rate} mm^3)")

    @property
    def m(self) -> int:
        return self.b.shape[1]


@dataclass(frozen=True, eq=False)
class ScheduledModel:
    """Matrices and equilibrium interpolated at one scheduling point."""

    a: np.ndarray
    b: np.ndarray
    x_ss: np.ndarray
    u_ss: np.ndarray
    rho: OperatingPoint

    @property
    def m(self) -> int:
        return self.b.shape[1]


class LpvModel:
    """Complete lattice of submodels over (engine_speed, fuel_rate)."""

    def __init__(self, speed_axis, fuel_axis, submodels, variant: ModelVariant,
                 dt: float = 0.02):
        speed_axis = tuple(float(s) for s in speed_axis)
        fuel_axis = tuple(float(f) for f in fuel_axis)
        if len(speed_axis) < 2 or len(fuel_axis) < 2:
            raise ValueError("lattice needs at least 2 values per axis")
        if any(b <= a for a, b in zip(speed_axis, speed_axis[1:])):
            raise ValueError(f"speed axis not strictly increasing: {speed_axis}")
        if any(b <= a for a, b in zip(fuel_axis, fuel_axis[1:])):
            raise ValueError(f"fuel axis not strictly increasing: {fuel_axis}")
        rows = [list(row) for row in submodels]
        if len(rows) != len(speed_axis) or any(len(r) != len(fuel_axis) for r in rows):
            raise ValueError(
                f"expected a {len(speed_axis)}x{len(fuel_axis)} submodel lattice")
        m = rows[0][0].m
        for i, s in enumerate(speed_axis):
            for j, f in enumerate(fuel_axis):
                sm = rows[i][j]
                if sm.m != m:
                    raise ValueError("submodels disagree on input dimension")
                if (sm.rho.engine_speed, sm.rho.fuel_rate) != (s, f):
                    raise ValueError(
                        f"submodel at lattice slot ({s}, {f}) is anchored at "
                        f"({sm.rho.engine_speed}, {sm.rho.fuel_rate})")
        if variant.n_inputs != m:
            raise ValueError(f"variant {variant.value} expects m={variant.n_inputs}, "
                             f"submodels have m={m}")
        self.speed_axis = speed_axis
        self.fuel_axis = fuel_axis
        self.submodels = rows
        self.variant = variant
        self.dt = float(dt)
        # stacked copies for fast interpolation
        self._a = np.array([[sm.a for sm in row] for row in rows])
        self._b = np.array([[sm.b for sm in row] for row in rows])
        self._x_ss = np.array([[sm.x_ss for sm in row] for row in rows])
        self._u_ss = np.array([[sm.u_ss for sm in row] for row in rows])
        for arr in (self._a, self._b, self._x_ss, self._u_ss):
            arr.flags.writeable = False

    @property
    def m(self) -> int:
        return self.submodels[0][0].m

    # ------------------------------------------------------------ schedule

    def schedule(self, rho: OperatingPoint) -> ScheduledModel:
        """Bilinear interpolation over the four surrounding lattice nodes.

        Points outside the lattice are clamped to its boundary.  At a node
        the stored submodel is returned exactly.
        """
        s_ax, f_ax = self.speed_axis, self.fuel_axis
        s = min(max(rho.engine_speed, s_ax[0]), s_ax[-1])
        f = min(max(rho.fuel_rate, f_ax[0]), f_ax[-1])
        if s in s_ax and f in f_ax:
            sm = self.submodels[s_ax.index(s)][f_ax.index(f)]
            return ScheduledModel(a=sm.a, b=sm.b, x_ss=sm.x_ss, u_ss=sm.u_ss,
                                  rho=rho)
        i = min(np.searchsorted(s_ax, s, side="right") - 1, len(s_ax) - 2)
        j = min(np.searchsorted(f_ax, f, side="right") - 1, len(f_ax) - 2)
        i = max(i, 0)
        j = max(j, 0)
        ts = (s - s_ax[i]) / (s_ax[i + 1] - s_ax[i])
        tf = (f - f_ax[j]) / (f_ax[j + 1] - f_ax[j])
        w = ((1.0 - ts) * (1.0 - tf), (1.0 - ts) * tf, ts * (1.0 - tf), ts * tf)

        def mix(grid):
            return (w[0] * grid[i, j] + w[1] * grid[i, j + 1]
                    + w[2] * grid[i + 1, j] + w[3] * grid[i + 1, j + 1])

        return ScheduledModel(a=mix(self._a), b=mix(self._b),
                              x_ss=mix(self._x_ss), u_ss=mix(self._u_ss),
                              rho=rho)

    # ---------------------------------------------------------- persistence

    def save(self, path: str | Path) -> None:
        doc = {
            "format_version": LPV_FORMAT_VERSION,
            "variant": self.variant.value,
            "dt": self.dt,
            "speed_axis": list(self.speed_axis),
            "fuel_axis": list(self.fuel_axis),
            "submodels": [
                [
                    {
                        "a": sm.a.tolist(),
                        "b": sm.b.tolist(),
                        "x_ss": sm.x_ss.tolist(),
                        "u_ss": sm.u_ss.tolist(),
                    }
                    for sm in row
                ]
                for row in self.submodels
            ],
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1)

    @classmethod
    def load(cls, path: str | Path) -> "LpvModel":
        with open(path) as fh:
            doc = json.load(fh)
        version = doc.get("format_version")
        if version != LPV_FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {version!r}, "
                             f"expected {LPV_FORMAT_VERSION}")
        speed_axis = doc["speed_axis"]
        fuel_axis = doc["fuel_axis"]
        submodels = [
            [
                LinearSubmodel(
                    a=entry["a"], b=entry["b"], x_ss=entry["x_ss"],
                    u_ss=entry["u_ss"],
                    rho=OperatingPoint(speed_axis[i], fuel_axis[j]))
                for j, entry in enumerate(row)
            ]
            for i, row in enumerate(doc["submodels"])
        ]
        return cls(speed_axis, fuel_axis, submodels,
                   ModelVariant(doc["variant"]), doc["dt"])

    def dump_lattice_csv(self, path: str | Path) -> None:
        """One row per node with flattened matrices, for inspection."""
        m = self.m
        header = ["engine_speed", "fuel_rate"]
        header += [f"a_{r + 1}{c + 1}" for r in range(2) for c in range(2)]
        header += [f"b_{r + 1}{c + 1}" for r in range(2) for c in range(m)]
        header += ["x_ss_1", "x_ss_2"]
        header += [f"u_ss_{c + 1}" for c in range(m)]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for i, s in enumerate(self.speed_axis):
                for j, f in enumerate(self.fuel_axis):
                    sm = self.submodels[i][j]
                    row = [repr(s), repr(f)]
                    row += [repr(float(v)) for v in sm.a.ravel()]
                    row += [repr(float(v)) for v in sm.b.ravel()]
                    row += [repr(float(v)) for v in sm.x_ss]
                    row += [repr(float(v)) for v in sm.u_ss]
                    writer.writerow(row)


# ------------------------------------------------------------- predictors

def predict_absolute(sm: ScheduledModel | LinearSubmodel, x, u) -> np.ndarray:
    """One-step prediction in absolute coordinates around the anchor."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape != (2,):
        raise ValueError(f"state must have shape (2,), got {x.shape}")
    if u.shape != (sm.b.shape[1],):
        raise ValueError(f"input must have shape ({sm.b.shape[1]},), got {u.shape}")
    return sm.x_ss + sm.a @ (x - sm.x_ss) + sm.b @ (u - sm.u_ss)


def predict_rate(sm: ScheduledModel | LinearSubmodel, dx, du) -> np.ndarray:
    """One-step prediction of state and input increments."""
    dx = np.asarray(dx, dtype=float)
    du = np.asarray(du, dtype=float)
    if dx.shape != (2,):
        raise ValueError(f"state delta must have shape (2,), got {dx.shape}")
    if du.shape != (sm.b.shape[1],):
        raise ValueError(
            f"input delta must have shape ({sm.b.shape[1]},), got {du.shape}")
    return sm.a @ dx + sm.b @ du

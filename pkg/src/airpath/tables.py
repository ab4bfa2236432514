"""Set-point and feedforward look-up tables over the operating lattice.

Both tables live on the same (engine_speed, fuel_rate) lattice as the
scheduled models and interpolate bilinearly with clamping outside the
lattice.  Set-point targets are the plant's steady outputs under the
nominal actuator positions, so every target is reachable by construction;
the feedforward table inverts the plant's equilibrium map around those
targets with a damped Newton iteration.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .config import GridConfig, HarnessConfig, MpcSettings
from .plant import ActuatorInput, AirpathPlant, ConvergenceError, OperatingPoint

__all__ = ["FeedforwardTable", "SetpointTables", "build_ff_table"]

TABLE_FORMAT_VERSION = 1


def _check_axes(speed_axis, fuel_axis) -> tuple[tuple, tuple]:
    s_ax = tuple(float(v) for v in speed_axis)
    f_ax = tuple(float(v) for v in fuel_axis)
    for name, ax in (("speed_axis", s_ax), ("fuel_axis", f_ax)):
        if len(ax) < 2 or any(b <= a for a, b in zip(ax, ax[1:])):
            raise ValueError(f"{name} must be strictly increasing with at "
                             f"least two entries, got {ax}")
    return s_ax, f_ax


def _check_table(values, shape, name) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    arr = arr.copy()
    arr.flags.writeable = False
    return arr


def _bilinear(s_ax, f_ax, tables, engine_speed, fuel_rate):
    """Clamped bilinear lookup; exact at nodes.  Returns one float per table."""
    s = min(max(float(engine_speed), s_ax[0]), s_ax[-1])
    f = min(max(float(fuel_rate), f_ax[0]), f_ax[-1])
    if s in s_ax and f in f_ax:
        i, j = s_ax.index(s), f_ax.index(f)
        return tuple(float(tab[i, j]) for tab in tables)
    i = int(np.clip(np.searchsorted(s_ax, s, side="right") - 1,
                    0, len(s_ax) - 2))
    j = int(np.clip(np.searchsorted(f_ax, f, side="right") - 1,
                    0, len(f_ax) - 2))
    ts = (s - s_ax[i]) / (s_ax[i + 1] - s_ax[i])
    tf = (f - f_ax[j]) / (f_ax[j + 1] - f_ax[j])
    out = []
    for tab in tables:
        out.append(float((1.0 - ts) * ((1.0 - tf) * tab[i, j]
                                       + tf * tab[i, j + 1])
                         + ts * ((1.0 - tf) * tab[i + 1, j]
                                 + tf * tab[i + 1, j + 1])))
    return tuple(out)


class SetpointTables:
    """Lattice of (p_im, chi_egr) tracking targets."""

    def __init__(self, speed_axis, fuel_axis, p_im, chi_egr):
        self.speed_axis, self.fuel_axis = _check_axes(speed_axis, fuel_axis)
        shape = (len(self.speed_axis), len(self.fuel_axis))
        self.p_im = _check_table(p_im, shape, "p_im")
        self.chi_egr = _check_table(chi_egr, shape, "chi_egr")

    @classmethod
    def from_plant(cls, plant: AirpathPlant, grid: GridConfig | None = None,
                   settings: MpcSettings | None = None) -> "SetpointTables":
        """Steady plant outputs under the nominal actuators at every node.

        Every target must sit inside the controller state bounds; a node
        outside them indicates a mis-calibrated nominal table and raises.
        """
        grid = grid if grid is not None else GridConfig()
        settings = settings if settings is not None else MpcSettings()
        x_min = np.asarray(settings.x_min)
        x_max = np.asarray(settings.x_max)
        shape = (len(grid.speed_axis), len(grid.fuel_axis))
        p_im = np.empty(shape)
        chi = np.empty(shape)
        bad = []
        for i, s in enumerate(grid.speed_axis):
            for j, f in enumerate(grid.fuel_axis):
                rho = OperatingPoint(s, f)
                u = ActuatorInput(grid.egr_nom[i][j], grid.vgt_nom[i][j])
                eq = plant.find_equilibrium(rho, u)
                y = plant.output(eq, u, rho)
                p_im[i, j] = y.p_im
                chi[i, j] = y.egr_rate
                target = np.array([y.p_im, y.egr_rate])
                if np.any(target <= x_min) or np.any(target >= x_max):
                    bad.append((s, f))
        if bad:
            nodes = ", ".join(f"({s:g} rpm, {f:g} mm^3)" for s, f in bad)
            raise ValueError(f"set-point targets fall outside the "
                             f"controller state bounds at: {nodes}")
        return cls(grid.speed_axis, grid.fuel_axis, p_im, chi)

    def targets(self, rho: OperatingPoint) -> np.ndarray:
        """Interpolated (p_im, chi_egr) target pair at an operating point."""
        vals = _bilinear(self.speed_axis, self.fuel_axis,
                         (self.p_im, self.chi_egr),
                         rho.engine_speed, rho.fuel_rate)
        return np.array(vals)

    def save(self, path: str | Path) -> None:
        doc = {"format_version": TABLE_FORMAT_VERSION,
               "kind": "setpoints",
               "speed_axis": list(self.speed_axis),
               "fuel_axis": list(self.fuel_axis),
               "p_im": self.p_im.tolist(),
               "chi_egr": self.chi_egr.tolist()}
        Path(path).write_text(json.dumps(doc, indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "SetpointTables":
        doc = json.loads(Path(path).read_text())
        if doc.get("format_version") != TABLE_FORMAT_VERSION:
            raise ValueError(f"unsupported table format version "
                             f"{doc.get('format_version')!r}")
        return cls(doc["speed_axis"], doc["fuel_axis"], doc["p_im"],
                   doc["chi_egr"])


class FeedforwardTable:
    """Lattice of open-loop actuator positions hitting the set-points."""

    def __init__(self, speed_axis, fuel_axis, egr_pos, vgt_pos):
        self.speed_axis, self.fuel_axis = _check_axes(speed_axis, fuel_axis)
        shape = (len(self.speed_axis), len(self.fuel_axis))
        self.egr_pos = _check_table(egr_pos, shape, "egr_pos")
        self.vgt_pos = _check_table(vgt_pos, shape, "vgt_pos")
        for name, tab in (("egr_pos", self.egr_pos),
                          ("vgt_pos", self.vgt_pos)):
            if np.any(tab < 0.0) or np.any(tab > 100.0):
                raise ValueError(f"{name} entries must lie in [0, 100]")

    def query(self, rho: OperatingPoint) -> ActuatorInput:
        """Interpolated feedforward command at an operating point."""
        egr, vgt = _bilinear(self.speed_axis, self.fuel_axis,
                             (self.egr_pos, self.vgt_pos),
                             rho.engine_speed, rho.fuel_rate)
        return ActuatorInput(egr, vgt)

    def save(self, path: str | Path) -> None:
        doc = {"format_version": TABLE_FORMAT_VERSION,
               "kind": "feedforward",
               "speed_axis": list(self.speed_axis),
               "fuel_axis": list(self.fuel_axis),
               "egr_pos": self.egr_pos.tolist(),
               "vgt_pos": self.vgt_pos.tolist()}
        Path(path).write_text(json.dumps(doc, indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "FeedforwardTable":
        doc = json.loads(Path(path).read_text())
        if doc.get("format_version") != TABLE_FORMAT_VERSION:
            raise ValueError(f"unsupported table format version "
                             f"{doc.get('format_version')!r}")
        return cls(doc["speed_axis"], doc["fuel_axis"], doc["egr_pos"],
                   doc["vgt_pos"])


def _steady_outputs(plant, rho, u_vec, guess=None):
    u = ActuatorInput(u_vec[0], u_vec[1])
    eq = plant.find_equilibrium(rho, u, guess=guess)
    y = plant.output(eq, u, rho)
    return np.array([y.p_im, y.egr_rate]), eq


def _invert_node(plant, rho, target, u_start, rel_tol, max_iter=25):
    """Damped Newton on the steady-output map; returns (u, rel_err) or None."""
    scale = np.maximum(np.abs(target), 1.0e-6)
    u = np.clip(np.asarray(u_start, dtype=float), 0.0, 100.0)
    try:
        y, guess = _steady_outputs(plant, rho, u)
    except ConvergenceError:
        return None
    res = (y - target) / scale
    best_u, best_err = u.copy(), float(np.max(np.abs(res)))
    for _ in range(max_iter):
        if best_err <= rel_tol:
            return best_u, best_err
        # forward-difference Jacobian of the relative residual
        jac = np.empty((2, 2))
        h = 0.25
        try:
            for col in range(2):
                u_h = u.copy()
                u_h[col] = min(u_h[col] + h, 100.0)
                dh = u_h[col] - u[col]
                if dh == 0.0:
                    u_h[col] = u[col] - h
                    dh = -h
                y_h, _ = _steady_outputs(plant, rho, u_h, guess)
                jac[:, col] = ((y_h - target) / scale - res) / dh
            delta = np.linalg.solve(jac, -res)
        except (ConvergenceError, np.linalg.LinAlgError):
            return None
        step = 1.0
        improved = False
        for _ in range(6):
            u_try = np.clip(u + step * delta, 0.0, 100.0)
            try:
                y_try, guess_try = _steady_outputs(plant, rho, u_try, guess)
            except ConvergenceError:
                step *= 0.5
                continue
            res_try = (y_try - target) / scale
            err_try = float(np.max(np.abs(res_try)))
            if err_try < best_err:
                u, res, guess = u_try, res_try, guess_try
                best_u, best_err = u_try.copy(), err_try
                improved = True
                break
            step *= 0.5
        if not improved:
            break
    if best_err <= rel_tol:
        return best_u, best_err
    return None


def build_ff_table(plant: AirpathPlant, setpoints: SetpointTables,
                   grid: GridConfig | None = None,
                   harness: HarnessConfig | None = None) -> FeedforwardTable:
    """Invert the plant's equilibrium map at every lattice node.

    Each node's actuator pair, applied open loop, must hold the steady
    outputs within the configured relative band of that node's targets.
    Nodes where the inversion fails are collected and reported together.
    """
    grid = grid if grid is not None else GridConfig()
    harness = harness if harness is not None else HarnessConfig()
    s_ax, f_ax = _check_axes(grid.speed_axis, grid.fuel_axis)
    if (s_ax, f_ax) != (setpoints.speed_axis, setpoints.fuel_axis):
        raise ValueError("set-point tables and grid use different lattices")
    shape = (len(s_ax), len(f_ax))
    egr = np.empty(shape)
    vgt = np.empty(shape)
    failed = []
    for i, s in enumerate(s_ax):
        for j, f in enumerate(f_ax):
            rho = OperatingPoint(s, f)
            target = np.array([setpoints.p_im[i, j],
                               setpoints.chi_egr[i, j]])
            u_start = (grid.egr_nom[i][j], grid.vgt_nom[i][j])
            result = _invert_node(plant, rho, target, u_start,
                                  harness.ff_solve_rel_tol)
            if result is None or result[1] > harness.ff_rel_tol:
                failed.append((s, f))
                egr[i, j], vgt[i, j] = u_start
            else:
                egr[i, j], vgt[i, j] = result[0]
    if failed:
        nodes = ", ".join(f"({s:g} rpm, {f:g} mm^3)" for s, f in failed)
        raise RuntimeError(f"feedforward inversion failed at: {nodes}")
    return FeedforwardTable(s_ax, f_ax, egr, vgt)

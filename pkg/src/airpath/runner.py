"""Closed-loop simulation harness: drive cycles, step tests, reports.

The loop convention matches the identification recorder: the sample
measured at step ``k`` is the plant output under the input and operating
point that were active over the *previous* control period.  Solver
failures inside a run never abort it — the step falls back to a zero
increment, the row is logged with its status, and one summary warning is
emitted at the end.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import HarnessConfig
from .cycles import DriveCycle
from .lpv import LpvModel
from .mpc import MpcConfig, MpcController
from .plant import AirpathPlant, OperatingPoint, ThermalMode
from .qp import QpStatus
from .tables import FeedforwardTable, SetpointTables

__all__ = ["SimLog", "TrackingReport", "VariantStats", "run_cycle",
           "run_step_test", "tracking_report"]

_CSV_COLUMNS = ("t", "engine_speed", "fuel_rate", "r_p_im", "r_chi_egr",
                "p_im", "chi_egr", "u_egr", "u_vgt", "ff_egr", "ff_vgt",
                "du_egr", "du_vgt", "eps_p_im", "eps_chi_egr", "status",
                "kkt_residual", "active_set_size", "solve_time")

FF_STATUS = "ff"


def _pair_array(values, n, name) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.shape != (n, 2):
        raise ValueError(f"{name} must have shape ({n}, 2), got {arr.shape}")
    arr.flags.writeable = False
    return arr


def _scalar_array(values, n, name, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    if arr.shape != (n,):
        raise ValueError(f"{name} must have shape ({n},), got {arr.shape}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class SimLog:
    """Time-aligned record of one closed- or open-loop run."""

    name: str
    dt: float
    t: np.ndarray
    rho: np.ndarray
    r: np.ndarray
    x: np.ndarray
    u: np.ndarray
    u_ff: np.ndarray
    du: np.ndarray
    eps: np.ndarray
    status: tuple[str, ...]
    kkt: np.ndarray
    active_size: np.ndarray
    solve_time: np.ndarray

    def __post_init__(self):
        if not self.dt > 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        t = np.array(self.t, dtype=float)
        if t.ndim != 1 or t.shape[0] < 1:
            raise ValueError(f"t must be a non-empty 1-D array, got shape "
                             f"{t.shape}")
        n = t.shape[0]
        t.flags.writeable = False
        object.__setattr__(self, "t", t)
        for field in ("rho", "r", "x", "u", "u_ff", "du", "eps"):
            object.__setattr__(self, field,
                               _pair_array(getattr(self, field), n, field))
        status = tuple(str(s) for s in self.status)
        if len(status) != n:
            raise ValueError(f"status must have {n} entries, got "
                             f"{len(status)}")
        object.__setattr__(self, "status", status)
        object.__setattr__(self, "kkt",
                           _scalar_array(self.kkt, n, "kkt"))
        object.__setattr__(self, "active_size",
                           _scalar_array(self.active_size, n, "active_size",
                                         dtype=int))
        object.__setattr__(self, "solve_time",
                           _scalar_array(self.solve_time, n, "solve_time"))

    @property
    def n_steps(self) -> int:
        return self.t.shape[0]

    @property
    def duration(self) -> float:
        return self.n_steps * self.dt

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(_CSV_COLUMNS)
            for k in range(self.n_steps):
                row = [self.t[k], self.rho[k, 0], self.rho[k, 1],
                       self.r[k, 0], self.r[k, 1], self.x[k, 0],
                       self.x[k, 1], self.u[k, 0], self.u[k, 1],
                       self.u_ff[k, 0], self.u_ff[k, 1], self.du[k, 0],
                       self.du[k, 1], self.eps[k, 0], self.eps[k, 1]]
                writer.writerow([repr(float(v)) for v in row]
                                + [self.status[k], repr(float(self.kkt[k])),
                                   str(int(self.active_size[k])),
                                   repr(float(self.solve_time[k]))])

    @classmethod
    def from_csv(cls, path: str | Path, name: str | None = None,
                 dt: float | None = None) -> "SimLog":
        path = Path(path)
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            if header != _CSV_COLUMNS:
                raise ValueError(f"unexpected log header {header}")
            rows = list(reader)
        if not rows:
            raise ValueError(f"{path} contains no samples")
        cols = list(zip(*rows))
        vals = {name: np.array([float(v) for v in col])
                for name, col in zip(_CSV_COLUMNS, cols)
                if name != "status"}
        status = tuple(cols[_CSV_COLUMNS.index("status")])
        t = vals["t"]
        if dt is None:
            dt = float(t[1] - t[0]) if t.shape[0] > 1 else 0.02
        return cls(name=name if name is not None else path.stem, dt=dt, t=t,
                   rho=np.column_stack([vals["engine_speed"],
                                        vals["fuel_rate"]]),
                   r=np.column_stack([vals["r_p_im"], vals["r_chi_egr"]]),
                   x=np.column_stack([vals["p_im"], vals["chi_egr"]]),
                   u=np.column_stack([vals["u_egr"], vals["u_vgt"]]),
                   u_ff=np.column_stack([vals["ff_egr"], vals["ff_vgt"]]),
                   du=np.column_stack([vals["du_egr"], vals["du_vgt"]]),
                   eps=np.column_stack([vals["eps_p_im"],
                                        vals["eps_chi_egr"]]),
                   status=status, kkt=vals["kkt_residual"],
                   active_size=vals["active_set_size"].astype(int),
                   solve_time=vals["solve_time"])


def _simulate(plant, controller, rhos, setpoints, ff_table, dt, state,
              u_prev, rho_prev, mode):
    """Advance the loop over ``rhos``; returns logged arrays and final state."""
    n = rhos.shape[0]
    r_log = np.empty((n, 2))
    x_log = np.empty((n, 2))
    u_log = np.empty((n, 2))
    ff_log = np.empty((n, 2))
    du_log = np.zeros((n, 2))
    eps_log = np.zeros((n, 2))
    kkt = np.zeros(n)
    solve_t = np.zeros(n)
    active = np.zeros(n, dtype=int)
    status: list[str] = []
    failures = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for k in range(n):
            y = plant.output(state, u_prev, rho_prev)
            x_k = np.array([y.p_im, y.egr_rate])
            rho_k = OperatingPoint(float(rhos[k, 0]), float(rhos[k, 1]))
            r_k = setpoints.targets(rho_k)
            u_ff = ff_table.query(rho_k)
            if controller is not None:
                u_cmd = controller.step(x_k, r_k, rho_k, u_ff)
                d = controller.last_diagnostics
                du_log[k] = d.du0
                eps_log[k] = d.slack
                kkt[k] = d.kkt_residual
                solve_t[k] = d.solve_time
                active[k] = d.active_set_size
                status.append(d.status.value)
                if d.status is not QpStatus.OPTIMAL:
                    failures += 1
            else:
                u_cmd = u_ff
                status.append(FF_STATUS)
            x_log[k] = x_k
            r_log[k] = r_k
            u_log[k] = (u_cmd.egr_pos, u_cmd.vgt_pos)
            ff_log[k] = (u_ff.egr_pos, u_ff.vgt_pos)
            state = plant.step(state, u_cmd, rho_k, mode, dt)
            u_prev, rho_prev = u_cmd, rho_k
    arrays = dict(r=r_log, x=x_log, u=u_log, u_ff=ff_log, du=du_log,
                  eps=eps_log, kkt=kkt, solve_time=solve_t,
                  active_size=active, status=tuple(status))
    return arrays, state, u_prev, rho_prev, failures


def _warn_failures(failures: int, total: int) -> None:
    if failures:
        warnings.warn(f"{failures} of {total} steps fell back to a zero "
                      f"increment after a solver failure", RuntimeWarning,
                      stacklevel=3)


def run_cycle(plant: AirpathPlant, cycle: DriveCycle,
              setpoints: SetpointTables, ff_table: FeedforwardTable,
              model: LpvModel | None = None,
              mpc_config: MpcConfig | None = None,
              name: str | None = None,
              mode: ThermalMode = ThermalMode.TRANSIENT) -> SimLog:
    """Simulate one drive cycle; ``model=None`` runs feedforward only.

    The loop starts from the plant equilibrium at the cycle's first
    operating point under the feedforward command, so early samples
    reflect tracking quality rather than an arbitrary initial transient.
    """
    rho0 = cycle.operating_point(0)
    u_ff0 = ff_table.query(rho0)
    state = plant.find_equilibrium(rho0, u_ff0, mode=mode)
    controller = (MpcController(model, mpc_config)
                  if model is not None else None)
    arrays, _, _, _, failures = _simulate(
        plant, controller, cycle.rhos, setpoints, ff_table, cycle.dt,
        state, u_ff0, rho0, mode)
    _warn_failures(failures, cycle.n_steps)
    if name is None:
        name = f"{cycle.name}+{'mpc' if model is not None else 'ff'}"
    t = np.arange(cycle.n_steps) * cycle.dt
    return SimLog(name=name, dt=cycle.dt, t=t, rho=cycle.rhos.copy(),
                  **arrays)


def run_step_test(plant: AirpathPlant, rho_from: OperatingPoint,
                  rho_to: OperatingPoint, setpoints: SetpointTables,
                  ff_table: FeedforwardTable, model: LpvModel | None,
                  mpc_config: MpcConfig | None = None,
                  duration: float = 8.0,
                  harness: HarnessConfig | None = None,
                  name: str | None = None, dt: float = 0.02,
                  mode: ThermalMode = ThermalMode.TRANSIENT) -> SimLog:
    """Operating-point step response of the closed loop.

    The loop first settles at ``rho_from`` (unlogged pre-settle window)
    with the controller engaged, then the log starts: from the
    configured step time inside the logged window the operating point
    moves to ``rho_to`` at the harness slew bounds (the fastest
    transition the drive-cycle validator accepts as physical), with
    targets and feedforward following it.  The window must leave room
    for the slew to complete after the step time.
    """
    harness = harness if harness is not None else HarnessConfig()
    slew_time = max(
        abs(rho_to.engine_speed - rho_from.engine_speed)
        / harness.max_speed_rate,
        abs(rho_to.fuel_rate - rho_from.fuel_rate) / harness.max_fuel_rate)
    if not duration > harness.step_at + slew_time:
        raise ValueError(
            f"duration {duration} must exceed the step time "
            f"{harness.step_at} plus the {slew_time:.3g} s slew to the "
            f"target operating point")
    u_ff0 = ff_table.query(rho_from)
    state = plant.find_equilibrium(rho_from, u_ff0, mode=mode)
    controller = (MpcController(model, mpc_config)
                  if model is not None else None)

    n_pre = round(harness.pre_settle / dt)
    pre = np.tile([rho_from.engine_speed, rho_from.fuel_rate], (n_pre, 1))
    _, state, u_prev, rho_prev, fail_pre = _simulate(
        plant, controller, pre, setpoints, ff_table, dt, state, u_ff0,
        rho_from, mode)

    n = round(duration / dt)
    t = np.arange(n) * dt
    rhos = np.empty((n, 2))
    speed, fuel = rho_from.engine_speed, rho_from.fuel_rate
    d_speed = harness.max_speed_rate * dt
    d_fuel = harness.max_fuel_rate * dt
    for k in range(n):
        if t[k] >= harness.step_at:
            speed += min(max(rho_to.engine_speed - speed, -d_speed), d_speed)
            fuel += min(max(rho_to.fuel_rate - fuel, -d_fuel), d_fuel)
        rhos[k] = (speed, fuel)
    arrays, _, _, _, fail_log = _simulate(
        plant, controller, rhos, setpoints, ff_table, dt, state, u_prev,
        rho_prev, mode)
    _warn_failures(fail_pre + fail_log, n_pre + n)
    if name is None:
        name = (f"step_{rho_from.engine_speed:g}_{rho_from.fuel_rate:g}"
                f"_to_{rho_to.engine_speed:g}_{rho_to.fuel_rate:g}")
    return SimLog(name=name, dt=dt, t=t, rho=rhos, **arrays)


@dataclass(frozen=True)
class VariantStats:
    """Absolute-error statistics for one run, optionally vs a reference."""

    mean_abs: tuple[float, float]
    std_abs: tuple[float, float]
    delta_mean_pct: tuple[float, float] | None
    delta_std_pct: tuple[float, float] | None


def _pct_delta(value: float, ref: float) -> float:
    if ref == 0.0:
        return 0.0 if value == 0.0 else float("inf")
    return 100.0 * (value - ref) / ref


@dataclass(frozen=True)
class TrackingReport:
    """Per-channel tracking-error comparison across runs of one window."""

    reference: str
    channels: tuple[str, str]
    stats: dict[str, VariantStats]

    def to_json(self) -> str:
        doc = {"reference": self.reference, "channels": list(self.channels),
               "stats": {}}
        for name, st in self.stats.items():
            doc["stats"][name] = {
                "mean_abs": list(st.mean_abs),
                "std_abs": list(st.std_abs),
                "delta_mean_pct": (None if st.delta_mean_pct is None
                                   else list(st.delta_mean_pct)),
                "delta_std_pct": (None if st.delta_std_pct is None
                                  else list(st.delta_std_pct))}
        return json.dumps(doc, indent=1)

    def __str__(self) -> str:
        head = (f"{'run':<16}"
                + "".join(f"{ch + ' ' + kind:>16}{'delta%':>9}"
                          for ch in self.channels
                          for kind in ("mean", "std")))
        lines = [f"tracking |error| vs reference '{self.reference}'", head]
        for name, st in self.stats.items():
            cells = []
            for c in range(2):
                for kind in ("mean", "std"):
                    val = (st.mean_abs if kind == "mean" else st.std_abs)[c]
                    delta = (st.delta_mean_pct if kind == "mean"
                             else st.delta_std_pct)
                    cells.append(f"{val:>16.6g}")
                    cells.append("      ref" if delta is None
                                 else f"{delta[c]:>+8.1f}%")
            lines.append(f"{name:<16}" + "".join(cells))
        return "\n".join(lines)


def tracking_report(logs: dict[str, SimLog],
                    reference: str) -> TrackingReport:
    """Compare mean/std of |output - target| across runs of one window."""
    if reference not in logs:
        raise ValueError(f"reference {reference!r} is not among the logs "
                         f"{sorted(logs)}")
    ref_log = logs[reference]
    for name, log in logs.items():
        if (log.n_steps != ref_log.n_steps
                or not np.array_equal(log.t, ref_log.t)
                or not np.array_equal(log.rho, ref_log.rho)):
            raise ValueError(f"log {name!r} covers a different cycle or "
                             f"window than the reference")
    err_ref = np.abs(ref_log.x - ref_log.r)
    ref_mean = err_ref.mean(axis=0)
    ref_std = err_ref.std(axis=0)
    stats: dict[str, VariantStats] = {}
    for name, log in logs.items():
        err = np.abs(log.x - log.r)
        mean = err.mean(axis=0)
        std = err.std(axis=0)
        if name == reference:
            stats[name] = VariantStats(tuple(mean), tuple(std), None, None)
        else:
            stats[name] = VariantStats(
                tuple(mean), tuple(std),
                tuple(_pct_delta(mean[c], ref_mean[c]) for c in range(2)),
                tuple(_pct_delta(std[c], ref_std[c]) for c in range(2)))
    return TrackingReport(reference=reference, channels=("p_im", "chi_egr"),
                          stats=stats)

"""Closed-loop weight calibration against a second-order reference.

The tuner automates the manual calibration loop: pick a desired
second-order step shape per channel (time constant + overshoot), apply
fuel tip-in and tip-out steps to the closed loop at one operating point,
measure 90%-rise time and overshoot, and double/halve the corresponding
diagonal weights until both channels meet their targets or the
simulation budget runs out.  Operating points are then grouped into six
weight regions by low/high splits of engine speed, fuel rate, and the
EGR-rate target, and one representative point per region is tuned.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import CalibConfig, HarnessConfig, MpcSettings
from .lpv import LpvModel
from .mpc import MpcConfig
from .plant import AirpathPlant, OperatingPoint
from .runner import run_step_test
from .tables import FeedforwardTable, SetpointTables

__all__ = ["ReferenceSpec", "RegionMap", "StepMetrics", "TraceRow",
           "TuneResult", "assign_regions", "desired_response",
           "measure_step_metrics", "trace_to_csv", "tune_point",
           "tune_regions"]

REGION_FORMAT_VERSION = 1

# the six populated (speed, fuel, chi_egr) low/high octants; the two
# high-fuel + high-EGR combinations cannot occur on a calibrated lattice
REGION_COMBOS = ((0, 0, 0), (0, 0, 1), (0, 1, 0),
                 (1, 0, 0), (1, 0, 1), (1, 1, 0))

_UNSETTLED_PENALTY = 1.0e3
_CHANNELS = ("p_im", "chi_egr")


@dataclass(frozen=True)
class ReferenceSpec:
    """Desired closed-loop step shape: time constant and peak overshoot."""

    tau: float
    overshoot: float
    dt: float = 0.02

    def __post_init__(self):
        if not self.tau > 0.0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.overshoot < 1.0:
            raise ValueError(f"overshoot must lie in [0, 1), got "
                             f"{self.overshoot}")
        if not self.dt > 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")

    @property
    def zeta(self) -> float:
        if self.overshoot == 0.0:
            return 1.0
        ln_os = math.log(self.overshoot)
        return -ln_os / math.sqrt(math.pi ** 2 + ln_os ** 2)

    @property
    def omega_n(self) -> float:
        return 1.0 / (self.zeta * self.tau)

    def response_time_target(self) -> float:
        """90%-rise time of this spec's own reference response."""
        y = desired_response(self, 1.0)
        return measure_step_metrics(y, 0.0, 1.0, dt=self.dt).response_time_90


def desired_response(spec: ReferenceSpec, r_step: float,
                     duration: float | None = None) -> np.ndarray:
    """Step response of the unit-DC second-order reference system.

    Sample 0 is the step instant (response still zero); the series is
    long enough by default for the envelope to decay below 1e-6.
    """
    if duration is None:
        duration = 16.0 * spec.tau
    n = round(duration / spec.dt)
    if n < 2:
        raise ValueError(f"duration {duration} spans fewer than two "
                         f"samples at dt={spec.dt}")
    zeta, wn = spec.zeta, spec.omega_n
    wd = wn * math.sqrt(max(0.0, 1.0 - zeta ** 2))
    decay = math.exp(-zeta * wn * spec.dt)
    a1 = -2.0 * decay * math.cos(wd * spec.dt)
    a2 = decay ** 2
    b0 = 1.0 + a1 + a2
    y = np.zeros(n)
    for k in range(1, n):
        y_km2 = y[k - 2] if k >= 2 else 0.0
        y[k] = -a1 * y[k - 1] - a2 * y_km2 + b0 * r_step
    return y


@dataclass(frozen=True)
class StepMetrics:
    """Rise time, overshoot, and terminal offset of one step trajectory."""

    response_time_90: float
    overshoot: float
    steady_error: float
    reached: bool = True


def measure_step_metrics(traj, initial: float, target: float,
                         dt: float = 0.02, hold_samples: int = 5,
                         settle_band: float = 0.02,
                         settle_frac: float = 0.10,
                         settle_floor: float = 0.005) -> StepMetrics:
    """Extract step metrics from a trajectory sampled from the step instant.

    The 90% level must be held for ``hold_samples`` consecutive samples
    to count; a trajectory whose tail (last ``settle_frac`` of samples)
    strays beyond the settle band from the target has not finished
    responding and raises.  The band is ``settle_band`` of the step
    magnitude, but never tighter than ``settle_floor`` of the larger of
    the initial and target levels: a near-zero step must not demand
    settling far below the resolution the signal itself moves at.

    A step no larger than twice that resolution floor is degenerate:
    fractions of the step stop being meaningful, so arrival means
    holding inside the resolution band and overshoot counts only the
    excursion beyond it.  Steps of ordinary size keep the classic
    fraction-of-step definitions untouched.
    """
    y = np.asarray(traj, dtype=float)
    if y.ndim != 1 or y.shape[0] < hold_samples + 1:
        raise ValueError(f"trajectory must be 1-D with more than "
                         f"{hold_samples} samples, got shape {y.shape}")
    step = target - initial
    if step == 0.0:
        raise ValueError("target must differ from the initial value")
    n = y.shape[0]
    tail = y[-max(1, round(settle_frac * n)):]
    band = max(settle_band * abs(step),
               settle_floor * max(abs(initial), abs(target)))
    if np.max(np.abs(tail - target)) > band:
        raise RuntimeError(
            f"trajectory has not settled: tail deviates "
            f"{np.max(np.abs(tail - target)):.3g} from target {target:.3g} "
            f"(band {band:.3g})")
    eps = settle_floor * max(abs(initial), abs(target))
    if abs(step) <= 2.0 * eps:
        above = np.abs(y - target) <= band
        excess = float(np.max((y - target) * math.copysign(1.0, step)))
        overshoot = max(0.0, excess - band) / abs(step)
    else:
        progress = (y - initial) / step
        above = progress >= 0.9
        overshoot = float(max(0.0, np.max(progress) - 1.0))
    held = np.ones(n - hold_samples + 1, dtype=bool)
    for off in range(hold_samples):
        held &= above[off:off + n - hold_samples + 1]
    idx = np.nonzero(held)[0]
    if idx.size:
        response_time = float(idx[0]) * dt
        reached = True
    else:
        response_time = math.inf
        reached = False
    steady_error = float(np.mean(tail) - target)
    return StepMetrics(response_time, overshoot, steady_error, reached)


@dataclass(frozen=True)
class TraceRow:
    """One tuner evaluation: weights tried and the metrics they achieved."""

    evaluation: int
    q_diag: tuple[float, float]
    r_diag: tuple[float, float]
    response_time_90: tuple[float, float]
    overshoot: tuple[float, float]
    settled: bool
    score: float
    best_score: float


@dataclass(frozen=True)
class TuneResult:
    """Outcome of one tuning run at one operating point."""

    rho: tuple[float, float]
    q_diag: tuple[float, float]
    r_diag: tuple[float, float]
    met: bool
    evaluations: int
    response_time_90: tuple[float, float]
    overshoot: tuple[float, float]
    trace: tuple[TraceRow, ...]
    report: str

    @property
    def q_e(self) -> np.ndarray:
        return np.diag(self.q_diag)

    @property
    def r(self) -> np.ndarray:
        return np.diag(self.r_diag)


def _worst_channel_metrics(logs, step_index):
    """Per-channel worst-case (rt90, overshoot, settled) over several runs."""
    rt = [0.0, 0.0]
    os_ = [0.0, 0.0]
    settled = True
    for log in logs:
        for c in range(2):
            traj = log.x[step_index:, c]
            initial = float(log.x[step_index, c])
            target = float(log.r[-1, c])
            try:
                m = measure_step_metrics(traj, initial, target, dt=log.dt)
            except RuntimeError:
                settled = False
                rt[c] = math.inf
                os_[c] = math.inf
                continue
            rt[c] = max(rt[c], m.response_time_90)
            os_[c] = max(os_[c], m.overshoot)
    return (rt[0], rt[1]), (os_[0], os_[1]), settled


class _Evaluator:
    """Runs the tip-in/tip-out pair for one weight vector and scores it.

    Both runs step between the point's fuel rate and the adjacent node
    of the set-point fuel axis (the next node above, or the next below
    when the point sits at the top): tip-in rises from the lower fuel
    to the higher one, tip-out falls back.  Node partners keep the
    tested transition on calibrated table cells and give every point a
    step of comparable size.
    """

    def __init__(self, plant, model, rho, specs, *, setpoints, ff_table,
                 settings, calib, harness):
        self.plant = plant
        self.model = model
        self.rho = rho
        self.specs = specs
        self.setpoints = setpoints
        self.ff_table = ff_table
        self.settings = settings
        self.calib = calib
        self.harness = harness
        f = rho.fuel_rate
        f_ax = np.asarray(setpoints.fuel_axis, dtype=float)
        above = f_ax[f_ax > f + 1e-9]
        below = f_ax[f_ax < f - 1e-9]
        if above.size:
            partner = float(above[0])
        elif below.size:
            partner = float(below[-1])
        else:
            raise ValueError(f"fuel rate {f} has no neighbouring node on "
                             f"the fuel axis [{f_ax[0]:g}, {f_ax[-1]:g}]")
        self.fuel_lo, self.fuel_hi = sorted((f, partner))
        self.rt_targets = tuple(s.response_time_target() for s in specs)
        self.os_targets = tuple(s.overshoot for s in specs)
        self.step_index = round(harness.step_at / 0.02)

    def config_for(self, q_diag, r_diag) -> MpcConfig:
        s = self.settings
        return MpcConfig(horizon=s.horizon, q_e=np.diag(q_diag),
                         r=np.diag(r_diag), x_min=s.x_min, x_max=s.x_max,
                         u_min=s.u_min, u_max=s.u_max, dt=s.dt)

    def run(self, q_diag, r_diag):
        cfg = self.config_for(q_diag, r_diag)
        speed = self.rho.engine_speed
        lo = OperatingPoint(speed, self.fuel_lo)
        hi = OperatingPoint(speed, self.fuel_hi)
        logs = []
        for rho_from, rho_to in ((lo, hi), (hi, lo)):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                logs.append(run_step_test(
                    self.plant, rho_from, rho_to, self.setpoints,
                    self.ff_table, self.model, mpc_config=cfg,
                    duration=self.calib.step_duration,
                    harness=self.harness))
        rt, os_, settled = _worst_channel_metrics(logs, self.step_index)
        score = 0.0
        for c in range(2):
            rt_part = 0.0 if rt[c] <= self.rt_targets[c] else min(
                rt[c] / self.rt_targets[c] - 1.0, _UNSETTLED_PENALTY)
            os_part = 0.0 if os_[c] <= self.os_targets[c] else min(
                (os_[c] - self.os_targets[c]) / max(self.os_targets[c],
                                                    0.01),
                _UNSETTLED_PENALTY)
            score += rt_part + os_part
        if not settled:
            score += _UNSETTLED_PENALTY
        return rt, os_, settled, score

    def channel_met(self, rt, os_, c) -> bool:
        return (rt[c] <= self.rt_targets[c] + 1e-12
                and os_[c] <= self.os_targets[c] + 1e-12)


def tune_point(plant: AirpathPlant, model: LpvModel, rho: OperatingPoint,
               spec_pim: ReferenceSpec | None = None,
               spec_egr: ReferenceSpec | None = None,
               init_weights=None, *, setpoints: SetpointTables,
               ff_table: FeedforwardTable,
               settings: MpcSettings | None = None,
               calib: CalibConfig | None = None,
               harness: HarnessConfig | None = None) -> TuneResult:
    """Search diagonal weights until fuel-step responses meet both specs.

    The search walks channel by channel (intake pressure first, then EGR
    rate, then rechecks jointly), doubling a channel's error weight when
    its response is too slow and doubling its increment weight when it
    overshoots or fails to settle; when a move does not improve the
    score the remaining candidates for that symptom are tried in turn
    (halving where doubling failed, and for overshoot also the reverse
    — more error weight or less increment cost — since an excursion the
    feedforward path causes needs catching, not damping).  Every
    candidate is evaluated on a tip-in and a tip-out fuel step; the
    best-scoring weights seen are returned even when the budget runs
    out, together with an unmet-target report.
    """
    settings = settings if settings is not None else MpcSettings()
    calib = calib if calib is not None else CalibConfig()
    harness = harness if harness is not None else HarnessConfig()
    if spec_pim is None:
        spec_pim = ReferenceSpec(calib.tau_p_im, calib.os_p_im)
    if spec_egr is None:
        spec_egr = ReferenceSpec(calib.tau_egr, calib.os_egr)
    ev = _Evaluator(plant, model, rho, (spec_pim, spec_egr),
                    setpoints=setpoints, ff_table=ff_table,
                    settings=settings, calib=calib, harness=harness)
    if init_weights is None:
        q = np.array(settings.q_diag, dtype=float)
        r = np.array(settings.r_diag, dtype=float)
    else:
        q = np.array(init_weights[0], dtype=float)
        r = np.array(init_weights[1], dtype=float)
    if q.shape != (2,) or r.shape != (2,):
        raise ValueError("init_weights must hold two diagonals of length 2")
    lo, hi = calib.weight_min, calib.weight_max
    if np.any(q < lo) or np.any(q > hi) or np.any(r < lo) or np.any(r > hi):
        raise ValueError(f"initial weights must lie in [{lo:g}, {hi:g}]")

    trace: list[TraceRow] = []
    tried: set[tuple[float, float, float, float]] = set()
    evals = 0

    def evaluate(q_diag, r_diag, best_score):
        nonlocal evals
        rt, os_, settled, score = ev.run(q_diag, r_diag)
        evals += 1
        tried.add((q_diag[0], q_diag[1], r_diag[0], r_diag[1]))
        trace.append(TraceRow(
            evaluation=evals,
            q_diag=(float(q_diag[0]), float(q_diag[1])),
            r_diag=(float(r_diag[0]), float(r_diag[1])),
            response_time_90=(float(rt[0]), float(rt[1])),
            overshoot=(float(os_[0]), float(os_[1])), settled=settled,
            score=score, best_score=min(score, best_score)))
        return rt, os_, settled, score

    rt, os_, settled, score = evaluate(q, r, math.inf)
    best = dict(q=q.copy(), r=r.copy(), rt=rt, os=os_, score=score)

    def met_all(rt, os_) -> bool:
        return all(ev.channel_met(rt, os_, c) for c in range(2))

    # the input whose authority dominates each output channel: intake
    # pressure is set by the turbine (vgt), the EGR rate by the EGR valve
    input_of_channel = (1, 0)
    while evals < calib.budget and not met_all(best["rt"], best["os"]):
        improved_this_pass = False
        for c in range(2):  # intake-pressure channel first, then EGR rate
            while (evals < calib.budget
                   and not ev.channel_met(best["rt"], best["os"], c)):
                in_c = input_of_channel[c]
                if best["rt"][c] > ev.rt_targets[c]:
                    # too slow: weight the error harder, then relax the
                    # paired input's increment cost
                    moves = (("q", c, 2.0), ("r", in_c, 0.5))
                else:
                    # overshoot (or not settled): first damp the paired
                    # input or soften the error weight; if damping does
                    # not score better, the loop is undercorrecting a
                    # feedforward-driven excursion, so try the authority
                    # direction instead
                    moves = (("r", in_c, 2.0), ("q", c, 0.5),
                             ("q", c, 2.0), ("r", in_c, 0.5))
                improved_move = False
                for kind, idx, factor in moves:
                    q_try = best["q"].copy()
                    r_try = best["r"].copy()
                    vec = q_try if kind == "q" else r_try
                    value = vec[idx] * factor
                    if not lo <= value <= hi:
                        continue
                    vec[idx] = value
                    key = (q_try[0], q_try[1], r_try[0], r_try[1])
                    if key in tried:
                        continue
                    rt, os_, settled, score = evaluate(q_try, r_try,
                                                       best["score"])
                    if score < best["score"]:
                        best = dict(q=q_try, r=r_try, rt=rt, os=os_,
                                    score=score)
                        improved_move = True
                        break
                    if evals >= calib.budget:
                        break
                if improved_move:
                    improved_this_pass = True
                else:
                    break  # no move helps this channel; try the next one
        if not improved_this_pass:
            break

    met = met_all(best["rt"], best["os"])
    if met:
        report = "all targets met"
    else:
        parts = []
        for c, name in enumerate(_CHANNELS):
            if best["rt"][c] > ev.rt_targets[c] + 1e-12:
                parts.append(f"{name} response time {best['rt'][c]:.3g} s "
                             f"> target {ev.rt_targets[c]:.3g} s")
            if best["os"][c] > ev.os_targets[c] + 1e-12:
                parts.append(f"{name} overshoot {best['os'][c]:.3g} "
                             f"> target {ev.os_targets[c]:.3g}")
        report = ("budget exhausted: " if evals >= calib.budget
                  else "search stalled: ") + "; ".join(parts)
    return TuneResult(
        rho=(rho.engine_speed, rho.fuel_rate),
        q_diag=tuple(float(v) for v in best["q"]),
        r_diag=tuple(float(v) for v in best["r"]), met=met,
        evaluations=evals,
        response_time_90=tuple(best["rt"]), overshoot=tuple(best["os"]),
        trace=tuple(trace), report=report)


def trace_to_csv(trace, path: str | Path) -> None:
    """Dump tuner evaluations as CSV (one row per weight vector tried)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("evaluation", "q_p_im", "q_chi_egr", "r_egr",
                         "r_vgt", "rt90_p_im", "rt90_chi_egr", "os_p_im",
                         "os_chi_egr", "settled", "score", "best_score"))
        for row in trace:
            writer.writerow([row.evaluation,
                             repr(float(row.q_diag[0])),
                             repr(float(row.q_diag[1])),
                             repr(float(row.r_diag[0])),
                             repr(float(row.r_diag[1])),
                             repr(float(row.response_time_90[0])),
                             repr(float(row.response_time_90[1])),
                             repr(float(row.overshoot[0])),
                             repr(float(row.overshoot[1])),
                             int(row.settled),
                             repr(float(row.score)),
                             repr(float(row.best_score))])


@dataclass
class RegionMap:
    """Lattice partition into six weight regions plus per-region weights."""

    thresholds: tuple[float, float, float]
    points: tuple[tuple[float, float], ...]
    chi: tuple[float, ...]
    assignment: dict[tuple[float, float], int]
    weights: dict[int, tuple[tuple[float, float], tuple[float, float]]] = \
        field(default_factory=dict)
    representatives: dict[int, tuple[float, float]] = field(
        default_factory=dict)
    met: dict[int, bool] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.points) != len(self.chi):
            raise ValueError("points and chi must have equal length")
        missing = [p for p in self.points if p not in self.assignment]
        if missing:
            raise ValueError(f"unassigned lattice points: {missing}")
        bad = {r for r in self.assignment.values()
               if not 1 <= r <= len(REGION_COMBOS)}
        if bad:
            raise ValueError(f"region ids out of range: {sorted(bad)}")

    def members(self, region: int) -> list[tuple[float, float]]:
        return [p for p in self.points if self.assignment[p] == region]

    def region_of(self, rho: OperatingPoint) -> int:
        """Region of the nearest lattice point (normalized distance)."""
        pts = np.asarray(self.points)
        span = np.maximum(pts.max(axis=0) - pts.min(axis=0), 1e-12)
        d = np.linalg.norm(
            (pts - [rho.engine_speed, rho.fuel_rate]) / span, axis=1)
        return self.assignment[self.points[int(np.argmin(d))]]

    def weights_of(self, rho: OperatingPoint):
        """(q_diag, r_diag) of the region containing the operating point."""
        region = self.region_of(rho)
        if region not in self.weights:
            raise KeyError(f"region {region} has no tuned weights yet")
        return self.weights[region]

    def save(self, path: str | Path) -> None:
        doc = {"format_version": REGION_FORMAT_VERSION,
               "thresholds": list(self.thresholds),
               "points": [list(p) for p in self.points],
               "chi": list(self.chi),
               "assignment": [[p[0], p[1], self.assignment[p]]
                              for p in self.points],
               "weights": {str(k): [list(v[0]), list(v[1])]
                           for k, v in self.weights.items()},
               "representatives": {str(k): list(v) for k, v in
                                   self.representatives.items()},
               "met": {str(k): bool(v) for k, v in self.met.items()}}
        Path(path).write_text(json.dumps(doc, indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "RegionMap":
        doc = json.loads(Path(path).read_text())
        if doc.get("format_version") != REGION_FORMAT_VERSION:
            raise ValueError(f"unsupported region map format version "
                             f"{doc.get('format_version')!r}")
        points = tuple((float(s), float(f)) for s, f in doc["points"])
        assignment = {(float(s), float(f)): int(r)
                      for s, f, r in doc["assignment"]}
        return cls(
            thresholds=tuple(float(v) for v in doc["thresholds"]),
            points=points, chi=tuple(float(v) for v in doc["chi"]),
            assignment=assignment,
            weights={int(k): (tuple(v[0]), tuple(v[1]))
                     for k, v in doc["weights"].items()},
            representatives={int(k): tuple(v) for k, v in
                             doc["representatives"].items()},
            met={int(k): bool(v) for k, v in doc["met"].items()})


def assign_regions(grid, setpoints: SetpointTables,
                   thresholds: tuple[float, float, float] | None = None
                   ) -> RegionMap:
    """Split the lattice into the six populated low/high weight regions.

    Default thresholds are the medians of engine speed, fuel rate, and
    the EGR-rate target over the lattice.  Points whose low/high triple
    lands in one of the two unpopulated combinations are reassigned to
    the region of the nearest classified point (normalized Euclidean
    distance) with a warning.
    """
    points = tuple((float(p.engine_speed), float(p.fuel_rate))
                   for p in grid)
    if len(set(points)) != len(points) or not points:
        raise ValueError("grid must hold distinct operating points")
    chi = tuple(float(setpoints.targets(OperatingPoint(s, f))[1])
                for s, f in points)
    if thresholds is None:
        arr = np.asarray(points)
        thresholds = (float(np.median(arr[:, 0])),
                      float(np.median(arr[:, 1])),
                      float(np.median(np.asarray(chi))))
    t_s, t_f, t_chi = thresholds
    combo_to_region = {combo: i + 1 for i, combo in enumerate(REGION_COMBOS)}
    assignment: dict[tuple[float, float], int] = {}
    orphans: list[int] = []
    triples = []
    for idx, (s, f) in enumerate(points):
        triple = (int(s > t_s), int(f > t_f), int(chi[idx] > t_chi))
        triples.append(triple)
        if triple in combo_to_region:
            assignment[(s, f)] = combo_to_region[triple]
        else:
            orphans.append(idx)
    if len(orphans) == len(points):
        raise ValueError("no lattice point falls in a populated region; "
                         "check the thresholds")
    if orphans:
        arr = np.asarray(points)
        chi_arr = np.asarray(chi)
        span = np.array([max(np.ptp(arr[:, 0]), 1e-12),
                         max(np.ptp(arr[:, 1]), 1e-12),
                         max(np.ptp(chi_arr), 1e-12)])
        coords = np.column_stack([arr, chi_arr]) / span
        classified = [i for i in range(len(points)) if i not in orphans]
        for idx in orphans:
            d = np.linalg.norm(coords[classified] - coords[idx], axis=1)
            nearest = classified[int(np.argmin(d))]
            assignment[points[idx]] = assignment[points[nearest]]
        named = ", ".join(f"({points[i][0]:g} rpm, {points[i][1]:g} mm^3)"
                          for i in orphans)
        warnings.warn(f"{len(orphans)} lattice points fall in unpopulated "
                      f"region combinations and were reassigned to their "
                      f"nearest classified neighbours: {named}",
                      UserWarning, stacklevel=2)
    return RegionMap(thresholds=tuple(float(v) for v in thresholds),
                     points=points, chi=chi, assignment=assignment)


def tune_regions(plant: AirpathPlant, model: LpvModel,
                 region_map: RegionMap, *, setpoints: SetpointTables,
                 ff_table: FeedforwardTable,
                 spec_pim: ReferenceSpec | None = None,
                 spec_egr: ReferenceSpec | None = None,
                 settings: MpcSettings | None = None,
                 calib: CalibConfig | None = None,
                 harness: HarnessConfig | None = None,
                 trace_dir: str | Path | None = None) -> RegionMap:
    """Tune one centroid-nearest representative per region.

    Returns a new RegionMap carrying the tuned per-region weights, the
    chosen representatives, and per-region target-met flags; traces are
    written as CSV when ``trace_dir`` is given.
    """
    pts = np.asarray(region_map.points)
    span = np.maximum(pts.max(axis=0) - pts.min(axis=0), 1e-12)
    weights = {}
    representatives = {}
    met = {}
    for region in sorted(set(region_map.assignment.values())):
        members = np.asarray(region_map.members(region))
        centroid = members.mean(axis=0)
        d = np.linalg.norm((members - centroid) / span, axis=1)
        rep = tuple(float(v) for v in members[int(np.argmin(d))])
        result = tune_point(plant, model,
                            OperatingPoint(rep[0], rep[1]),
                            spec_pim, spec_egr,
                            setpoints=setpoints, ff_table=ff_table,
                            settings=settings, calib=calib,
                            harness=harness)
        weights[region] = (result.q_diag, result.r_diag)
        representatives[region] = rep
        met[region] = result.met
        if trace_dir is not None:
            trace_to_csv(result.trace,
                         Path(trace_dir) / f"tuning_region_{region}.csv")
    return RegionMap(thresholds=region_map.thresholds,
                     points=region_map.points, chi=region_map.chi,
                     assignment=dict(region_map.assignment),
                     weights=weights, representatives=representatives,
                     met=met)

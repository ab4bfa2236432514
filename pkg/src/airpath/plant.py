"""Surrogate diesel airpath plant.

Four-state mean-value model: intake pressure, exhaust pressure, turbo speed
and a lumped wall temperature.  Two actuators (EGR valve percent-open, VGT
percent-closed) and an externally commanded operating point (engine speed,
fuel rate).  The wall temperature either tracks its equilibrium instantly
("steady_state" thermal solver) or through a first-order lag ("transient"),
which is the only difference between the two modes; their equilibria agree.

The model is deliberately simple but keeps the couplings that matter for
boost/EGR control: closing the VGT raises turbine power and boost, opening
the EGR valve recirculates exhaust (raising the EGR fraction and stealing a
little turbine energy), fuel raises exhaust enthalpy both instantly through
combustion and slowly through the wall temperature.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .config import PlantParams

TRAJECTORY_CSV_HEADER = (
    "t,p_im,p_em,turbo_speed,wall_temp,egr_pos,vgt_pos,"
    "engine_speed,fuel_rate,egr_rate"
)


class ThermalMode(Enum):
    STEADY_STATE = "steady_state"
    TRANSIENT = "transient"


class ConvergenceError(RuntimeError):
    """Equilibrium iteration failed; carries the last residual."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


def _clamp(x: float, lo: float, hi: float) -> float:
    return lo if x < lo else hi if x > hi else x


@dataclass(frozen=True)
class OperatingPoint:
    engine_speed: float     # rpm
    fuel_rate: float        # mm^3 per cylinder per cycle


@dataclass(frozen=True)
class ActuatorInput:
    """Valve commands in percent.  Values are clamped into [0, 100]."""

    egr_pos: float          # percent open
    vgt_pos: float          # percent closed

    def __post_init__(self):
        object.__setattr__(self, "egr_pos", _clamp(float(self.egr_pos), 0.0, 100.0))
        object.__setattr__(self, "vgt_pos", _clamp(float(self.vgt_pos), 0.0, 100.0))


@dataclass(frozen=True)
class PlantState:
    p_im: float             # bar
    p_em: float             # bar
    turbo_speed: float      # normalized, >= 0
    wall_temp: float        # K


@dataclass(frozen=True)
class PlantOutput:
    p_im: float
    egr_rate: float
    w_egr: float            # kg/s
    w_thr: float            # kg/s


def egr_rate(w_egr: float, w_thr: float) -> float:
    """EGR fraction: recirculated flow over total flow into the intake."""
    if w_egr < 0.0 or w_thr < 0.0:
        raise ValueError(f"flows must be non-negative, got ({w_egr}, {w_thr})")
    total = w_egr + w_thr
    if total <= 0.0:
        raise ValueError("EGR rate undefined: no flow into the intake manifold")
    return w_egr / total


def _ode(c: PlantParams, p_im: float, p_em: float, nt: float, tw: float,
         a: float, v: float, speed: float, fuel: float):
    """Time derivatives of the fast states plus flows and wall target.

    Returns (dp_im, dp_em, dnt, tw_eq, w_egr, w_thr); the wall temperature
    derivative is formed by the caller from tw_eq according to the thermal
    mode.  a and v are valve fractions in [0, 1].
    """
    p_amb = c.ambient_pressure
    t_amb = c.ambient_temp

    w_f = fuel * c.n_cylinders * (speed / 120.0) * c.fuel_density
    t_im = t_amb + c.charge_heat_frac * (tw - t_amb)
    rho_im = p_im * 1.0e5 / (c.gas_constant * t_im)
    w_cyl = c.vol_eff * c.displacement * (speed / 120.0) * rho_im

    d_ei = p_em - p_im
    psi_egr = d_ei / math.sqrt(abs(d_ei) + c.flow_smoothing)
    w_egr = c.egr_flow_gain * a * psi_egr
    if w_egr < 0.0:
        w_egr = 0.0
    w_egr *= 1.0 + c.flow_bias_egr

    w_thr = c.comp_flow_gain * nt - c.comp_backflow_gain * (p_im - p_amb)
    if w_thr < 0.0:
        w_thr = 0.0
    w_thr *= 1.0 + c.flow_bias_thr

    t_em = (t_amb + c.comb_temp_gain * w_f / (w_cyl + 1.0e-4)
            + c.exhaust_wall_coupling * (tw - t_amb))

    d_et = p_em - p_amb
    psi_t = d_et / math.sqrt(abs(d_et) + c.flow_smoothing)
    # flow scales with upstream pressure and inverse sqrt-temperature, so the
    # turbine passes high-load flow without the backpressure blowing up
    w_t = (c.turbine_flow_gain * (1.0 - c.turbine_flow_vgt_slope * v)
           * (p_em / p_amb) * psi_t
           * math.sqrt(c.turbine_temp_ref / (t_em if t_em > 200.0 else 200.0)))
    if w_t < 0.0:
        w_t = 0.0

    pr = p_amb / p_em if p_em > p_amb else 1.0
    eta_t = c.turbine_eff_base + c.turbine_eff_vgt_gain * v
    power_t = eta_t * w_t * c.cp_exhaust * t_em * (1.0 - pr ** c.turbine_kappa)
    head = (p_im / p_amb) ** 0.286 - 1.0
    if head < 0.0:
        head = 0.0
    power_c = w_thr * c.cp_air * t_amb * (head + c.comp_loss_head) / c.comp_eff

    dp_im = c.gas_constant * t_im / c.intake_volume * (w_thr + w_egr - w_cyl) * 1.0e-5
    dp_em = c.gas_constant * t_em / c.exhaust_volume * (w_cyl + w_f - w_egr - w_t) * 1.0e-5
    dnt = (power_t - power_c - c.turbo_friction * nt * nt) / (
        c.turbo_inertia * (nt if nt > c.turbo_speed_floor else c.turbo_speed_floor))

    tw_eq = (t_amb + c.wall_fuel_gain * (w_f / c.wall_fuel_ref)
             + c.wall_speed_gain * (speed / c.wall_speed_ref)
             + c.wall_egr_gain * a + c.wall_vgt_gain * v)
    tw_eq = _clamp(tw_eq, t_amb, c.wall_temp_max)

    return dp_im, dp_em, dnt, tw_eq, w_egr, w_thr


class AirpathPlant:
    """Stateless dynamics plus per-instance diagnostics counters.

    A single instance is meant to be used sequentially within one run; the
    only mutable members are diagnostic counters (saturation events).
    """

    def __init__(self, params: PlantParams | None = None):
        self.params = params if params is not None else PlantParams()
        self.saturation_count = 0
        self.last_step_saturated = False

    # ------------------------------------------------------------------ api

    def reset_diagnostics(self) -> None:
        self.saturation_count = 0
        self.last_step_saturated = False

    def validate_operating_point(self, rho: OperatingPoint) -> None:
        c = self.params
        if not (c.speed_min <= rho.engine_speed <= c.speed_max):
            raise ValueError(
                f"engine speed {rho.engine_speed} rpm outside "
                f"[{c.speed_min}, {c.speed_max}]")
        if not (c.fuel_min <= rho.fuel_rate <= c.fuel_max):
            raise ValueError(
                f"fuel rate {rho.fuel_rate} mm^3 outside "
                f"[{c.fuel_min}, {c.fuel_max}]")

    def wall_equilibrium_temp(self, rho: OperatingPoint, u: ActuatorInput) -> float:
        c = self.params
        w_f = rho.fuel_rate * c.n_cylinders * (rho.engine_speed / 120.0) * c.fuel_density
        tw_eq = (c.ambient_temp + c.wall_fuel_gain * (w_f / c.wall_fuel_ref)
                 + c.wall_speed_gain * (rho.engine_speed / c.wall_speed_ref)
                 + c.wall_egr_gain * u.egr_pos / 100.0
                 + c.wall_vgt_gain * u.vgt_pos / 100.0)
        return _clamp(tw_eq, c.ambient_temp, c.wall_temp_max)

    def derivatives(self, state: PlantState, u: ActuatorInput, rho: OperatingPoint,
                    mode: ThermalMode = ThermalMode.TRANSIENT):
        """Full state derivative (4-tuple) at the given conditions."""
        c = self.params
        dp_im, dp_em, dnt, tw_eq, _, _ = _ode(
            c, state.p_im, state.p_em, state.turbo_speed, state.wall_temp,
            u.egr_pos / 100.0, u.vgt_pos / 100.0,
            rho.engine_speed, rho.fuel_rate)
        if mode is ThermalMode.TRANSIENT:
            dtw = (tw_eq - state.wall_temp) / c.wall_time_constant
        else:
            dtw = 0.0
        return dp_im, dp_em, dnt, dtw

    def output(self, state: PlantState, u: ActuatorInput, rho: OperatingPoint) -> PlantOutput:
        c = self.params
        _, _, _, _, w_egr, w_thr = _ode(
            c, state.p_im, state.p_em, state.turbo_speed, state.wall_temp,
            u.egr_pos / 100.0, u.vgt_pos / 100.0,
            rho.engine_speed, rho.fuel_rate)
        return PlantOutput(p_im=state.p_im, egr_rate=egr_rate(w_egr, w_thr),
                           w_egr=w_egr, w_thr=w_thr)

    def step(self, state: PlantState, u: ActuatorInput, rho: OperatingPoint,
             mode: ThermalMode = ThermalMode.TRANSIENT, dt: float = 0.02) -> PlantState:
        """Advance the plant by dt using explicit Euler substeps.

        dt must be positive and no longer than one 20 ms control period.
        State excursions outside the physical box are clamped and counted
        in the saturation diagnostics instead of raising.
        """
        if not (0.0 < dt <= 0.02 + 1.0e-12):
            raise ValueError(f"dt must be in (0, 0.02] s, got {dt}")
        c = self.params
        n_sub = max(1, round(dt / c.internal_dt))
        h = dt / n_sub
        a = u.egr_pos / 100.0
        v = u.vgt_pos / 100.0
        speed = rho.engine_speed
        fuel = rho.fuel_rate
        transient = mode is ThermalMode.TRANSIENT
        tau_inv = 1.0 / c.wall_time_constant

        p_im, p_em, nt, tw = state.p_im, state.p_em, state.turbo_speed, state.wall_temp
        saturated = False
        p_amb = c.ambient_pressure
        t_amb = c.ambient_temp
        for _ in range(n_sub):
            dp_im, dp_em, dnt, tw_eq, _, _ = _ode(c, p_im, p_em, nt, tw, a, v, speed, fuel)
            p_im += h * dp_im
            p_em += h * dp_em
            nt += h * dnt
            if transient:
                tw += h * tau_inv * (tw_eq - tw)
            else:
                tw = tw_eq
            if p_im < c.p_im_min:
                p_im = c.p_im_min
                saturated = True
            elif p_im > c.p_im_max:
                p_im = c.p_im_max
                saturated = True
            if p_em < p_amb:
                p_em = p_amb
                saturated = True
            elif p_em > c.p_em_max:
                p_em = c.p_em_max
                saturated = True
            if nt < 0.0:
                nt = 0.0
                saturated = True
            elif nt > c.turbo_speed_max:
                nt = c.turbo_speed_max
                saturated = True
            if tw < t_amb:
                tw = t_amb
                saturated = True
            elif tw > c.wall_temp_max:
                tw = c.wall_temp_max
                saturated = True
        if saturated:
            self.saturation_count += 1
        self.last_step_saturated = saturated
        return PlantState(p_im=p_im, p_em=p_em, turbo_speed=nt, wall_temp=tw)

    # -------------------------------------------------------- equilibrium

    def find_equilibrium(self, rho: OperatingPoint, u: ActuatorInput,
                         mode: ThermalMode = ThermalMode.TRANSIENT,
                         guess: PlantState | None = None) -> PlantState:
        """Equilibrium state for fixed (rho, u).

        Damped fixed-point iteration on the three gas-path states with the
        wall temperature pinned at its algebraic equilibrium (both thermal
        modes share the same fixed point).  Falls back to bisection on the
        turbo speed if the iteration stalls.  The result drifts by less
        than 1e-9 per field under a 20 ms step.
        """
        self.validate_operating_point(rho)
        c = self.params
        a = u.egr_pos / 100.0
        v = u.vgt_pos / 100.0
        speed, fuel = rho.engine_speed, rho.fuel_rate
        tw = self.wall_equilibrium_temp(rho, u)

        if guess is not None:
            p_im, p_em, nt = guess.p_im, guess.p_em, guess.turbo_speed
        else:
            p_im, p_em, nt = 1.2 * c.ambient_pressure, 1.5 * c.ambient_pressure, 0.7

        # Alternate between relaxing the manifold pressures at frozen turbo
        # speed and a damped update of the turbo speed.  Splitting the fast
        # and slow timescales keeps the iteration stable where a joint
        # update oscillates.  The shaft damping adapts to the measured slope
        # of the imbalance; pressure settles run loose while the shaft is
        # far from balance, tight once it is close.
        gamma = 1.0
        residual = math.inf
        last_mag = math.inf
        nt_prev = dnt_prev = None
        converged = False
        for _ in range(500):
            loose = last_mag > 1.0e-6
            p_im, p_em = self._settle_pressures(
                nt, a, v, speed, fuel, tw, p_im, p_em,
                tol=1.0e-9 if loose else 1.0e-13)
            dnt = _ode(c, p_im, p_em, nt, tw, a, v, speed, fuel)[2]
            mag = abs(dnt)
            if mag < 1.0e-12 and not loose:
                residual = mag
                converged = True
                break
            if mag > last_mag * 4.0:
                gamma *= 0.5
                if gamma < 1.0e-3:
                    break
            step = None
            if nt_prev is not None:
                dn = nt - nt_prev
                dd = dnt - dnt_prev
                if dn != 0.0 and dd / dn < -1.0e-9:
                    step = _clamp(-dnt * dn / dd, -0.5, 0.5)
            if step is None:
                step = 0.08 * dnt
            nt_prev, dnt_prev, last_mag = nt, dnt, mag
            nt = _clamp(nt + gamma * step, 0.0, c.turbo_speed_max)
            if nt == nt_prev:
                break   # pinned at a speed bound; let bisection decide
        if not converged:
            p_im, p_em, nt, residual = self._bisect_equilibrium(a, v, speed, fuel, tw)

        candidate = PlantState(p_im=p_im, p_em=p_em, turbo_speed=nt, wall_temp=tw)
        probe = AirpathPlant(c)    # do not pollute self's saturation counters
        nxt = probe.step(candidate, u, rho, mode, 0.02)
        drift = max(abs(nxt.p_im - p_im), abs(nxt.p_em - p_em),
                    abs(nxt.turbo_speed - nt), abs(nxt.wall_temp - tw))
        if drift > 1.0e-9:
            raise ConvergenceError(
                f"equilibrium iteration did not converge at "
                f"({speed} rpm, {fuel} mm^3, egr {u.egr_pos}, vgt {u.vgt_pos})",
                residual=max(residual, drift))
        return candidate

    def _settle_pressures(self, nt: float, a: float, v: float,
                          speed: float, fuel: float, tw: float,
                          p_im: float, p_em: float, tol: float = 1.0e-13):
        c = self.params
        for _ in range(40000):
            dp_im, dp_em, _, _, _, _ = _ode(c, p_im, p_em, nt, tw, a, v, speed, fuel)
            if abs(dp_im) < tol and abs(dp_em) < tol:
                break
            p_im = _clamp(p_im + 0.002 * dp_im, c.p_im_min, c.p_im_max)
            p_em = _clamp(p_em + 0.002 * dp_em, c.ambient_pressure, c.p_em_max)
        return p_im, p_em

    def _bisect_equilibrium(self, a: float, v: float, speed: float, fuel: float,
                            tw: float):
        """Bisection on turbo speed; pressures settled at each trial speed."""
        c = self.params

        def shaft_residual(nt, p_im, p_em, tol):
            p_im, p_em = self._settle_pressures(nt, a, v, speed, fuel, tw,
                                                p_im, p_em, tol=tol)
            dnt = _ode(c, p_im, p_em, nt, tw, a, v, speed, fuel)[2]
            return dnt, p_im, p_em

        lo, hi = 0.0, c.turbo_speed_max
        p_im, p_em = 1.1 * c.ambient_pressure, 1.3 * c.ambient_pressure
        f_lo, p_im, p_em = shaft_residual(lo, p_im, p_em, 1.0e-13)
        if f_lo <= 0.0:
            # shaft decelerates even at standstill; equilibrium is nt = 0
            return p_im, p_em, 0.0, abs(f_lo)
        f_hi, _, _ = shaft_residual(hi, p_im, p_em, 1.0e-13)
        if f_hi >= 0.0:
            raise ConvergenceError(
                f"no turbo speed balance in [0, {c.turbo_speed_max}] at "
                f"({speed} rpm, {fuel} mm^3)", residual=abs(f_hi))
        for _ in range(300):
            mid = 0.5 * (lo + hi)
            tight = hi - lo < 1.0e-6
            f_mid, p_im, p_em = shaft_residual(
                mid, p_im, p_em, 1.0e-13 if tight else 1.0e-9)
            if tight and abs(f_mid) < 1.0e-13:
                return p_im, p_em, mid, abs(f_mid)
            if f_mid > 0.0:
                lo = mid
            else:
                hi = mid
        mid = 0.5 * (lo + hi)
        f_mid, p_im, p_em = shaft_residual(mid, p_im, p_em, 1.0e-13)
        return p_im, p_em, mid, abs(f_mid)


# ------------------------------------------------------------------ csv io

def write_trajectory_csv(path: str | Path, t, states, inputs, rhos, rates) -> None:
    """Time-series dump; one row per sample, fixed column set."""
    rows = zip(t, states, inputs, rhos, rates)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAJECTORY_CSV_HEADER.split(","))
        for ti, x, u, rho, r in rows:
            writer.writerow([repr(float(ti)), repr(float(x[0])), repr(float(x[1])),
                             repr(float(x[2])), repr(float(x[3])),
                             repr(float(u[0])), repr(float(u[1])),
                             repr(float(rho[0])), repr(float(rho[1])),
                             repr(float(r))])


def read_trajectory_csv(path: str | Path):
    """Inverse of write_trajectory_csv; returns (t, states, inputs, rhos, rates)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if ",".join(header) != TRAJECTORY_CSV_HEADER:
            raise ValueError(f"unexpected trajectory header: {header}")
        t, states, inputs, rhos, rates = [], [], [], [], []
        for row in reader:
            vals = [float(x) for x in row]
            t.append(vals[0])
            states.append(vals[1:5])
            inputs.append(vals[5:7])
            rhos.append(vals[7:9])
            rates.append(vals[9])
    return t, states, inputs, rhos, rates

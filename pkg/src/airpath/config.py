"""Configuration dataclasses and INI-style persistence for the toolkit.

All tunable numbers live here: surrogate plant coefficients, the scheduling
grid with its nominal actuator tables, identification record lengths, MPC
weights and bounds, tuning targets, and harness/cycle settings.  A single
config file with one section per group overrides any subset of the defaults.
"""

from __future__ import annotations

import bisect
import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class PlantParams:
    """Coefficients of the surrogate mean-value airpath model.

    Pressures are in bar, temperatures in K, mass flows in kg/s, turbo speed
    is dimensionless (1.0 is roughly the mid-load operating speed).  Values
    are physically plausible for a mid-size four cylinder diesel but make no
    claim of matching any particular engine.
    """

    ambient_pressure: float = 1.0
    ambient_temp: float = 298.0

    # operating envelope
    speed_min: float = 800.0
    speed_max: float = 3200.0
    fuel_min: float = 10.0
    fuel_max: float = 110.0

    # geometry / gas properties
    n_cylinders: int = 4
    displacement: float = 4.4e-3          # m^3
    fuel_density: float = 0.84e-6         # kg per mm^3
    gas_constant: float = 287.0
    cp_air: float = 1005.0
    cp_exhaust: float = 1100.0
    intake_volume: float = 0.010          # m^3
    exhaust_volume: float = 0.004         # m^3

    # cylinder breathing
    vol_eff: float = 0.90
    charge_heat_frac: float = 0.10        # wall-to-charge heating fraction

    # EGR path
    egr_flow_gain: float = 0.0814
    flow_smoothing: float = 0.04          # bar, orifice-law smoothing

    # turbine
    turbine_flow_gain: float = 0.0443
    turbine_flow_vgt_slope: float = 0.15
    turbine_eff_base: float = 0.55
    turbine_eff_vgt_gain: float = 0.45
    turbine_kappa: float = 0.25
    turbine_temp_ref: float = 1000.0      # K, flow-correction reference

    # compressor
    comp_flow_gain: float = 0.0914
    comp_backflow_gain: float = 0.060
    comp_eff: float = 0.52
    comp_loss_head: float = 0.02          # isentropic-head offset (losses)

    # turbo shaft
    turbo_inertia: float = 6500.0         # W s per unit speed
    turbo_friction: float = 3200.0        # W at speed 1.0
    turbo_speed_floor: float = 0.05

    # combustion / thermal
    comb_temp_gain: float = 11000.0       # K per (fuel flow / charge flow)
    exhaust_wall_coupling: float = 0.55
    wall_fuel_gain: float = 150.0
    wall_fuel_ref: float = 3.36e-3        # kg/s, fuel flow at (2000 rpm, 60 mm^3)
    wall_speed_gain: float = 60.0
    wall_speed_ref: float = 2000.0
    wall_egr_gain: float = 350.0
    wall_vgt_gain: float = 120.0
    wall_temp_max: float = 1500.0
    wall_time_constant: float = 30.0      # s

    # deliberate model-mismatch knobs (fractions, default off)
    flow_bias_egr: float = 0.0
    flow_bias_thr: float = 0.0

    # integration and state saturation box
    internal_dt: float = 0.001
    p_im_min: float = 0.2
    p_im_max: float = 6.0
    p_em_max: float = 9.0
    turbo_speed_max: float = 3.0


@dataclass
class GridConfig:
    """Scheduling lattice and the nominal actuator schedule at its nodes.

    The nominal tables play the role of an OEM base calibration: set-point
    tables are the plant equilibrium outputs at these actuator positions.
    Rows follow ``speed_axis``, columns follow ``fuel_axis``.
    """

    speed_axis: tuple[float, ...] = (1000.0, 1500.0, 2000.0, 2500.0, 3000.0)
    fuel_axis: tuple[float, ...] = (20.0, 45.0, 70.0, 95.0)
    egr_nom: tuple[tuple[float, ...], ...] = (
        (13.0, 58.0, 50.0, 28.0),
        (48.0, 53.0, 45.0, 25.0),
        (46.0, 50.0, 27.0, 21.0),
        (45.0, 46.0, 28.0, 18.0),
        (38.0, 30.0, 25.0, 15.0),
    )
    vgt_nom: tuple[tuple[float, ...], ...] = (
        (52.0, 57.0, 62.0, 66.0),
        (50.0, 55.0, 60.0, 65.0),
        (48.0, 53.0, 58.0, 63.0),
        (46.0, 51.0, 56.0, 61.0),
        (44.0, 49.0, 54.0, 59.0),
    )

    def nominal_actuators(self, engine_speed: float, fuel_rate: float) -> tuple[float, float]:
        """Bilinear lookup of the nominal (egr, vgt) positions.

        Points outside the lattice are clamped to its boundary; lattice
        nodes return the table entries exactly.
        """
        s_ax, f_ax = self.speed_axis, self.fuel_axis
        s = min(max(engine_speed, s_ax[0]), s_ax[-1])
        f = min(max(fuel_rate, f_ax[0]), f_ax[-1])
        i = max(0, min(bisect.bisect_right(s_ax, s) - 1, len(s_ax) - 2))
        j = max(0, min(bisect.bisect_right(f_ax, f) - 1, len(f_ax) - 2))
        ts = (s - s_ax[i]) / (s_ax[i + 1] - s_ax[i])
        tf = (f - f_ax[j]) / (f_ax[j + 1] - f_ax[j])

        def interp(tab):
            return ((1.0 - ts) * ((1.0 - tf) * tab[i][j] + tf * tab[i][j + 1])
                    + ts * ((1.0 - tf) * tab[i + 1][j] + tf * tab[i + 1][j + 1]))

        return interp(self.egr_nom), interp(self.vgt_nom)


@dataclass
class SysidConfig:
    """Identification experiment shape."""

    train_duration: float = 120.0         # s per training record
    val_duration: float = 60.0            # s per validation record
    hold_samples: int = 100               # 2 s plateaus at 20 ms
    perturb_frac: float = 0.10            # level amplitude, fraction of u_ss
    fuel_perturb_frac: float = 0.05       # fuel-channel amplitude (3-input fits)
    cycle_perturb_frac: float = 0.05      # per-step dither for validation cycles
    dt: float = 0.02


@dataclass
class MpcSettings:
    """Controller defaults (per-region tuning overrides the weights)."""

    horizon: int = 50
    q_diag: tuple[float, ...] = (1.0, 25.0)
    r_diag: tuple[float, ...] = (0.02, 0.02)
    mu_scale: float = 1.0e4               # mu = mu_scale * max eig of Q_e
    x_min: tuple[float, ...] = (0.9, 0.0)
    x_max: tuple[float, ...] = (3.0, 0.6)
    u_min: tuple[float, ...] = (0.0, 0.0)
    u_max: tuple[float, ...] = (100.0, 100.0)
    dt: float = 0.02


@dataclass
class CalibConfig:
    """Closed-loop tuning targets and search limits."""

    tau_p_im: float = 1.0                 # s, desired response time constant
    os_p_im: float = 0.05                 # desired max overshoot fraction
    tau_egr: float = 1.0
    os_egr: float = 0.05
    budget: int = 30                      # closed-loop simulations per point
    step_duration: float = 8.0            # s of logged response after the step
    weight_min: float = 1.0e-4
    weight_max: float = 1.0e6


@dataclass
class HarnessConfig:
    """Closed-loop runner and drive-cycle generator settings."""

    pre_settle: float = 6.0               # s of unlogged closed loop before a step test
    step_at: float = 1.0                  # s, step instant inside the logged window
    max_speed_rate: float = 400.0         # rpm/s cycle slew bound
    max_fuel_rate: float = 60.0           # mm^3/cycle per s cycle slew bound
    ff_rel_tol: float = 0.02              # feedforward table acceptance band
    ff_solve_rel_tol: float = 0.002       # root-finder target inside that band
    thermal_mode: str = "transient"


@dataclass
class ToolkitConfig:
    plant: PlantParams = field(default_factory=PlantParams)
    grid: GridConfig = field(default_factory=GridConfig)
    sysid: SysidConfig = field(default_factory=SysidConfig)
    mpc: MpcSettings = field(default_factory=MpcSettings)
    calib: CalibConfig = field(default_factory=CalibConfig)
    harness: HarnessConfig = field(default_factory=HarnessConfig)


def _format_value(value) -> str:
    if isinstance(value, tuple) and value and isinstance(value[0], tuple):
        return "; ".join(", ".join(repr(float(x)) for x in row) for row in value)
    if isinstance(value, tuple):
        return ", ".join(repr(float(x)) for x in value)
    return repr(value) if not isinstance(value, str) else value


def _parse_value(text: str, default):
    text = text.strip()
    if isinstance(default, tuple) and default and isinstance(default[0], tuple):
        rows = [r for r in text.split(";") if r.strip()]
        return tuple(tuple(float(x) for x in row.split(",")) for row in rows)
    if isinstance(default, tuple):
        return tuple(float(x) for x in text.split(","))
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(float(text))
    if isinstance(default, float):
        return float(text)
    return text


def save_plant_params(params: PlantParams, path: str | Path) -> None:
    """Write plant coefficients as flat ``key = value`` lines."""
    with open(path, "w") as fh:
        fh.write("# surrogate plant coefficients\n")
        for f in dataclasses.fields(params):
            fh.write(f"{f.name} = {getattr(params, f.name)!r}\n")


def load_plant_params(path: str | Path) -> PlantParams:
    """Read a flat ``key = value`` file; keys not present keep defaults.

    Lines starting with '#' are comments.  Unknown keys raise ValueError.
    """
    params = PlantParams()
    names = {f.name: f for f in dataclasses.fields(params)}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, text = line.partition("=")
            key = key.strip()
            if key not in names:
                raise ValueError(f"{path}:{lineno}: unknown plant parameter '{key}'")
            default = getattr(params, key)
            setattr(params, key, _parse_value(text, default))
    return params


def save_config(cfg: ToolkitConfig, path: str | Path) -> None:
    """Write every parameter, one section per group, key = value per line."""
    parser = configparser.ConfigParser()
    for section_field in dataclasses.fields(cfg):
        section = section_field.name
        group = getattr(cfg, section)
        parser[section] = {
            f.name: _format_value(getattr(group, f.name))
            for f in dataclasses.fields(group)
        }
    with open(path, "w") as fh:
        parser.write(fh)


def load_config(path: str | Path | None = None) -> ToolkitConfig:
    """Defaults, overridden by any keys present in the file (if given).

    Unknown sections or keys raise ValueError so typos do not silently
    fall back to defaults.
    """
    cfg = ToolkitConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise FileNotFoundError(f"config file not found: {path}")
    known = {f.name for f in dataclasses.fields(cfg)}
    for section in parser.sections():
        if section not in known:
            raise ValueError(f"unknown config section [{section}]")
        group = getattr(cfg, section)
        names = {f.name: f for f in dataclasses.fields(group)}
        for key, text in parser[section].items():
            if key not in names:
                raise ValueError(f"unknown key '{key}' in section [{section}]")
            default = getattr(group, key)
            setattr(group, key, _parse_value(text, default))
    return cfg

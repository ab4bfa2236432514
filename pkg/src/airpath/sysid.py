"""Identification of the gridded linear models from plant experiments.

At each lattice node the plant is excited with seeded random actuator
levels held for a fixed plateau, and a discrete-time model in deviation
coordinates is fit by least squares on the one-step equation error.
Fitting the whole lattice yields an
:class:`~airpath.lpv.LpvModel`; open-loop replay against recorded data
quantifies model quality per output channel.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .config import GridConfig, SysidConfig
from .lpv import LinearSubmodel, LpvModel, ModelVariant, predict_absolute
from .plant import ActuatorInput, AirpathPlant, OperatingPoint, ThermalMode

_STATE_CHANNELS = ("p_im", "egr_rate")
_INPUT_CHANNELS = ("egr_pos", "vgt_pos", "fuel_rate")

#: singular values this far below the largest count as unexcited directions
_RANK_RTOL = 1.0e-8


@dataclass
class Experiment:
    """One recorded excitation run at a fixed operating point.

    ``inputs[k]`` acts on the plant over the k-th control interval and
    ``outputs[k]`` is the measurement at its start, so rows pair up for
    one-step regression.  ``x_ss``/``u_ss`` record the equilibrium anchor
    the run was started from.
    """

    rho: OperatingPoint
    inputs: np.ndarray
    outputs: np.ndarray
    dt: float
    seed: int
    x_ss: np.ndarray
    u_ss: np.ndarray
    n_clipped: int = 0

    def __post_init__(self):
        self.inputs = np.array(self.inputs, dtype=float)
        self.outputs = np.array(self.outputs, dtype=float)
        self.x_ss = np.array(self.x_ss, dtype=float)
        self.u_ss = np.array(self.u_ss, dtype=float)
        if self.inputs.ndim != 2 or self.inputs.shape[1] not in (2, 3):
            raise ValueError(f"inputs must be (n, 2) or (n, 3), got {self.inputs.shape}")
        if self.outputs.shape != (self.inputs.shape[0], 2):
            raise ValueError(
                f"outputs must be ({self.inputs.shape[0]}, 2), got {self.outputs.shape}")
        if self.inputs.shape[0] < 200:
            raise ValueError(
                f"experiment too short: {self.inputs.shape[0]} samples < 200")
        if abs(self.dt - 0.02) > 1.0e-12:
            raise ValueError(f"experiment dt must be 0.02 s, got {self.dt}")
        if self.x_ss.shape != (2,):
            raise ValueError(f"x_ss must have shape (2,), got {self.x_ss.shape}")
        if self.u_ss.shape != (self.inputs.shape[1],):
            raise ValueError(
                f"u_ss must have shape ({self.inputs.shape[1]},), got {self.u_ss.shape}")


@dataclass
class CycleRecord:
    """Open-loop plant recording along a drive cycle.

    ``rhos[k]`` and ``inputs[k]`` act over the k-th interval, ``outputs[k]``
    is the measurement at its start (same pairing as :class:`Experiment`).
    """

    rhos: np.ndarray
    inputs: np.ndarray
    outputs: np.ndarray
    dt: float = 0.02

    def __post_init__(self):
        self.rhos = np.array(self.rhos, dtype=float)
        self.inputs = np.array(self.inputs, dtype=float)
        self.outputs = np.array(self.outputs, dtype=float)
        n = self.rhos.shape[0]
        if self.rhos.ndim != 2 or self.rhos.shape[1] != 2:
            raise ValueError(f"rhos must be (n, 2), got {self.rhos.shape}")
        if self.inputs.shape != (n, 2):
            raise ValueError(f"inputs must be ({n}, 2), got {self.inputs.shape}")
        if self.outputs.shape != (n, 2):
            raise ValueError(f"outputs must be ({n}, 2), got {self.outputs.shape}")


@dataclass(frozen=True)
class ValidationReport:
    """Per-channel statistics of the absolute open-loop replay error."""

    mean_abs_err: tuple[float, float]
    std_abs_err: tuple[float, float]
    n_samples: int

    def __str__(self):
        parts = [
            f"{name} |err| mean {m:.6g} std {s:.6g}"
            for name, m, s in zip(_STATE_CHANNELS, self.mean_abs_err,
                                  self.std_abs_err)
        ]
        return f"{'; '.join(parts)} over {self.n_samples} samples"


def generate_perturbation(rho: OperatingPoint, u_ss: ActuatorInput,
                          n_steps: int, hold: int, seed: int,
                          amplitude: float = 0.10,
                          include_fuel: bool = False,
                          fuel_amplitude: float | None = None) -> tuple[np.ndarray, int]:
    """Piecewise-constant random excitation levels around ``u_ss``.

    Each channel draws ``n_steps`` independent levels uniformly within
    ``±amplitude`` (relative) of its nominal value and holds each level for
    ``hold`` samples.  Actuator channels are clipped to [0, 100]; the
    number of clipped levels is returned alongside the series.  With
    ``include_fuel`` a third column perturbs the fuel rate around
    ``rho.fuel_rate`` using ``fuel_amplitude`` (defaults to ``amplitude``).
    """
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    if hold < 1:
        raise ValueError(f"hold must be >= 1, got {hold}")
    rng = np.random.default_rng(seed)
    base = [u_ss.egr_pos, u_ss.vgt_pos]
    if include_fuel:
        base.append(rho.fuel_rate)
    levels = np.empty((n_steps, len(base)))
    n_clipped = 0
    for c, nominal in enumerate(base):
        amp = amplitude if c < 2 else (fuel_amplitude
                                       if fuel_amplitude is not None else amplitude)
        raw = nominal * (1.0 + amp * rng.uniform(-1.0, 1.0, n_steps))
        if c < 2:
            clipped = np.clip(raw, 0.0, 100.0)
            n_clipped += int(np.count_nonzero(clipped != raw))
            raw = clipped
        levels[:, c] = raw
    return np.repeat(levels, hold, axis=0), n_clipped


def run_experiment(plant: AirpathPlant, rho: OperatingPoint,
                   u_nom: ActuatorInput, variant: ModelVariant,
                   duration: float, seed: int,
                   cfg: SysidConfig | None = None) -> Experiment:
    """Drive the plant with a perturbation run and record the data.

    The plant starts at the equilibrium for (rho, u_nom); outputs follow
    the convention that the measurement at step k reflects the input
    active over the previous interval.
    """
    cfg = cfg or SysidConfig()
    plant.validate_operating_point(rho)
    mode = (ThermalMode.TRANSIENT if variant.uses_transient_thermal
            else ThermalMode.STEADY_STATE)
    eq = plant.find_equilibrium(rho, u_nom, mode)
    y0 = plant.output(eq, u_nom, rho)
    x_ss = np.array([y0.p_im, y0.egr_rate])
    u_ss = [u_nom.egr_pos, u_nom.vgt_pos]
    if variant is ModelVariant.C:
        u_ss.append(rho.fuel_rate)

    n = round(duration / cfg.dt)
    n_steps = math.ceil(n / cfg.hold_samples)
    series, n_clipped = generate_perturbation(
        rho, u_nom, n_steps, cfg.hold_samples, seed,
        amplitude=cfg.perturb_frac, include_fuel=variant is ModelVariant.C,
        fuel_amplitude=cfg.fuel_perturb_frac)
    series = series[:n]

    outputs = np.empty((n, 2))
    state = eq
    u_prev, rho_prev = u_nom, rho
    for k in range(n):
        y = plant.output(state, u_prev, rho_prev)
        outputs[k] = (y.p_im, y.egr_rate)
        u_k = ActuatorInput(series[k, 0], series[k, 1])
        rho_k = (OperatingPoint(rho.engine_speed, series[k, 2])
                 if variant is ModelVariant.C else rho)
        state = plant.step(state, u_k, rho_k, mode, cfg.dt)
        u_prev, rho_prev = u_k, rho_k
    return Experiment(rho=rho, inputs=series, outputs=outputs, dt=cfg.dt,
                      seed=seed, x_ss=x_ss, u_ss=np.array(u_ss),
                      n_clipped=n_clipped)


def fit_submodel(experiments, variant: ModelVariant) -> LinearSubmodel:
    """Least-squares fit of the one-step equation error in deviations.

    All experiments must share the operating point and equilibrium anchor.
    A rank-deficient regressor raises with the unexcited directions named;
    an unstable fit is shrunk radially to spectral radius 0.995 with a
    warning.
    """
    experiments = list(experiments)
    if not experiments:
        raise ValueError("at least one experiment is required")
    m = variant.n_inputs
    rho = experiments[0].rho
    x_ss, u_ss = experiments[0].x_ss, experiments[0].u_ss
    phi_blocks, target_blocks = [], []
    for exp in experiments:
        if exp.rho != rho:
            raise ValueError(
                f"experiments mix operating points: {exp.rho} vs {rho}")
        if exp.inputs.shape[1] != m:
            raise ValueError(
                f"experiment has {exp.inputs.shape[1]} input channels, "
                f"variant {variant.value} needs {m}")
        if (not np.allclose(exp.x_ss, x_ss, atol=1.0e-9)
                or not np.allclose(exp.u_ss, u_ss, atol=1.0e-9)):
            raise ValueError("experiments disagree on the equilibrium anchor")
        z = exp.outputs - x_ss
        w = exp.inputs - u_ss
        phi_blocks.append(np.hstack([z[:-1], w[:-1]]))
        target_blocks.append(z[1:])
    phi = np.vstack(phi_blocks)
    target = np.vstack(target_blocks)

    _, sing, v_rows = np.linalg.svd(phi, full_matrices=False)
    tol = sing[0] * _RANK_RTOL
    weak = np.nonzero(sing <= tol)[0]
    if weak.size:
        names = _STATE_CHANNELS + _INPUT_CHANNELS[:m]
        deficient = sorted({names[int(np.argmax(np.abs(v_rows[i])))] for i in weak})
        raise ValueError(
            f"regressor rank {phi.shape[1] - weak.size} < {phi.shape[1]}: "
            f"insufficient excitation in {', '.join(deficient)}")

    theta = np.linalg.lstsq(phi, target, rcond=None)[0]
    a = theta[:2].T
    b = theta[2:].T
    radius = float(np.max(np.abs(np.linalg.eigvals(a))))
    if radius >= 1.0:
        warnings.warn(
            f"identified dynamics at ({rho.engine_speed} rpm, "
            f"{rho.fuel_rate} mm^3) have spectral radius {radius:.4f}; "
            "shrinking radially to 0.995", RuntimeWarning, stacklevel=2)
        a = a * (0.995 / radius)
    return LinearSubmodel(a=a, b=b, x_ss=x_ss, u_ss=u_ss, rho=rho)


# ------------------------------------------------------------- validation

def simulate_model(model, data) -> np.ndarray:
    """Open-loop replay of the model over recorded data.

    Starts from the record's first output sample and rolls the model
    forward under the recorded inputs (and, for a gridded model on a
    cycle record, the recorded scheduling trajectory).  Accepts a
    :class:`~airpath.lpv.LinearSubmodel` or an
    :class:`~airpath.lpv.LpvModel` against an :class:`Experiment` or a
    :class:`CycleRecord`.
    """
    is_cycle = isinstance(data, CycleRecord)
    inputs = data.inputs
    n = inputs.shape[0]
    m = model.m
    if inputs.shape[1] != m:
        if m == 3 and inputs.shape[1] == 2:
            fuel = data.rhos[:, 1] if is_cycle else np.full(n, data.rho.fuel_rate)
            inputs = np.column_stack([inputs, fuel])
        else:
            raise ValueError(
                f"data has {inputs.shape[1]} input channels, model needs {m}")

    pred = np.empty((n, 2))
    pred[0] = data.outputs[0]
    if isinstance(model, LpvModel):
        if is_cycle:
            for k in range(n - 1):
                sm = model.schedule(OperatingPoint(data.rhos[k, 0], data.rhos[k, 1]))
                pred[k + 1] = predict_absolute(sm, pred[k], inputs[k])
            return pred
        sm = model.schedule(data.rho)
    else:
        sm = model
    for k in range(n - 1):
        pred[k + 1] = predict_absolute(sm, pred[k], inputs[k])
    return pred


def error_report(pred: np.ndarray, actual: np.ndarray) -> ValidationReport:
    """Mean and standard deviation of |pred - actual| per output channel."""
    pred = np.asarray(pred, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if pred.shape != actual.shape or pred.ndim != 2 or pred.shape[1] != 2:
        raise ValueError(
            f"prediction and data shapes must match (n, 2), got "
            f"{pred.shape} vs {actual.shape}")
    err = np.abs(pred - actual)
    mean = err.mean(axis=0)
    std = err.std(axis=0)
    return ValidationReport(mean_abs_err=(float(mean[0]), float(mean[1])),
                            std_abs_err=(float(std[0]), float(std[1])),
                            n_samples=pred.shape[0])


def validate_model(model, data) -> ValidationReport:
    """Open-loop replay error statistics of a model against a record."""
    return error_report(simulate_model(model, data), data.outputs)


def record_validation_cycle(plant: AirpathPlant, model: LpvModel,
                            rhos: np.ndarray, seed: int,
                            dither_frac: float = 0.05,
                            dt: float = 0.02) -> CycleRecord:
    """Drive the plant along a cycle with dithered nominal actuators.

    At each step the scheduled nominal actuator positions are perturbed
    by a seeded uniform factor within ``±dither_frac`` and applied to the
    plant with slow wall dynamics active.  The resulting record exercises
    the whole envelope for open-loop model comparison.
    """
    rhos = np.asarray(rhos, dtype=float)
    if rhos.ndim != 2 or rhos.shape[1] != 2 or rhos.shape[0] < 2:
        raise ValueError(f"rhos must be (n >= 2, 2), got {rhos.shape}")
    rng = np.random.default_rng(seed)
    n = rhos.shape[0]
    rho0 = OperatingPoint(rhos[0, 0], rhos[0, 1])
    base0 = model.schedule(rho0).u_ss[:2]
    u_prev = ActuatorInput(base0[0], base0[1])
    rho_prev = rho0
    state = plant.find_equilibrium(rho0, u_prev, ThermalMode.TRANSIENT)

    inputs = np.empty((n, 2))
    outputs = np.empty((n, 2))
    for k in range(n):
        y = plant.output(state, u_prev, rho_prev)
        outputs[k] = (y.p_im, y.egr_rate)
        rho_k = OperatingPoint(rhos[k, 0], rhos[k, 1])
        base = model.schedule(rho_k).u_ss[:2]
        u_k = np.clip(base * (1.0 + dither_frac * rng.uniform(-1.0, 1.0, 2)),
                      0.0, 100.0)
        inputs[k] = u_k
        act = ActuatorInput(u_k[0], u_k[1])
        state = plant.step(state, act, rho_k, ThermalMode.TRANSIENT, dt)
        u_prev, rho_prev = act, rho_k
    return CycleRecord(rhos=rhos, inputs=inputs, outputs=outputs, dt=dt)


# ------------------------------------------------------------- assembly

def build_lpv_variant(variant: ModelVariant, grid, config,
                      seed: int = 0, out_path=None) -> LpvModel:
    """Identify one submodel per lattice node and assemble the model.

    ``grid`` must form a complete rectangular lattice of operating
    points.  Each node runs one training record (seed derived from
    ``seed`` and the node indices); any per-node failure aborts with the
    offending operating point named.  The assembled model is written to
    ``out_path`` when given.
    """
    points = {(p.engine_speed, p.fuel_rate) for p in grid}
    speeds = sorted({s for s, _ in points})
    fuels = sorted({f for _, f in points})
    if len(points) != len(list(grid)) or points != {
            (s, f) for s in speeds for f in fuels}:
        raise ValueError("grid must form a complete rectangular lattice "
                         "of distinct operating points")
    plant = AirpathPlant(config.plant)
    scfg = config.sysid
    rows = []
    for i, s in enumerate(speeds):
        row = []
        for j, f in enumerate(fuels):
            rho = OperatingPoint(s, f)
            egr, vgt = config.grid.nominal_actuators(s, f)
            node_seed = int(np.random.SeedSequence([seed, i, j]).generate_state(1)[0])
            try:
                exp = run_experiment(plant, rho, ActuatorInput(egr, vgt),
                                     variant, scfg.train_duration,
                                     node_seed, scfg)
                row.append(fit_submodel([exp], variant))
            except ValueError as exc:
                raise RuntimeError(
                    f"identification failed at ({s} rpm, {f} mm^3): {exc}"
                ) from exc
        rows.append(row)
    model = LpvModel(speeds, fuels, rows, variant, scfg.dt)
    if out_path is not None:
        model.save(out_path)
    return model

"""Scratch measurements for acceptance criteria 5, 7, 8 before pinning."""
import dataclasses
import time

import numpy as np

from airpath.config import ToolkitConfig
from airpath.cycles import make_cycle
from airpath.lpv import ModelVariant
from airpath.mpc import MpcConfig, MpcController
from airpath.plant import AirpathPlant, OperatingPoint, ThermalMode
from airpath.runner import run_step_test
from airpath.sysid import build_lpv_variant, record_validation_cycle, validate_model
from airpath.tables import SetpointTables, build_ff_table
from airpath.tuning import measure_step_metrics

t0 = time.perf_counter()
tc = ToolkitConfig()
plant = AirpathPlant(tc.plant)
grid = [OperatingPoint(s, f) for s in tc.grid.speed_axis for f in tc.grid.fuel_axis]
setpoints = SetpointTables.from_plant(plant, tc.grid, tc.mpc)
ff_table = build_ff_table(plant, setpoints, tc.grid, tc.harness)
model_b = build_lpv_variant(ModelVariant.B, grid, tc, seed=0)
print(f"[setup] {time.perf_counter()-t0:.1f}s")

# ---- c5: 10% mismatch, constant set-points, 20 s sim -------------------
for sign in (+1.0, -1.0):
    t0 = time.perf_counter()
    biased = AirpathPlant(dataclasses.replace(
        tc.plant, flow_bias_egr=0.10 * sign, flow_bias_thr=0.10 * sign))
    rho = OperatingPoint(2100.0, 50.0)
    u_ff = ff_table.query(rho)
    state = biased.find_equilibrium(rho, u_ff, mode=ThermalMode.TRANSIENT)
    ctrl = MpcController(model_b, MpcConfig.from_settings(tc.mpc))
    r_k = setpoints.targets(rho)
    dt = tc.mpc.dt
    n = int(round(20.0 / dt))
    u_prev = u_ff
    errs = np.empty((n, 2))
    for k in range(n):
        y = biased.output(state, u_prev, rho)
        x_k = np.array([y.p_im, y.egr_rate])
        errs[k] = x_k - r_k
        u_cmd = ctrl.step(x_k, r_k, rho, u_ff)
        state = biased.step(state, u_cmd, rho, ThermalMode.TRANSIENT, dt)
        u_prev = u_cmd
    tail = slice(n - int(round(1.0 / dt)), None)
    rel = np.abs(errs[tail]).mean(axis=0) / np.abs(r_k)
    e0 = np.abs(errs[0]) / np.abs(r_k)
    print(f"[c5 bias={sign*0.10:+.2f}] initial rel err {e0}, tail rel err {rel}, "
          f"wall {time.perf_counter()-t0:.1f}s")

# ---- c7: thermal-mode p_im response time after a fuel step --------------
t0 = time.perf_counter()
rho_from = OperatingPoint(2000.0, 45.0)
rho_to = OperatingPoint(2000.0, 70.0)
rts = {}
for mode in (ThermalMode.STEADY_STATE, ThermalMode.TRANSIENT):
    log = run_step_test(plant, rho_from, rho_to, setpoints, ff_table,
                        model=None, duration=40.0, mode=mode)
    k0 = int(np.searchsorted(log.t, 1.0))
    m = measure_step_metrics(log.x[k0:, 0], initial=log.x[k0, 0],
                             target=log.r[-1, 0], dt=log.dt)
    rts[mode.value] = m.response_time_90
    print(f"[c7 {mode.value}] rt90={m.response_time_90:.3f}s reached={m.reached} "
          f"os={m.overshoot:.4f}")
print(f"[c7] ratio={rts['transient']/rts['steady_state']:.2f} "
      f"wall {time.perf_counter()-t0:.1f}s")

# ---- c8: open-loop validation-cycle ordering ----------------------------
t0 = time.perf_counter()
model_a = build_lpv_variant(ModelVariant.A, grid, tc, seed=0)
model_c = build_lpv_variant(ModelVariant.C, grid, tc, seed=0)
print(f"[c8 models] {time.perf_counter()-t0:.1f}s")
for kind, seed in (("urban", 1234), ("urban", 5678), ("highway", 1234),
                   ("highway", 5678)):
    cyc = make_cycle(kind, 120.0, seed=seed)
    means = {}
    for name, mdl in (("A", model_a), ("B", model_b), ("C", model_c)):
        data = record_validation_cycle(plant, mdl, cyc.rhos, seed=99)
        rep = validate_model(mdl, data)
        means[name] = rep.mean_abs_err[0]
    print(f"[c8 {kind} seed={seed}] A={means['A']:.5f} B={means['B']:.5f} "
          f"C={means['C']:.5f}  B/A={means['B']/means['A']:.3f} "
          f"C/A={means['C']/means['A']:.3f}")
print(f"[c8] wall {time.perf_counter()-t0:.1f}s")

"""Identification pipeline: excitation, least-squares fit, validation."""

import numpy as np
import pytest

from airpath.config import SysidConfig, ToolkitConfig
from airpath.lpv import LinearSubmodel, LpvModel, ModelVariant
from airpath.plant import ActuatorInput, AirpathPlant, OperatingPoint
from airpath.sysid import (CycleRecord, Experiment, build_lpv_variant,
                           error_report, fit_submodel, generate_perturbation,
                           record_validation_cycle, run_experiment,
                           simulate_model, validate_model)

RHO = OperatingPoint(2000.0, 60.0)
U_NOM = ActuatorInput(40.0, 55.0)


def synth_experiment(a, b, x_ss, u_ss, seed=0, n_steps=30, hold=10,
                     z0=(0.05, -0.01)):
    """Noise-free data generated directly from a known linear model."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    x_ss = np.asarray(x_ss, dtype=float)
    u_ss = np.asarray(u_ss, dtype=float)
    include_fuel = b.shape[1] == 3
    series, _ = generate_perturbation(RHO, ActuatorInput(u_ss[0], u_ss[1]),
                                      n_steps, hold, seed,
                                      include_fuel=include_fuel)
    n = series.shape[0]
    z = np.empty((n, 2))
    z[0] = z0
    for k in range(n - 1):
        z[k + 1] = a @ z[k] + b @ (series[k] - u_ss)
    return Experiment(rho=RHO, inputs=series, outputs=x_ss + z, dt=0.02,
                      seed=seed, x_ss=x_ss, u_ss=u_ss)


class TestGeneratePerturbation:
    def test_deterministic_and_held(self):
        s1, c1 = generate_perturbation(RHO, U_NOM, 12, 25, seed=42)
        s2, c2 = generate_perturbation(RHO, U_NOM, 12, 25, seed=42)
        assert np.array_equal(s1, s2)
        assert c1 == c2
        assert s1.shape == (300, 2)
        for k in range(12):
            plateau = s1[25 * k:25 * (k + 1)]
            assert np.all(plateau == plateau[0])
        s3, _ = generate_perturbation(RHO, U_NOM, 12, 25, seed=43)
        assert not np.array_equal(s1, s3)

    def test_levels_within_relative_band(self):
        series, n_clipped = generate_perturbation(RHO, U_NOM, 200, 1, seed=1)
        assert n_clipped == 0
        assert np.all(series[:, 0] >= 36.0) and np.all(series[:, 0] <= 44.0)
        assert np.all(series[:, 1] >= 49.5) and np.all(series[:, 1] <= 60.5)

    def test_single_level_is_constant(self):
        series, _ = generate_perturbation(RHO, U_NOM, 1, 50, seed=2)
        assert series.shape == (50, 2)
        assert np.all(series == series[0])

    def test_clipping_counted_and_bounded(self):
        high = ActuatorInput(98.0, 50.0)
        series, n_clipped = generate_perturbation(RHO, high, 400, 1, seed=3)
        assert n_clipped > 0
        assert np.max(series[:, 0]) == 100.0
        assert np.all(series <= 100.0) and np.all(series >= 0.0)

    def test_fuel_channel_appends_without_changing_actuators(self):
        two, _ = generate_perturbation(RHO, U_NOM, 20, 5, seed=4)
        three, _ = generate_perturbation(RHO, U_NOM, 20, 5, seed=4,
                                         include_fuel=True)
        assert three.shape == (100, 3)
        assert np.array_equal(three[:, :2], two)
        assert np.all(three[:, 2] >= 54.0) and np.all(three[:, 2] <= 66.0)

    def test_bad_arguments_raise(self):
        with pytest.raises(ValueError, match="n_steps"):
            generate_perturbation(RHO, U_NOM, 0, 10, seed=0)
        with pytest.raises(ValueError, match="hold"):
            generate_perturbation(RHO, U_NOM, 10, 0, seed=0)


class TestExperimentRecord:
    def test_too_short_rejected(self):
        with pytest.raises(ValueError, match="too short"):
            Experiment(rho=RHO, inputs=np.zeros((150, 2)),
                       outputs=np.zeros((150, 2)), dt=0.02, seed=0,
                       x_ss=np.zeros(2), u_ss=np.zeros(2))

    def test_wrong_dt_rejected(self):
        with pytest.raises(ValueError, match="dt"):
            Experiment(rho=RHO, inputs=np.zeros((250, 2)),
                       outputs=np.zeros((250, 2)), dt=0.01, seed=0,
                       x_ss=np.zeros(2), u_ss=np.zeros(2))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="outputs"):
            Experiment(rho=RHO, inputs=np.zeros((250, 2)),
                       outputs=np.zeros((240, 2)), dt=0.02, seed=0,
                       x_ss=np.zeros(2), u_ss=np.zeros(2))
        with pytest.raises(ValueError, match="u_ss"):
            Experiment(rho=RHO, inputs=np.zeros((250, 3)),
                       outputs=np.zeros((250, 2)), dt=0.02, seed=0,
                       x_ss=np.zeros(2), u_ss=np.zeros(2))


class TestFitSubmodel:
    A_TRUE = np.array([[0.85, 0.10], [-0.05, 0.70]])
    B_TRUE = np.array([[0.004, -0.006], [0.0010, 0.0008]])
    X_SS = np.array([1.44, 0.23])
    U_SS = np.array([40.0, 55.0])

    def test_recovers_known_model_exactly(self):
        exp = synth_experiment(self.A_TRUE, self.B_TRUE, self.X_SS, self.U_SS,
                               seed=10)
        sm = fit_submodel([exp], ModelVariant.B)
        assert np.allclose(sm.a, self.A_TRUE, atol=1.0e-6)
        assert np.allclose(sm.b, self.B_TRUE, atol=1.0e-6)
        assert np.array_equal(sm.x_ss, self.X_SS)
        assert np.array_equal(sm.u_ss, self.U_SS)
        assert sm.rho == RHO

    def test_recovers_three_input_model(self):
        b3 = np.column_stack([self.B_TRUE, [0.002, -0.0005]])
        exp = synth_experiment(self.A_TRUE, b3, self.X_SS,
                               np.append(self.U_SS, RHO.fuel_rate), seed=11)
        sm = fit_submodel([exp], ModelVariant.C)
        assert sm.m == 3
        assert np.allclose(sm.a, self.A_TRUE, atol=1.0e-6)
        assert np.allclose(sm.b, b3, atol=1.0e-6)

    def test_multiple_experiments_pool_samples(self):
        exps = [synth_experiment(self.A_TRUE, self.B_TRUE, self.X_SS,
                                 self.U_SS, seed=s) for s in (20, 21)]
        sm = fit_submodel(exps, ModelVariant.B)
        assert np.allclose(sm.a, self.A_TRUE, atol=1.0e-6)

    def test_constant_inputs_flag_input_channels(self):
        series = np.tile([40.0, 55.0], (300, 1))
        z = np.empty((300, 2))
        z[0] = (0.05, -0.01)
        for k in range(299):
            z[k + 1] = self.A_TRUE @ z[k]
        exp = Experiment(rho=RHO, inputs=series, outputs=self.X_SS + z,
                         dt=0.02, seed=0, x_ss=self.X_SS, u_ss=self.U_SS)
        with pytest.raises(ValueError, match="insufficient excitation") as err:
            fit_submodel([exp], ModelVariant.B)
        assert "egr_pos" in str(err.value) and "vgt_pos" in str(err.value)

    def test_single_dead_channel_named(self):
        series, _ = generate_perturbation(RHO, U_NOM, 30, 10, seed=12)
        series[:, 1] = self.U_SS[1]     # vgt never moves
        n = series.shape[0]
        z = np.empty((n, 2))
        z[0] = (0.05, -0.01)
        for k in range(n - 1):
            z[k + 1] = self.A_TRUE @ z[k] + self.B_TRUE @ (series[k] - self.U_SS)
        exp = Experiment(rho=RHO, inputs=series, outputs=self.X_SS + z,
                         dt=0.02, seed=0, x_ss=self.X_SS, u_ss=self.U_SS)
        with pytest.raises(ValueError, match="insufficient excitation") as err:
            fit_submodel([exp], ModelVariant.B)
        assert "vgt_pos" in str(err.value)
        assert "egr_pos" not in str(err.value)

    def test_unstable_fit_shrunk_with_warning(self):
        a_unstable = np.array([[1.02, 0.0], [0.0, 0.5]])
        exp = synth_experiment(a_unstable, self.B_TRUE, self.X_SS, self.U_SS,
                               seed=13, z0=(1.0e-3, 1.0e-3))
        with pytest.warns(RuntimeWarning, match="shrinking radially"):
            sm = fit_submodel([exp], ModelVariant.B)
        radius = np.max(np.abs(np.linalg.eigvals(sm.a)))
        assert radius == pytest.approx(0.995, abs=1.0e-6)
        assert np.allclose(sm.a, a_unstable * (0.995 / 1.02), atol=1.0e-5)

    def test_mixed_operating_points_rejected(self):
        e1 = synth_experiment(self.A_TRUE, self.B_TRUE, self.X_SS, self.U_SS)
        e2 = synth_experiment(self.A_TRUE, self.B_TRUE, self.X_SS, self.U_SS)
        e2.rho = OperatingPoint(2500.0, 60.0)
        with pytest.raises(ValueError, match="operating points"):
            fit_submodel([e1, e2], ModelVariant.B)

    def test_variant_width_mismatch_rejected(self):
        exp = synth_experiment(self.A_TRUE, self.B_TRUE, self.X_SS, self.U_SS)
        with pytest.raises(ValueError, match="input channels"):
            fit_submodel([exp], ModelVariant.C)

    def test_empty_list_rejected(self):
        with pytest.raises(ValueError, match="at least one"):
            fit_submodel([], ModelVariant.B)


class TestValidation:
    def test_error_report_identities(self):
        data = np.random.default_rng(30).uniform(0.0, 2.0, (400, 2))
        zero = error_report(data, data)
        assert zero.mean_abs_err == (0.0, 0.0)
        assert zero.std_abs_err == (0.0, 0.0)
        assert zero.n_samples == 400
        shifted = data + np.array([0.1, 0.0])
        rep = error_report(shifted, data)
        assert rep.mean_abs_err[0] == pytest.approx(0.1, abs=1.0e-12)
        assert rep.std_abs_err[0] == pytest.approx(0.0, abs=1.0e-12)
        assert rep.mean_abs_err[1] == 0.0

    def test_error_report_shape_mismatch(self):
        with pytest.raises(ValueError, match="match"):
            error_report(np.zeros((10, 2)), np.zeros((11, 2)))

    def test_true_model_replays_own_data(self):
        fit = TestFitSubmodel
        exp = synth_experiment(fit.A_TRUE, fit.B_TRUE, fit.X_SS, fit.U_SS,
                               seed=31)
        truth = LinearSubmodel(a=fit.A_TRUE, b=fit.B_TRUE, x_ss=fit.X_SS,
                               u_ss=fit.U_SS, rho=RHO)
        rep = validate_model(truth, exp)
        assert max(rep.mean_abs_err) < 1.0e-10
        assert rep.n_samples == exp.outputs.shape[0]

    def test_fuel_column_added_for_three_input_model(self):
        fit = TestFitSubmodel
        b3 = np.column_stack([fit.B_TRUE, [0.002, -0.0005]])
        truth = LinearSubmodel(a=fit.A_TRUE, b=b3, x_ss=fit.X_SS,
                               u_ss=np.append(fit.U_SS, 60.0), rho=RHO)
        rng = np.random.default_rng(32)
        n = 300
        rhos = np.column_stack([np.full(n, 2000.0), np.full(n, 60.0)])
        inputs = fit.U_SS + rng.uniform(-3.0, 3.0, (n, 2))
        outputs = np.empty((n, 2))
        outputs[0] = fit.X_SS
        for k in range(n - 1):
            z = outputs[k] - fit.X_SS
            w = inputs[k] - fit.U_SS
            outputs[k + 1] = fit.X_SS + fit.A_TRUE @ z + fit.B_TRUE @ w
        rec = CycleRecord(rhos=rhos, inputs=inputs, outputs=outputs)
        # the fuel deviation is identically zero along the record, so the
        # three-input replay must agree with the two-input dynamics
        rep = validate_model(truth, rec)
        assert max(rep.mean_abs_err) < 1.0e-10

    def test_width_mismatch_rejected(self):
        fit = TestFitSubmodel
        truth = LinearSubmodel(a=fit.A_TRUE, b=fit.B_TRUE, x_ss=fit.X_SS,
                               u_ss=fit.U_SS, rho=RHO)
        exp = synth_experiment(fit.A_TRUE,
                               np.column_stack([fit.B_TRUE, [0.001, 0.001]]),
                               fit.X_SS, np.append(fit.U_SS, 60.0), seed=33)
        with pytest.raises(ValueError, match="input channels"):
            simulate_model(truth, exp)

    def test_cycle_record_shapes_checked(self):
        with pytest.raises(ValueError, match="inputs"):
            CycleRecord(rhos=np.zeros((10, 2)), inputs=np.zeros((9, 2)),
                        outputs=np.zeros((10, 2)))


@pytest.fixture(scope="module")
def plant():
    return AirpathPlant()


@pytest.fixture(scope="module")
def small_config():
    cfg = ToolkitConfig()
    cfg.sysid = SysidConfig(train_duration=30.0, val_duration=10.0)
    return cfg


class TestPlantExperiments:
    def test_run_starts_at_equilibrium(self, plant):
        exp = run_experiment(plant, RHO, U_NOM, ModelVariant.B,
                             duration=5.0, seed=50)
        assert exp.outputs.shape == (250, 2)
        assert np.array_equal(exp.outputs[0], exp.x_ss)
        assert np.array_equal(exp.u_ss, [U_NOM.egr_pos, U_NOM.vgt_pos])
        # perturbation band keeps the plant near the anchor
        assert np.max(np.abs(exp.outputs[:, 0] - exp.x_ss[0])) < 0.5
        assert np.max(np.abs(exp.outputs[:, 1] - exp.x_ss[1])) < 0.2

    def test_run_is_deterministic(self, plant):
        e1 = run_experiment(plant, RHO, U_NOM, ModelVariant.B, 5.0, seed=51)
        e2 = run_experiment(plant, RHO, U_NOM, ModelVariant.B, 5.0, seed=51)
        assert np.array_equal(e1.inputs, e2.inputs)
        assert np.array_equal(e1.outputs, e2.outputs)

    def test_thermal_mode_changes_data(self, plant):
        ea = run_experiment(plant, RHO, U_NOM, ModelVariant.A, 5.0, seed=52)
        eb = run_experiment(plant, RHO, U_NOM, ModelVariant.B, 5.0, seed=52)
        assert np.array_equal(ea.inputs, eb.inputs)
        assert not np.allclose(ea.outputs, eb.outputs, atol=1.0e-6)

    def test_fuel_perturbed_for_variant_c(self, plant):
        ec = run_experiment(plant, RHO, U_NOM, ModelVariant.C, 5.0, seed=53)
        assert ec.inputs.shape[1] == 3
        assert ec.u_ss[2] == RHO.fuel_rate
        assert np.ptp(ec.inputs[:, 2]) > 1.0

    def test_fitted_plant_model_predicts(self, plant):
        exp = run_experiment(plant, RHO, U_NOM, ModelVariant.B, 30.0, seed=54)
        sm = fit_submodel([exp], ModelVariant.B)
        assert np.max(np.abs(np.linalg.eigvals(sm.a))) < 1.0
        rep = validate_model(sm, exp)
        # replay error well below the excursion scale on both channels
        assert rep.mean_abs_err[0] < 0.02
        assert rep.mean_abs_err[1] < 0.02


class TestValidationCycle:
    def test_nominal_inputs_hold_equilibrium(self, plant, small_config):
        model = build_lpv_variant(
            ModelVariant.B,
            [OperatingPoint(s, f) for s in (1500.0, 2500.0)
             for f in (45.0, 70.0)],
            small_config, seed=60)
        n = 100
        rhos = np.tile([2000.0, 57.5], (n, 1))
        rec = record_validation_cycle(plant, model, rhos, seed=61,
                                      dither_frac=0.0)
        assert np.max(np.abs(rec.outputs[:, 0] - rec.outputs[0, 0])) < 1.0e-5
        assert np.max(np.abs(rec.outputs[:, 1] - rec.outputs[0, 1])) < 1.0e-5

    def test_dither_is_seeded_and_bounded(self, plant, small_config):
        model = build_lpv_variant(
            ModelVariant.B,
            [OperatingPoint(s, f) for s in (1500.0, 2500.0)
             for f in (45.0, 70.0)],
            small_config, seed=60)
        rhos = np.column_stack([np.linspace(1500.0, 2500.0, 150),
                                np.linspace(45.0, 70.0, 150)])
        r1 = record_validation_cycle(plant, model, rhos, seed=62)
        r2 = record_validation_cycle(plant, model, rhos, seed=62)
        assert np.array_equal(r1.inputs, r2.inputs)
        assert np.array_equal(r1.outputs, r2.outputs)
        for k in (0, 75, 149):
            base = model.schedule(OperatingPoint(rhos[k, 0], rhos[k, 1])).u_ss
            assert np.all(np.abs(r1.inputs[k] - base[:2]) <= 0.05 * base[:2] + 1e-12)


class TestBuildVariant:
    def test_small_lattice_end_to_end(self, small_config, tmp_path):
        grid = [OperatingPoint(s, f) for s in (1500.0, 2000.0)
                for f in (45.0, 70.0)]
        out = tmp_path / "variant_b.json"
        model = build_lpv_variant(ModelVariant.B, grid, small_config,
                                  seed=70, out_path=out)
        assert model.speed_axis == (1500.0, 2000.0)
        assert model.fuel_axis == (45.0, 70.0)
        assert model.variant is ModelVariant.B
        assert model.m == 2
        reloaded = LpvModel.load(out)
        assert np.array_equal(reloaded.submodels[0][0].a,
                              model.submodels[0][0].a)
        # anchors come from the nominal actuator schedule
        egr, vgt = small_config.grid.nominal_actuators(2000.0, 45.0)
        sm = model.schedule(OperatingPoint(2000.0, 45.0))
        assert sm.u_ss[0] == egr and sm.u_ss[1] == vgt

    def test_incomplete_lattice_rejected(self, small_config):
        grid = [OperatingPoint(1500.0, 45.0), OperatingPoint(1500.0, 70.0),
                OperatingPoint(2000.0, 45.0)]
        with pytest.raises(ValueError, match="rectangular"):
            build_lpv_variant(ModelVariant.B, grid, small_config)

    def test_node_failure_names_operating_point(self, small_config):
        cfg = ToolkitConfig()
        cfg.sysid = SysidConfig(train_duration=10.0, perturb_frac=0.0)
        grid = [OperatingPoint(s, f) for s in (1500.0, 2000.0)
                for f in (45.0, 70.0)]
        with pytest.raises(RuntimeError, match=r"1500.* rpm, 45"):
            build_lpv_variant(ModelVariant.B, grid, cfg, seed=71)

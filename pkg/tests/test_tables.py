"""Tests for the set-point and feedforward lattice tables."""
import numpy as np
import pytest

from airpath.config import GridConfig, HarnessConfig, MpcSettings
from airpath.plant import ActuatorInput, AirpathPlant, OperatingPoint
from airpath.tables import FeedforwardTable, SetpointTables, build_ff_table


def steady_outputs(plant, rho, u):
    eq = plant.find_equilibrium(rho, u)
    y = plant.output(eq, u, rho)
    return np.array([y.p_im, y.egr_rate])


class TestSetpointTables:
    def test_node_targets_match_direct_equilibrium(self, plant, setpoints,
                                                   toolkit_config):
        grid = toolkit_config.grid
        for i, j in [(0, 0), (2, 1), (4, 3)]:
            s, f = grid.speed_axis[i], grid.fuel_axis[j]
            u = ActuatorInput(grid.egr_nom[i][j], grid.vgt_nom[i][j])
            y = steady_outputs(plant, OperatingPoint(s, f), u)
            tgt = setpoints.targets(OperatingPoint(s, f))
            assert tgt == pytest.approx(y, abs=1e-12)

    def test_targets_inside_controller_bounds(self, setpoints,
                                              toolkit_config):
        settings = toolkit_config.mpc
        rng = np.random.default_rng(7)
        for _ in range(200):
            rho = OperatingPoint(rng.uniform(800.0, 3200.0),
                                 rng.uniform(10.0, 110.0))
            tgt = setpoints.targets(rho)
            assert np.all(tgt > np.asarray(settings.x_min))
            assert np.all(tgt < np.asarray(settings.x_max))

    def test_midpoint_is_corner_mean(self, setpoints):
        s_ax, f_ax = setpoints.speed_axis, setpoints.fuel_axis
        rho = OperatingPoint((s_ax[0] + s_ax[1]) / 2.0,
                             (f_ax[0] + f_ax[1]) / 2.0)
        expected = np.array([setpoints.p_im[:2, :2].mean(),
                             setpoints.chi_egr[:2, :2].mean()])
        assert setpoints.targets(rho) == pytest.approx(expected, rel=1e-12)

    def test_queries_clamp_to_lattice(self, setpoints):
        low = setpoints.targets(OperatingPoint(500.0, 5.0))
        corner = setpoints.targets(OperatingPoint(1000.0, 20.0))
        assert low == pytest.approx(corner, abs=0.0)
        high = setpoints.targets(OperatingPoint(5000.0, 200.0))
        corner = setpoints.targets(OperatingPoint(3000.0, 95.0))
        assert high == pytest.approx(corner, abs=0.0)

    def test_json_roundtrip(self, setpoints, tmp_path):
        path = tmp_path / "setpoints.json"
        setpoints.save(path)
        loaded = SetpointTables.load(path)
        assert loaded.speed_axis == setpoints.speed_axis
        assert loaded.fuel_axis == setpoints.fuel_axis
        assert np.array_equal(loaded.p_im, setpoints.p_im)
        assert np.array_equal(loaded.chi_egr, setpoints.chi_egr)

    def test_unsupported_format_version_rejected(self, setpoints, tmp_path):
        path = tmp_path / "setpoints.json"
        setpoints.save(path)
        doc = path.read_text().replace('"format_version": 1',
                                       '"format_version": 99')
        path.write_text(doc)
        with pytest.raises(ValueError, match="format version"):
            SetpointTables.load(path)

    def test_bad_axes_rejected(self):
        with pytest.raises(ValueError, match="speed_axis"):
            SetpointTables((2000.0, 1000.0), (20.0, 45.0),
                           np.ones((2, 2)), np.ones((2, 2)))
        with pytest.raises(ValueError, match="fuel_axis"):
            SetpointTables((1000.0, 2000.0), (45.0,),
                           np.ones((2, 1)), np.ones((2, 1)))

    def test_wrong_table_shape_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            SetpointTables((1000.0, 2000.0), (20.0, 45.0),
                           np.ones((3, 2)), np.ones((2, 2)))

    def test_out_of_bounds_targets_rejected(self, plant, toolkit_config):
        tight = MpcSettings(x_max=(1.2, 0.6))
        with pytest.raises(ValueError, match="rpm"):
            SetpointTables.from_plant(plant, toolkit_config.grid, tight)


class TestFeedforwardTable:
    def test_node_query_returns_table_entry(self, ff_table):
        rho = OperatingPoint(ff_table.speed_axis[1], ff_table.fuel_axis[2])
        u = ff_table.query(rho)
        assert u.egr_pos == ff_table.egr_pos[1, 2]
        assert u.vgt_pos == ff_table.vgt_pos[1, 2]

    def test_entries_are_valid_positions(self, ff_table):
        assert np.all(ff_table.egr_pos >= 0.0)
        assert np.all(ff_table.egr_pos <= 100.0)
        assert np.all(ff_table.vgt_pos >= 0.0)
        assert np.all(ff_table.vgt_pos <= 100.0)

    def test_out_of_range_entries_rejected(self):
        with pytest.raises(ValueError, match=r"\[0, 100\]"):
            FeedforwardTable((1000.0, 2000.0), (20.0, 45.0),
                             [[150.0, 40.0], [40.0, 40.0]],
                             np.full((2, 2), 55.0))

    def test_json_roundtrip(self, ff_table, tmp_path):
        path = tmp_path / "ff.json"
        ff_table.save(path)
        loaded = FeedforwardTable.load(path)
        assert loaded.speed_axis == ff_table.speed_axis
        assert np.array_equal(loaded.egr_pos, ff_table.egr_pos)
        assert np.array_equal(loaded.vgt_pos, ff_table.vgt_pos)


class TestBuildFfTable:
    def test_nodes_hit_targets_within_solve_band(self, plant, setpoints,
                                                 ff_table, toolkit_config):
        tol = toolkit_config.harness.ff_solve_rel_tol
        for i in (0, 2, 4):
            for j in (0, 3):
                rho = OperatingPoint(setpoints.speed_axis[i],
                                     setpoints.fuel_axis[j])
                y = steady_outputs(plant, rho, ff_table.query(rho))
                tgt = setpoints.targets(rho)
                rel = np.max(np.abs(y - tgt) / np.maximum(np.abs(tgt), 1e-6))
                assert rel <= tol + 1e-12

    def test_midcell_open_loop_bias_is_bounded(self, plant, setpoints,
                                               ff_table):
        # bilinear tables cannot cancel the plant's curvature between
        # nodes; the residual open-loop bias stays under 10% and is what
        # the feedback loop exists to remove
        worst = 0.0
        for s in (1250.0, 2250.0, 2750.0):
            for f in (32.5, 82.5):
                rho = OperatingPoint(s, f)
                y = steady_outputs(plant, rho, ff_table.query(rho))
                tgt = setpoints.targets(rho)
                worst = max(worst, float(np.max(
                    np.abs(y - tgt) / np.maximum(np.abs(tgt), 1e-6))))
        assert worst < 0.10

    def test_unreachable_target_names_node(self, plant, setpoints,
                                           toolkit_config):
        p_im = setpoints.p_im.copy()
        p_im[0, 0] = 5.0
        bad = SetpointTables(setpoints.speed_axis, setpoints.fuel_axis,
                             p_im, setpoints.chi_egr)
        with pytest.raises(RuntimeError, match=r"1000 rpm, 20 mm\^3"):
            build_ff_table(plant, bad, toolkit_config.grid,
                           toolkit_config.harness)

    def test_lattice_mismatch_rejected(self, plant, toolkit_config):
        small = SetpointTables((1000.0, 2000.0), (20.0, 45.0),
                               np.full((2, 2), 1.4), np.full((2, 2), 0.2))
        with pytest.raises(ValueError, match="lattice"):
            build_ff_table(plant, small, toolkit_config.grid,
                           toolkit_config.harness)

    def test_inversion_recovers_perturbed_start(self, plant, setpoints,
                                                toolkit_config):
        # start the Newton iteration away from the nominal positions and
        # check it still lands on actuators that reproduce the targets
        grid = toolkit_config.grid
        shifted = GridConfig(
            egr_nom=tuple(tuple(min(v + 6.0, 100.0) for v in row)
                          for row in grid.egr_nom),
            vgt_nom=tuple(tuple(max(v - 6.0, 0.0) for v in row)
                          for row in grid.vgt_nom))
        table = build_ff_table(plant, setpoints, shifted,
                               toolkit_config.harness)
        tol = toolkit_config.harness.ff_solve_rel_tol
        for i, j in [(0, 0), (2, 2), (4, 3)]:
            rho = OperatingPoint(grid.speed_axis[i], grid.fuel_axis[j])
            y = steady_outputs(plant, rho, table.query(rho))
            tgt = setpoints.targets(rho)
            rel = np.max(np.abs(y - tgt) / np.maximum(np.abs(tgt), 1e-6))
            assert rel <= tol + 1e-12

"""Scheduled-model lattice: interpolation, predictors, persistence."""

import csv
import json

import numpy as np
import pytest

from airpath.lpv import (LinearSubmodel, LpvModel, ModelVariant,
                         predict_absolute, predict_rate)
from airpath.plant import OperatingPoint

SPEEDS = (1000.0, 2000.0, 3000.0)
FUELS = (20.0, 60.0, 100.0)


def affine_parts(s, f):
    """Node data as affine functions of the coordinates.

    Bilinear interpolation reproduces any affine function exactly, which
    gives a closed-form oracle for scheduling at arbitrary points.
    """
    a = np.array([[0.30 + 1.0e-4 * s, 0.05 * f / 100.0],
                  [-0.10 + 2.0e-5 * f, 0.20 + 1.0e-4 * f]])
    b = np.array([[0.01 + 1.0e-6 * s, -0.02 + 1.0e-4 * f],
                  [0.003 + 2.0e-5 * f, 0.001 + 1.0e-6 * s]])
    x_ss = np.array([1.0 + s / 10000.0 + f / 1000.0, 0.05 + f / 2000.0])
    u_ss = np.array([30.0 + f / 10.0, 40.0 + s / 100.0])
    return a, b, x_ss, u_ss


def make_affine_model():
    rows = []
    for s in SPEEDS:
        row = []
        for f in FUELS:
            a, b, x_ss, u_ss = affine_parts(s, f)
            row.append(LinearSubmodel(a=a, b=b, x_ss=x_ss, u_ss=u_ss,
                                      rho=OperatingPoint(s, f)))
        rows.append(row)
    return LpvModel(SPEEDS, FUELS, rows, ModelVariant.B)


def make_random_model(seed=7, m=2, variant=ModelVariant.B):
    rng = np.random.default_rng(seed)
    rows = []
    for s in SPEEDS:
        row = []
        for f in FUELS:
            a = 0.4 * rng.uniform(-1.0, 1.0, (2, 2))
            b = rng.uniform(-1.0, 1.0, (2, m))
            row.append(LinearSubmodel(
                a=a, b=b, x_ss=rng.uniform(1.0, 2.0, 2),
                u_ss=rng.uniform(20.0, 80.0, m), rho=OperatingPoint(s, f)))
        rows.append(row)
    return LpvModel(SPEEDS, FUELS, rows, variant)


def bilinear_oracle(model, s, f):
    """Scalar-loop bilinear interpolation, independent of the implementation."""
    s_ax, f_ax = model.speed_axis, model.fuel_axis
    s = min(max(s, s_ax[0]), s_ax[-1])
    f = min(max(f, f_ax[0]), f_ax[-1])
    i = max(0, min(int(np.searchsorted(s_ax, s, side="right")) - 1, len(s_ax) - 2))
    j = max(0, min(int(np.searchsorted(f_ax, f, side="right")) - 1, len(f_ax) - 2))
    ts = (s - s_ax[i]) / (s_ax[i + 1] - s_ax[i])
    tf = (f - f_ax[j]) / (f_ax[j + 1] - f_ax[j])
    out = []
    for attr in ("a", "b", "x_ss", "u_ss"):
        g = [[np.asarray(getattr(model.submodels[i + di][j + dj], attr))
              for dj in (0, 1)] for di in (0, 1)]
        acc = np.zeros_like(g[0][0])
        for di, ws in ((0, 1.0 - ts), (1, ts)):
            for dj, wf in ((0, 1.0 - tf), (1, tf)):
                acc = acc + ws * wf * g[di][dj]
        out.append(acc)
    return out


class TestScheduling:
    def test_node_is_bit_exact(self):
        model = make_random_model()
        for i, s in enumerate(SPEEDS):
            for j, f in enumerate(FUELS):
                sm = model.schedule(OperatingPoint(s, f))
                stored = model.submodels[i][j]
                assert np.array_equal(sm.a, stored.a)
                assert np.array_equal(sm.b, stored.b)
                assert np.array_equal(sm.x_ss, stored.x_ss)
                assert np.array_equal(sm.u_ss, stored.u_ss)

    def test_affine_lattice_reproduced_exactly(self):
        model = make_affine_model()
        rng = np.random.default_rng(3)
        for _ in range(50):
            s = rng.uniform(SPEEDS[0], SPEEDS[-1])
            f = rng.uniform(FUELS[0], FUELS[-1])
            sm = model.schedule(OperatingPoint(s, f))
            a, b, x_ss, u_ss = affine_parts(s, f)
            assert np.allclose(sm.a, a, atol=1.0e-12)
            assert np.allclose(sm.b, b, atol=1.0e-12)
            assert np.allclose(sm.x_ss, x_ss, atol=1.0e-12)
            assert np.allclose(sm.u_ss, u_ss, atol=1.0e-10)

    def test_matches_scalar_loop_oracle(self):
        model = make_random_model(seed=11)
        rng = np.random.default_rng(4)
        for _ in range(50):
            s = rng.uniform(500.0, 3500.0)   # includes out-of-lattice points
            f = rng.uniform(0.0, 120.0)
            sm = model.schedule(OperatingPoint(s, f))
            a, b, x_ss, u_ss = bilinear_oracle(model, s, f)
            assert np.allclose(sm.a, a, atol=1.0e-13)
            assert np.allclose(sm.b, b, atol=1.0e-13)
            assert np.allclose(sm.x_ss, x_ss, atol=1.0e-13)
            assert np.allclose(sm.u_ss, u_ss, atol=1.0e-13)

    def test_cell_midpoint_is_corner_mean(self):
        model = make_random_model(seed=5)
        sm = model.schedule(OperatingPoint(1500.0, 40.0))
        corners = [model.submodels[i][j] for i in (0, 1) for j in (0, 1)]
        mean_a = sum(c.a for c in corners) / 4.0
        mean_b = sum(c.b for c in corners) / 4.0
        assert np.allclose(sm.a, mean_a, atol=1.0e-14)
        assert np.allclose(sm.b, mean_b, atol=1.0e-14)

    def test_out_of_lattice_clamps_to_boundary(self):
        model = make_random_model(seed=6)
        far = model.schedule(OperatingPoint(5000.0, -10.0))
        corner = model.schedule(OperatingPoint(3000.0, 20.0))
        assert np.array_equal(far.a, corner.a)
        assert np.array_equal(far.b, corner.b)
        assert np.array_equal(far.x_ss, corner.x_ss)
        edge = model.schedule(OperatingPoint(2500.0, 300.0))
        ref = model.schedule(OperatingPoint(2500.0, 100.0))
        assert np.allclose(edge.a, ref.a, atol=0.0)

    def test_continuity_across_cell_boundary(self):
        model = make_random_model(seed=8)
        for f in (37.0, 81.5):
            at_edge = model.schedule(OperatingPoint(2000.0, f))
            # on an interior node line the result must collapse to a 1-D
            # interpolation along that row, whichever cell is used
            j = 0 if f < FUELS[1] else 1
            tf = (f - FUELS[j]) / (FUELS[j + 1] - FUELS[j])
            a_row = ((1.0 - tf) * model.submodels[1][j].a
                     + tf * model.submodels[1][j + 1].a)
            assert np.allclose(at_edge.a, a_row, atol=1.0e-12)

    def test_boundary_agrees_between_adjacent_cells(self):
        model = make_random_model(seed=9)
        eps = 1.0e-9
        for s_edge in (2000.0,):
            below = model.schedule(OperatingPoint(s_edge - eps, 45.0))
            above = model.schedule(OperatingPoint(s_edge + eps, 45.0))
            assert np.allclose(below.a, above.a, atol=1.0e-10)
            assert np.allclose(below.x_ss, above.x_ss, atol=1.0e-10)


class TestPredictors:
    def test_absolute_matches_scalar_loop(self):
        model = make_random_model(seed=12)
        rng = np.random.default_rng(13)
        for _ in range(200):
            sm = model.schedule(OperatingPoint(rng.uniform(1000, 3000),
                                               rng.uniform(20, 100)))
            x = rng.uniform(0.5, 2.5, 2)
            u = rng.uniform(0.0, 100.0, 2)
            expect = np.array(sm.x_ss, copy=True)
            for r in range(2):
                for c in range(2):
                    expect[r] += sm.a[r, c] * (x[c] - sm.x_ss[c])
                    expect[r] += sm.b[r, c] * (u[c] - sm.u_ss[c])
            got = predict_absolute(sm, x, u)
            assert np.allclose(got, expect, atol=1.0e-12)

    def test_rate_matches_scalar_loop(self):
        model = make_random_model(seed=14)
        rng = np.random.default_rng(15)
        sm = model.schedule(OperatingPoint(1700.0, 55.0))
        for _ in range(200):
            dx = rng.uniform(-0.2, 0.2, 2)
            du = rng.uniform(-5.0, 5.0, 2)
            expect = np.zeros(2)
            for r in range(2):
                for c in range(2):
                    expect[r] += sm.a[r, c] * dx[c] + sm.b[r, c] * du[c]
            assert np.allclose(predict_rate(sm, dx, du), expect, atol=1.0e-12)

    def test_rate_and_absolute_are_consistent(self):
        model = make_random_model(seed=16)
        rng = np.random.default_rng(17)
        for _ in range(1000):
            sm = model.schedule(OperatingPoint(rng.uniform(1000, 3000),
                                               rng.uniform(20, 100)))
            dx = rng.uniform(-0.3, 0.3, 2)
            du = rng.uniform(-8.0, 8.0, 2)
            via_abs = predict_absolute(sm, sm.x_ss + dx, sm.u_ss + du) - sm.x_ss
            assert np.allclose(via_abs, predict_rate(sm, dx, du), atol=1.0e-12)

    def test_equilibrium_is_fixed_point(self):
        model = make_random_model(seed=18)
        sm = model.schedule(OperatingPoint(2000.0, 60.0))
        assert np.array_equal(predict_absolute(sm, sm.x_ss, sm.u_ss), sm.x_ss)
        assert np.array_equal(predict_rate(sm, np.zeros(2), np.zeros(2)),
                              np.zeros(2))

    def test_three_input_zero_fuel_delta_projects(self):
        model = make_random_model(seed=19, m=3, variant=ModelVariant.C)
        sm = model.schedule(OperatingPoint(1400.0, 75.0))
        rng = np.random.default_rng(20)
        for _ in range(100):
            dx = rng.uniform(-0.2, 0.2, 2)
            du2 = rng.uniform(-5.0, 5.0, 2)
            full = predict_rate(sm, dx, np.append(du2, 0.0))
            projected = sm.a @ dx + sm.b[:, :2] @ du2
            assert np.allclose(full, projected, atol=1.0e-13)

    def test_dimension_mismatch_raises(self):
        model = make_random_model(seed=21)
        sm = model.schedule(OperatingPoint(2000.0, 60.0))
        with pytest.raises(ValueError, match="shape"):
            predict_absolute(sm, [1.0, 2.0, 3.0], [1.0, 2.0])
        with pytest.raises(ValueError, match="shape"):
            predict_absolute(sm, [1.0, 2.0], [1.0, 2.0, 3.0])
        with pytest.raises(ValueError, match="shape"):
            predict_rate(sm, [0.1], [0.0, 0.0])


class TestConstruction:
    def test_axis_must_increase(self):
        model = make_random_model(seed=22)
        with pytest.raises(ValueError, match="increasing"):
            LpvModel((3000.0, 2000.0, 1000.0), FUELS,
                     model.submodels[::-1], ModelVariant.B)

    def test_lattice_shape_checked(self):
        model = make_random_model(seed=23)
        with pytest.raises(ValueError, match="lattice"):
            LpvModel(SPEEDS, FUELS, model.submodels[:2], ModelVariant.B)

    def test_anchor_mismatch_rejected(self):
        model = make_random_model(seed=24)
        rows = [list(r) for r in model.submodels]
        rows[0][0], rows[0][1] = rows[0][1], rows[0][0]
        with pytest.raises(ValueError, match="anchored"):
            LpvModel(SPEEDS, FUELS, rows, ModelVariant.B)

    def test_unstable_submodel_rejected(self):
        with pytest.raises(ValueError, match="spectral radius"):
            LinearSubmodel(a=[[1.01, 0.0], [0.0, 0.2]], b=np.eye(2),
                           x_ss=[1.0, 0.1], u_ss=[40.0, 50.0],
                           rho=OperatingPoint(2000.0, 60.0))

    def test_variant_input_count_checked(self):
        model = make_random_model(seed=25, m=2)
        with pytest.raises(ValueError, match="m="):
            LpvModel(SPEEDS, FUELS, model.submodels, ModelVariant.C)

    def test_submodel_arrays_read_only(self):
        model = make_random_model(seed=26)
        with pytest.raises(ValueError):
            model.submodels[0][0].a[0, 0] = 99.0


class TestPersistence:
    def test_json_roundtrip_is_exact(self, tmp_path):
        model = make_random_model(seed=27, m=3, variant=ModelVariant.C)
        path = tmp_path / "model.json"
        model.save(path)
        loaded = LpvModel.load(path)
        assert loaded.variant is ModelVariant.C
        assert loaded.dt == model.dt
        assert loaded.speed_axis == model.speed_axis
        assert loaded.fuel_axis == model.fuel_axis
        for row_a, row_b in zip(model.submodels, loaded.submodels):
            for sm_a, sm_b in zip(row_a, row_b):
                assert np.array_equal(sm_a.a, sm_b.a)
                assert np.array_equal(sm_a.b, sm_b.b)
                assert np.array_equal(sm_a.x_ss, sm_b.x_ss)
                assert np.array_equal(sm_a.u_ss, sm_b.u_ss)

    def test_format_version_checked(self, tmp_path):
        model = make_random_model(seed=28)
        path = tmp_path / "model.json"
        model.save(path)
        doc = json.loads(path.read_text())
        doc["format_version"] = 99
        path.write_text(json.dumps(doc))
        with pytest.raises(ValueError, match="format version"):
            LpvModel.load(path)

    def test_lattice_csv_dump(self, tmp_path):
        model = make_random_model(seed=29)
        path = tmp_path / "lattice.csv"
        model.dump_lattice_csv(path)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        assert header[:2] == ["engine_speed", "fuel_rate"]
        assert "a_11" in header and "b_22" in header and "u_ss_2" in header
        assert len(body) == len(SPEEDS) * len(FUELS)
        first = body[0]
        stored = model.submodels[0][0]
        assert float(first[0]) == SPEEDS[0]
        assert float(first[header.index("a_11")]) == stored.a[0, 0]
        assert float(first[header.index("x_ss_2")]) == stored.x_ss[1]

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spmtwin.simcore import (
    LINEAR,
    NEAREST,
    CallbackRegistry,
    ConfigurationError,
    InterpolationTable,
    LinearStateSpace,
    SimClock,
    builtin_registry,
    interpolate,
    load_radiance_csv,
    solar_surface,
    year_seconds,
)

STORAGE_A = [[0.0]]
STORAGE_B = [[0.12667, -0.14]]
TURBINE_A = [[-0.3076, 0.0], [0.0008, -0.2]]
TURBINE_B = [[4750.0, 29993.0, -0.1], [1.0, 45.0, 0.2]]


def euler_reference(A, B, x0, u, horizon, h=0.001):
    """Independent fixed-step explicit-Euler integrator used as an oracle."""
    A = np.array(A, float)
    B = np.array(B, float)
    x = np.array(x0, float)
    u = np.array(u, float)
    steps = int(round(horizon / h))
    for _ in range(steps):
        x = x + h * (A @ x + B @ u)
    return x


# ── clock ────────────────────────────────────────────────────────────


class TestSimClock:
    def test_advance_scales_and_floors_to_tick(self):
        clock = SimClock(scale=1000.0, tick=0.1)
        clock.advance(0.00025)  # 0.25 sim-s floors to 0.2
        assert clock.now() == pytest.approx(0.2)

    def test_advance_accumulates(self):
        clock = SimClock(scale=10.0, tick=0.1)
        for _ in range(10):
            clock.advance(0.01)
        assert clock.now() == pytest.approx(1.0)

    def test_advance_to_is_monotonic(self):
        clock = SimClock()
        clock.advance_to(5.0)
        assert clock.now() == 5.0
        with pytest.raises(ValueError):
            clock.advance_to(4.9)

    def test_invalid_parameters(self):
        with pytest.raises(ConfigurationError):
            SimClock(scale=0.5)
        with pytest.raises(ConfigurationError):
            SimClock(tick=0.0)


# ── interpolation ────────────────────────────────────────────────────


class TestInterpolation:
    def test_linear_bracketing_midpoint(self):
        table = InterpolationTable([(0.0, 0.0), (10.0, 100.0)], mode=LINEAR)
        assert interpolate(table, 5.0) == pytest.approx(50.0)
        assert interpolate(table, 2.5) == pytest.approx(25.0)

    def test_nearest_record(self):
        table = InterpolationTable([(0.0, 1.0), (10.0, 2.0)], mode=NEAREST)
        assert interpolate(table, 4.0) == 1.0
        assert interpolate(table, 6.0) == 2.0
        # ties resolve to the earlier record
        assert interpolate(table, 5.0) == 1.0

    def test_out_of_range_clamps(self):
        table = InterpolationTable([(0.0, 3.0), (1.0, 7.0)], mode=LINEAR)
        assert interpolate(table, -100.0) == 3.0
        assert interpolate(table, 100.0) == 7.0

    def test_rejects_bad_tables(self):
        with pytest.raises(ConfigurationError):
            InterpolationTable([])
        with pytest.raises(ConfigurationError):
            InterpolationTable([(0.0, 1.0), (0.0, 2.0)])
        with pytest.raises(ConfigurationError):
            InterpolationTable([(0.0, 1.0)], mode="cubic")

    @given(
        ys=st.lists(st.floats(min_value=-1e6, max_value=1e6), min_size=2,
                    max_size=20),
        frac=st.floats(min_value=0.0, max_value=1.0),
    )
    @settings(max_examples=200)
    def test_linear_stays_within_bracket(self, ys, frac):
        points = [(float(i), y) for i, y in enumerate(ys)]
        table = InterpolationTable(points, mode=LINEAR)
        i = min(len(ys) - 2, int(frac * (len(ys) - 1)))
        x = i + (frac * (len(ys) - 1) - i)
        x = min(max(x, float(i)), float(i + 1))
        y = interpolate(table, x)
        lo, hi = sorted((ys[i], ys[i + 1]))
        assert lo - 1e-9 <= y <= hi + 1e-9

    @given(ys=st.lists(st.floats(min_value=-1e6, max_value=1e6), min_size=1,
                       max_size=20))
    @settings(max_examples=200)
    def test_both_modes_exact_at_nodes(self, ys):
        points = [(float(i), y) for i, y in enumerate(ys)]
        for mode in (LINEAR, NEAREST):
            table = InterpolationTable(points, mode=mode)
            for x, y in points:
                assert interpolate(table, x) == y


# ── linear state-space ───────────────────────────────────────────────


class TestLinearStateSpace:
    def test_zero_a_is_exact_integration(self):
        sys = LinearStateSpace(A=STORAGE_A, B=STORAGE_B, x=[50.0])
        sys.step((1.0, 0.0), 100.0)
        assert sys.x[0] == pytest.approx(50.0 + 0.12667 * 100.0, abs=1e-9)

    def test_zero_a_discharge_exact(self):
        sys = LinearStateSpace(A=STORAGE_A, B=STORAGE_B, x=[50.0])
        sys.step((0.0, 1.0), 100.0)
        assert sys.x[0] == pytest.approx(36.0, abs=1e-9)

    def test_rk4_matches_fine_euler_oracle(self):
        u = (1.0, 1.0, 15.0)
        sys = LinearStateSpace(A=TURBINE_A, B=TURBINE_B, x=[0.0, 15.0], dt=1.0)
        sys.step(u, 30.0)
        oracle = euler_reference(TURBINE_A, TURBINE_B, [0.0, 15.0], u, 30.0)
        for got, want in zip(sys.x, oracle):
            assert abs(got - want) <= 0.001 * abs(want)

    def test_steady_state_matches_independent_solve(self):
        sys = LinearStateSpace(A=TURBINE_A, B=TURBINE_B, x=[0.0, 15.0])
        u = (1.0, 1.0, 15.0)
        got = sys.steady_state(u)
        want = np.linalg.solve(np.array(TURBINE_A),
                               -np.array(TURBINE_B) @ np.array(u))
        assert got == pytest.approx(list(want))
        # closed form of the first state: (4750 + 29993 - 0.1*15) / 0.3076
        assert got[0] == pytest.approx(34741.5 / 0.3076)

    def test_settles_within_one_percent_in_30s(self):
        sys = LinearStateSpace(A=TURBINE_A, B=TURBINE_B, x=[0.0, 15.0], dt=1.0)
        u = (1.0, 1.0, 15.0)
        target = sys.steady_state(u)
        sys.step(u, 30.0)
        for got, want in zip(sys.x, target):
            assert abs(got - want) <= 0.01 * abs(want)

    def test_singular_a_has_no_steady_state(self):
        sys = LinearStateSpace(A=STORAGE_A, B=STORAGE_B, x=[50.0])
        with pytest.raises(ConfigurationError):
            sys.steady_state((1.0, 0.0))

    def test_dimension_validation(self):
        with pytest.raises(ConfigurationError):
            LinearStateSpace(A=[[1.0, 0.0]], B=[[1.0]], x=[0.0])
        with pytest.raises(ConfigurationError):
            LinearStateSpace(A=[[1.0]], B=[[1.0], [2.0]], x=[0.0])
        with pytest.raises(ConfigurationError):
            LinearStateSpace(A=[[1.0]], B=[[1.0]], x=[0.0, 1.0])
        sys = LinearStateSpace(A=[[1.0]], B=[[1.0]], x=[0.0])
        with pytest.raises(ConfigurationError):
            sys.step((1.0, 2.0), 1.0)

    @given(
        a=st.floats(min_value=-2.0, max_value=-0.01),
        b=st.floats(min_value=-10.0, max_value=10.0),
        x0=st.floats(min_value=-100.0, max_value=100.0),
        u=st.floats(min_value=-10.0, max_value=10.0),
    )
    @settings(max_examples=100, deadline=None)
    def test_scalar_rk4_tracks_closed_form(self, a, b, x0, u):
        # x(t) = (x0 + bu/a) e^{at} - bu/a for the 1-D system
        sys = LinearStateSpace(A=[[a]], B=[[b]], x=[x0], dt=0.1)
        sys.step((u,), 5.0)
        want = (x0 + b * u / a) * math.exp(a * 5.0) - b * u / a
        assert sys.x[0] == pytest.approx(want, abs=1e-6 + 1e-4 * abs(want))


# ── callbacks ────────────────────────────────────────────────────────


class TestCallbacks:
    def test_solar_surface_peak(self):
        assert solar_surface(1000.0, 504.0, 0.16) == pytest.approx(80640.0)

    def test_builtin_registry_names(self):
        reg = builtin_registry()
        assert "solar-surface" in reg
        assert "getSolarSurfaceInterpolant" in reg
        assert reg.eval("getSolarSurfaceInterpolant",
                        (1000.0, 504.0, 0.16)) == pytest.approx(80640.0)

    def test_unknown_and_duplicate_names(self):
        reg = CallbackRegistry()
        with pytest.raises(ConfigurationError):
            reg.eval("missing", (1.0,))
        reg.register("f", lambda x: x)
        with pytest.raises(ConfigurationError):
            reg.register("f", lambda x: x)


# ── radiance ingestion ───────────────────────────────────────────────


class TestRadianceCsv:
    def test_load_and_query(self, tmp_path):
        path = tmp_path / "rad.csv"
        path.write_text(
            "timestamp,watt_per_msq\n"
            "2016-01-01T00:00:00,0.0\n"
            "2016-01-01T12:00:00,800.0\n"
        )
        table = load_radiance_csv(str(path))
        assert interpolate(table, 0.0) == 0.0
        assert interpolate(table, 12 * 3600.0) == 800.0

    def test_rejects_wrong_header(self, tmp_path):
        path = tmp_path / "rad.csv"
        path.write_text("time,value\n2016-01-01T00:00:00,0\n")
        with pytest.raises(ConfigurationError):
            load_radiance_csv(str(path))

    def test_year_seconds(self):
        assert year_seconds(2016) == 366 * 86400.0
        assert year_seconds(2015) == 365 * 86400.0
        assert year_seconds(2000) == 366 * 86400.0
        assert year_seconds(1900) == 365 * 86400.0

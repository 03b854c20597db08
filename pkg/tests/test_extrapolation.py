import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from netadjust.diagnostics import Diagnostics
from netadjust.extrapolation import (
    AnnualGridSurvival,
    ExtendedSurvival,
    ExtrapolationError,
    extend_survival,
    fit_exponential_tail,
    follow_up_cutoff,
    loglinear_interpolate,
    select_anchor_times,
)
from netadjust.registry import EventTable, StepSurvivalCurve


def exp_curve(rate, jumps=None):
    jumps = np.arange(0.5, 20.0, 0.5) if jumps is None else np.asarray(jumps, float)
    return StepSurvivalCurve(jumps, np.exp(-rate * jumps))


class TestAnchorSelection:
    def test_last_four_integers(self):
        anchors = select_anchor_times(exp_curve(0.1), 15.0, 4)
        assert anchors.tolist() == [12.0, 13.0, 14.0, 15.0]

    def test_positivity_filter(self):
        jumps = np.array([1.0, 5.0, 14.0])
        curve = StepSurvivalCurve(jumps, np.array([0.8, 0.4, 0.0]))
        anchors = select_anchor_times(curve, 15.0, 4)
        assert anchors.tolist() == [10.0, 11.0, 12.0, 13.0]

    def test_h_ten(self):
        anchors = select_anchor_times(exp_curve(0.1), 15.0, 10)
        assert anchors.tolist() == [float(t) for t in range(6, 16)]

    def test_fewer_than_two_points_errors(self):
        curve = StepSurvivalCurve(np.array([0.5]), np.array([0.0]))
        with pytest.raises(ExtrapolationError):
            select_anchor_times(curve, 1.0, 4)

    def test_short_follow_up_uses_all(self):
        anchors = select_anchor_times(exp_curve(0.1), 2.0, 6)
        assert anchors.tolist() == [0.0, 1.0, 2.0]


class TestTailFit:
    def test_exact_exponential(self):
        g0, g1 = fit_exponential_tail(exp_curve(0.2), np.array([12.0, 13.0, 14.0, 15.0]))
        assert g0 == pytest.approx(0.0, abs=1e-10)
        assert g1 == pytest.approx(0.2, abs=1e-10)

    def test_two_anchors_interpolating_line(self):
        curve = StepSurvivalCurve(np.array([1.0, 2.0]), np.array([0.8, 0.5]))
        g0, g1 = fit_exponential_tail(curve, np.array([1.0, 2.0]))
        assert math.exp(-g0 - g1 * 1.0) == pytest.approx(0.8, abs=1e-12)
        assert math.exp(-g0 - g1 * 2.0) == pytest.approx(0.5, abs=1e-12)

    def test_constant_curve(self):
        curve = StepSurvivalCurve(np.array([0.5]), np.array([0.5]))
        g0, g1 = fit_exponential_tail(curve, np.array([1.0, 2.0, 3.0]))
        assert g1 == 0.0
        assert g0 == pytest.approx(math.log(2.0), abs=1e-12)

    def test_singular_anchors(self):
        with pytest.raises(ExtrapolationError):
            fit_exponential_tail(exp_curve(0.1), np.array([3.0, 3.0, 3.0]))

    def test_negative_slope_clipped(self):
        # a monotone curve cannot produce a materially negative slope, so
        # exercise the guard with a stub evaluator
        class Rising:
            def survival_at(self, t):
                return 0.5 + 0.1 * np.asarray(t)

        diag = Diagnostics()
        g0, g1 = fit_exponential_tail(Rising(), np.array([1.0, 2.0]), diag)
        assert g1 == 0.0
        assert math.exp(-g0) == pytest.approx(math.sqrt(0.6 * 0.7), abs=1e-12)
        assert diag.get("extrapolation_slope_clipped") == 1


class TestExtendedSurvival:
    def test_base_below_cutoff(self):
        curve = exp_curve(0.15)
        ext = extend_survival(curve, 10.0, 4)
        for t in (0.0, 3.3, 10.0):
            assert ext.survival_at(t) == curve.survival_at(t)

    def test_exponential_continuation(self):
        ext = extend_survival(exp_curve(0.15), 10.0, 4)
        assert ext.survival_at(15.0) == pytest.approx(math.exp(-0.15 * 15.0), rel=1e-9)

    def test_monotone_clip_at_cutoff(self):
        ext = ExtendedSurvival(exp_curve(0.3), tau=10.0, g0=-1.0, g1=0.01)
        cap = exp_curve(0.3).survival_at(10.0)
        assert ext.survival_at(10.4) == pytest.approx(cap, abs=1e-15)

    def test_fallback_carries_last_value(self):
        curve = StepSurvivalCurve(np.array([0.5]), np.array([0.7]))
        diag = Diagnostics()
        ext = extend_survival(curve, 0.9, 4, diag)
        assert diag.get("extrapolation_fallback") == 1
        assert ext.survival_at(30.0) == pytest.approx(0.7, rel=1e-12)

    @given(st.floats(0.0, 0.5), st.integers(2, 8))
    @settings(max_examples=50, deadline=None)
    def test_exactness_on_exponentials(self, rate, h):
        ext = extend_survival(exp_curve(rate), 12.0, h)
        for t in (0.5, 5.0, 12.0, 18.0, 40.0):
            assert ext.survival_at(t) == pytest.approx(math.exp(-rate * t), rel=1e-9, abs=1e-12)

    @given(st.lists(st.floats(0.0, 0.4), min_size=3, max_size=16))
    @settings(max_examples=50, deadline=None)
    def test_extension_stays_monotone(self, drops):
        values = np.cumprod(1.0 - np.asarray(drops))
        jumps = np.arange(1.0, len(drops) + 1.0)
        curve = StepSurvivalCurve(jumps, values)
        try:
            ext = extend_survival(curve, float(len(drops)), 4)
        except ExtrapolationError:
            return
        grid = np.linspace(0.0, len(drops) + 20.0, 200)
        out = ext.survival_at(grid)
        assert np.all(np.diff(out) <= 1e-12)
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestFollowUpCutoff:
    def test_rule(self):
        table = EventTable(np.arange(1.0, 11.0), np.ones(10, dtype=bool))
        # at-risk at times 1..10 is 10,9,...,1
        assert follow_up_cutoff(table, 5) == 6.0

    def test_fallback_to_last_time(self):
        table = EventTable(np.array([1.0, 2.0]), np.array([True, True]))
        assert follow_up_cutoff(table, 5) == 2.0


class TestLoglinearInterpolate:
    def test_exact_at_grid(self):
        grid = np.array([1.0, 0.9, 0.81, 0.5])
        for t in range(4):
            assert loglinear_interpolate(grid, float(t)) == grid[t]

    def test_geometric_mean(self):
        value = loglinear_interpolate(np.array([1.0, 0.9, 0.81]), 1.5)
        assert value == pytest.approx(0.9 * math.sqrt(0.9), abs=1e-12)

    def test_constant_grid(self):
        grid = np.full(6, 0.4)
        grid[0] = 1.0
        ts = np.array([1.2, 2.7, 4.9])
        assert np.allclose(loglinear_interpolate(grid, ts), 0.4, atol=1e-15)

    def test_zero_right_endpoint_carries_decay(self):
        diag = Diagnostics()
        grid = np.array([1.0, 0.5, 0.25, 0.0])
        value = loglinear_interpolate(grid, 2.5, diag)
        assert value == pytest.approx(0.25 * math.sqrt(0.5), abs=1e-12)
        assert diag.get("interp_zero_endpoint") == 1
        # still exact at the grid point itself
        assert loglinear_interpolate(grid, 3.0) == 0.0

    def test_zero_left_endpoint_is_zero(self):
        grid = np.array([1.0, 0.0, 0.0])
        assert loglinear_interpolate(grid, 1.5) == 0.0

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            loglinear_interpolate(np.array([1.0, 0.5]), 1.5)

    @given(st.floats(0.0, 0.8), st.floats(0.01, 9.99))
    @settings(max_examples=60, deadline=None)
    def test_exact_on_exponentials_between_grid(self, rate, t):
        grid = np.exp(-rate * np.arange(11.0))
        assert loglinear_interpolate(grid, t) == pytest.approx(
            math.exp(-rate * t), rel=1e-10
        )


class TestAnnualGridSurvival:
    def test_hazard_survival_consistency(self):
        grid = np.array([1.0, 0.9, 0.7, 0.65])
        curve = AnnualGridSurvival(grid)
        for t in (0.0, 0.4, 1.0, 2.9, 3.0):
            assert math.exp(-curve.cumulative_hazard_at(t)) == pytest.approx(
                curve.survival_at(t), rel=1e-12
            )
        for t in range(4):
            assert curve.survival_at(float(t)) == grid[t]

    def test_extension_past_grid_counted(self):
        diag = Diagnostics()
        curve = AnnualGridSurvival(np.array([1.0, 0.8]), diag)
        value = curve.survival_at(3.0)
        assert value == pytest.approx(0.8 ** 3, rel=1e-12)
        assert diag.get("grid_extended_eval") == 1

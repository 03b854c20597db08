import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from netadjust.incidence import (
    IncidenceError,
    IncidenceTable,
    PrevalenceCalculator,
    PrevalenceError,
    compute_incidence,
    load_incidence_table,
    time_to_diagnosis_cdf,
    time_to_diagnosis_increment,
    time_to_diagnosis_increments,
)
from netadjust.registry import StratumKey

from conftest import diagonal_life_table, flat_incidence, flat_life_table


KEY60 = StratumKey(60, 2010, ("0",))


def const_survival(rate):
    def fn(key, times):
        return np.exp(-rate * np.asarray(times, dtype=float))
    return fn


class TestComputeIncidence:
    def test_no_diagnoses(self):
        py = {(a, 2000, ("0",)): 1000.0 for a in range(5)}
        table = compute_incidence({}, py)
        assert all(table.ir(a, 2000, ("0",)) == 0.0 for a in range(5))

    def test_simple_ratio(self):
        table = compute_incidence({(50, 2000, ("0",)): 15}, {(50, 2000, ("0",)): 1000.0})
        assert table.ir(50, 2000, ("0",)) == pytest.approx(0.015, abs=1e-15)

    def test_zero_person_years_with_diagnoses(self):
        with pytest.raises(IncidenceError):
            compute_incidence({(50, 2000, ("0",)): 3}, {(50, 2000, ("0",)): 0.0})

    def test_clip_counted(self):
        from netadjust.diagnostics import Diagnostics
        diag = Diagnostics()
        table = compute_incidence({(50, 2000, ("0",)): 10}, {(50, 2000, ("0",)): 5.0}, diag)
        assert table.ir(50, 2000, ("0",)) < 1.0
        assert diag.get("incidence_clip") == 1


class TestLoader:
    def test_round_trip(self, tmp_path):
        f = tmp_path / "inc.csv"
        f.write_text("age,year,sex,ir\n50,2000,m,0.015\n", encoding="utf-8")
        table = load_incidence_table(f)
        assert table.ir(50, 2000, ("m",)) == pytest.approx(0.015)

    def test_range_check(self, tmp_path):
        f = tmp_path / "inc.csv"
        f.write_text("age,year,sex,ir\n50,2000,m,1.0\n", encoding="utf-8")
        with pytest.raises(IncidenceError):
            load_incidence_table(f)

    def test_missing_cell_defaults_to_zero_with_count(self):
        from netadjust.diagnostics import Diagnostics
        diag = Diagnostics()
        table = IncidenceTable({(50, 2000, ("m",)): 0.01, (52, 2002, ("m",)): 0.01})
        assert table.ir(51, 2001, ("m",), diag) == 0.0
        assert diag.get("incidence_missing_cell") == 1


class TestTimeToDiagnosis:
    def test_zero_rates(self):
        table = IncidenceTable.zero()
        assert time_to_diagnosis_cdf(table, KEY60, 10) == 0.0

    def test_constant_rate_closed_form(self):
        table = flat_incidence(0.015)
        value = time_to_diagnosis_cdf(table, KEY60, 2)
        assert value == pytest.approx(1.0 - 0.985 ** 2, abs=1e-12)

    def test_cdf_zero_at_origin(self):
        assert time_to_diagnosis_cdf(flat_incidence(0.4), KEY60, 0) == 0.0

    def test_first_increment_is_ir(self):
        table = flat_incidence(0.015)
        assert time_to_diagnosis_increment(table, KEY60, 1) == pytest.approx(0.015, abs=1e-15)

    def test_increments_telescope(self):
        table = flat_incidence(0.03)
        inc = time_to_diagnosis_increments(table, KEY60, 12)
        for t in range(1, 13):
            assert inc[:t].sum() == pytest.approx(
                time_to_diagnosis_cdf(table, KEY60, t), abs=1e-12
            )

    def test_zero_increments_when_no_incidence(self):
        inc = time_to_diagnosis_increments(IncidenceTable.zero(), KEY60, 5)
        assert np.all(inc == 0.0)

    @given(st.lists(st.floats(0.0, 0.3), min_size=1, max_size=20))
    @settings(max_examples=50, deadline=None)
    def test_cdf_properties(self, rates):
        cells = {(60 + i, 2010 + i, ("0",)): r for i, r in enumerate(rates)}
        table = IncidenceTable(cells)
        values = [time_to_diagnosis_cdf(table, KEY60, t) for t in range(len(rates) + 1)]
        assert values[0] == 0.0
        assert np.all(np.diff(values) >= -1e-15)
        assert values[-1] <= 1.0


class TestPrevalence:
    def test_zero_incidence_gives_zero_alpha(self):
        calc = PrevalenceCalculator(
            IncidenceTable.zero(), const_survival(0.1), flat_life_table(0.01)
        )
        for age in (1, 5, 40):
            assert calc.prevalence(StratumKey(age, 1960 + age, ("0",))) == 0.0

    def test_single_term_at_age_one(self):
        # flat world with no background mortality reduces to the bare recursion
        ir = flat_incidence(0.02)
        calc = PrevalenceCalculator(
            ir, const_survival(0.1), flat_life_table(0.0), lag_eval="year_start"
        )
        key = StratumKey(1, 1961, ("0",))
        assert calc.prevalence(key) == pytest.approx(np.exp(-0.1) * 0.02, abs=1e-14)

    def test_mid_year_single_term(self):
        ir = flat_incidence(0.02)
        calc = PrevalenceCalculator(
            ir, const_survival(0.1), flat_life_table(0.0), lag_eval="mid_year"
        )
        key = StratumKey(1, 1961, ("0",))
        assert calc.prevalence(key) == pytest.approx(np.exp(-0.05) * 0.02, abs=1e-14)

    def test_attrition_factor_uses_life_table(self):
        # with background mortality q the lag-1 term is inflated by 1/(1-q)
        ir = flat_incidence(0.02)
        q = 0.3
        calc = PrevalenceCalculator(
            ir, const_survival(0.1), flat_life_table(q), lag_eval="year_start"
        )
        key = StratumKey(1, 1961, ("0",))
        expected = np.exp(-0.1) * 0.02 / (1.0 - q)
        assert calc.prevalence(key) == pytest.approx(expected, abs=1e-14)

    def test_lag_cdf_closure(self):
        ir = flat_incidence(0.02)
        calc = PrevalenceCalculator(ir, const_survival(0.08), flat_life_table(0.01))
        key = StratumKey(40, 2000, ("0",))
        assert calc.lag_since_diagnosis_cdf(key, 40) == pytest.approx(1.0, abs=1e-12)
        assert calc.lag_since_diagnosis_cdf(key, 0) == 0.0

    def test_degenerate_incidence_gives_step_lag_distribution(self):
        # incidence concentrated at age 30 only (explicit zeros elsewhere,
        # since out-of-range lookups clamp to the nearest declared cell)
        cells = {(a, 1960 + a, ("0",)): (0.05 if a == 30 else 0.0) for a in range(60)}
        ir = IncidenceTable(cells)
        calc = PrevalenceCalculator(ir, const_survival(0.1), flat_life_table(0.0))
        key = StratumKey(42, 2002, ("0",))  # lag to the spike: 12 years
        for t in range(0, 12):
            assert calc.lag_since_diagnosis_cdf(key, t) == pytest.approx(0.0, abs=1e-12)
        assert calc.lag_since_diagnosis_cdf(key, 12) == pytest.approx(1.0, abs=1e-12)

    def test_lag_distribution_undefined_without_prevalence(self):
        calc = PrevalenceCalculator(
            IncidenceTable.zero(), const_survival(0.1), flat_life_table(0.0)
        )
        with pytest.raises(PrevalenceError):
            calc.lag_since_diagnosis_increments(StratumKey(10, 1970, ("0",)))

    def test_impossible_inputs_raise(self):
        # immortal patients inside a dying population push alpha past 1
        ir = flat_incidence(0.5)
        calc = PrevalenceCalculator(ir, const_survival(0.0), flat_life_table(0.5))
        with pytest.raises(PrevalenceError, match=">= 1"):
            calc.prevalence(StratumKey(6, 1966, ("0",)))

    @given(
        st.lists(st.floats(0.0, 0.05), min_size=3, max_size=15),
        st.floats(0.02, 0.3),
        st.lists(st.floats(0.0, 0.1), min_size=3, max_size=15),
    )
    @settings(max_examples=40, deadline=None)
    def test_closure_property(self, rates, so_rate, qs):
        n = min(len(rates), len(qs))
        cells = {(i, 1960 + i, ("0",)): r for i, r in enumerate(rates[:n])}
        ir = IncidenceTable(cells)
        lt = diagonal_life_table(qs[:n] + [0.0], sexes=("0",))
        calc = PrevalenceCalculator(ir, const_survival(so_rate), lt)
        key = StratumKey(n, 1960 + n, ("0",))
        alpha = calc.prevalence(key)
        if alpha > 0:
            assert calc.lag_since_diagnosis_cdf(key, n) == pytest.approx(1.0, abs=1e-12)
            inc = calc.lag_since_diagnosis_increments(key)
            assert np.all(inc >= -1e-15)

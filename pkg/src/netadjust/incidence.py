"""Annual cancer incidence rates and the prevalence machinery built on them.

IR(age, year, demo) is the annual probability that a cancer-free member of
the cell is newly diagnosed within the year.  Three derived quantities feed
the life-table adjustment:

* prevalence: the probability that a member of a cell has a prior diagnosis,
  via the recursion  alpha(a) = sum_s S_O(s | a-s) * IR(a-s) * (1 - alpha(a-s))
  with alpha(age 0) = 0;
* the lag-since-diagnosis distribution of prevalent cases (the same summands,
  normalized by alpha);
* the time-to-diagnosis distribution of cancer-free members,
  F(t) = 1 - prod_{s<t} (1 - IR(a+s)).

The recursion walks each birth-cohort diagonal once (each cell depends only
on strictly earlier cells of the same diagonal), caching overall-survival
evaluations per diagnosis stratum.
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .diagnostics import Diagnostics, ensure_diagnostics, log
from .registry import StratumKey


class IncidenceError(ValueError):
    """Malformed incidence input."""


class PrevalenceError(ValueError):
    """Prevalence recursion produced an impossible value (>= 1)."""


IR_CLIP = 1.0 - 1e-9


class IncidenceTable:
    """Annual incidence rates keyed like a life table.

    Cells absent after range clamping default to 0 (counted), so pediatric
    gaps in real incidence files do not abort a run.
    """

    def __init__(self, cells: dict):
        self.cells: dict[tuple[int, int, tuple], float] = {}
        for (age, year, demo), ir in cells.items():
            ir = float(ir)
            if not 0.0 <= ir < 1.0:
                raise IncidenceError(f"ir={ir} outside [0,1) at cell (age={age}, year={year}, {demo})")
            self.cells[(int(age), int(year), demo)] = ir
        if self.cells:
            ages = [k[0] for k in self.cells]
            years = [k[1] for k in self.cells]
            self.age_min, self.age_max = min(ages), max(ages)
            self.year_min, self.year_max = min(years), max(years)
        else:
            self.age_min = self.age_max = 0
            self.year_min = self.year_max = 0

    @classmethod
    def zero(cls) -> "IncidenceTable":
        """Empty table: IR identically 0 (the no-adjustment limit)."""
        table = cls({})
        return table

    def ir(self, age: int, year: int, demo: tuple, diagnostics: Diagnostics | None = None) -> float:
        if not self.cells:
            return 0.0
        a = min(max(age, self.age_min), self.age_max)
        y = min(max(year, self.year_min), self.year_max)
        if (a, y) != (age, year) and diagnostics is not None:
            diagnostics.incr("incidence_clamp")
        value = self.cells.get((a, y, demo))
        if value is None:
            if diagnostics is not None:
                diagnostics.incr("incidence_missing_cell")
            return 0.0
        return value

    def ir_diagonal(self, key: StratumKey, steps: int, diagnostics: Diagnostics | None = None) -> np.ndarray:
        return np.array(
            [self.ir(key.age + j, key.year + j, key.demographics, diagnostics) for j in range(steps)]
        )


def compute_incidence(
    new_diagnoses: dict, person_years: dict, diagnostics: Diagnostics | None = None
) -> IncidenceTable:
    """IR = diagnoses / person-years per cell, clipped into [0, 1-1e-9].

    Cells come from the person-years table (it defines the population);
    nonzero diagnoses without exposure are a hard error.
    """
    diag = ensure_diagnostics(diagnostics)
    cells = {}
    for key, d in new_diagnoses.items():
        py = person_years.get(key, 0.0)
        if py <= 0 and d > 0:
            raise IncidenceError(f"{d} diagnoses but no person-years at cell {key}")
    for key, py in person_years.items():
        d = float(new_diagnoses.get(key, 0))
        if py <= 0:
            continue
        ir = d / py
        if ir > IR_CLIP:
            diag.incr("incidence_clip")
            log.warning("incidence rate %.6f clipped at cell %s", ir, key)
            ir = IR_CLIP
        cells[key] = ir
    return IncidenceTable(cells)


def time_to_diagnosis_cdf(
    ir: IncidenceTable, key: StratumKey, t: int, diagnostics: Diagnostics | None = None
) -> float:
    """P(diagnosed within t years | cancer-free at key) = 1 - prod (1 - IR)."""
    if t < 0:
        raise ValueError("t must be >= 0")
    if t == 0:
        return 0.0
    rates = ir.ir_diagonal(key, int(t), diagnostics)
    return float(1.0 - np.prod(1.0 - rates))


def time_to_diagnosis_increments(
    ir: IncidenceTable, key: StratumKey, k_max: int, diagnostics: Diagnostics | None = None
) -> np.ndarray:
    """Year-by-year diagnosis mass for k = 1..k_max: F(k) - F(k-1).

    Equals IR(key+k-1) times the probability of staying undiagnosed through
    the earlier years; increments telescope back to the cdf.
    """
    rates = ir.ir_diagonal(key, int(k_max), diagnostics)
    undiagnosed = np.concatenate(([1.0], np.cumprod(1.0 - rates)[:-1]))
    return undiagnosed * rates


def time_to_diagnosis_increment(
    ir: IncidenceTable, key: StratumKey, k: int, diagnostics: Diagnostics | None = None
) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    return float(time_to_diagnosis_increments(ir, key, k, diagnostics)[-1])


class _DiagonalState:
    """Per-diagonal recursion state (one birth cohort, one demographic group)."""

    __slots__ = ("alpha", "irga", "rows", "ir_by_age", "surv")

    def __init__(self):
        self.alpha: list[float] = [0.0]   # alpha(age 0) = 0 by construction
        self.irga: list[float] = []       # IR(d) * (1 - alpha(d)) * cohort survival to d
        self.rows: dict[int, np.ndarray] = {}   # survival since diagnosis per diagnosis age
        self.ir_by_age: list[float] = []
        self.surv: list[float] = [1.0]    # life-table cohort survival from age 0 along the diagonal


class PrevalenceCalculator:
    """Prevalence and diagnosis-lag distributions from incidence + survival.

    Each lag-s term multiplies the chance of a diagnosis s years back
    (IR * fraction then undiagnosed), the patients' survival over those s
    years, and the ratio of the cell populations then and now; the last
    factor is the reciprocal of the life table's own diagonal survival and
    re-normalizes for cohort attrition between the two cells, without which
    prevalence at high-mortality ages is badly understated.

    `overall_survival` is a callable (StratumKey, times array) -> survival
    array; registry-backed providers extrapolate past follow-up internally.
    `lag_eval` picks where within the diagnosis year the survival curve is
    read: "year_start" uses the full integer lag, "mid_year" shifts the
    evaluation point back half a year.
    """

    def __init__(
        self,
        incidence: IncidenceTable,
        overall_survival,
        life_table,
        lag_eval: str = "year_start",
        diagnostics: Diagnostics | None = None,
    ):
        if lag_eval not in ("year_start", "mid_year"):
            raise ValueError(f"unknown lag_eval {lag_eval!r}")
        self.incidence = incidence
        self.so = overall_survival
        self.life_table = life_table
        self.offset = 0.0 if lag_eval == "year_start" else 0.5
        self.diagnostics = ensure_diagnostics(diagnostics)
        self._diagonals: dict[tuple[int, tuple], _DiagonalState] = {}

    def _state(self, key: StratumKey) -> _DiagonalState:
        ident = (key.year - key.age, key.demographics)
        state = self._diagonals.get(ident)
        if state is None:
            state = self._diagonals[ident] = _DiagonalState()
        return state

    def _row(self, state: _DiagonalState, key: StratumKey, d: int, length: int) -> np.ndarray:
        """Survival since diagnosis for the age-d stratum, lags 1..length."""
        row = state.rows.get(d)
        if row is None or row.shape[0] < length:
            size = max(length, 2 * row.shape[0] if row is not None else length)
            lags = np.arange(1, size + 1, dtype=np.float64) - self.offset
            stratum = StratumKey(d, key.year - key.age + d, key.demographics)
            row = np.asarray(self.so(stratum, lags), dtype=np.float64)
            state.rows[d] = row
        return row

    def _ensure(self, key: StratumKey, age: int) -> _DiagonalState:
        state = self._state(key)
        yob = key.year - key.age
        while len(state.ir_by_age) < age:
            d = len(state.ir_by_age)
            state.ir_by_age.append(
                self.incidence.ir(d, yob + d, key.demographics, self.diagnostics)
            )
        while len(state.surv) <= age:
            d = len(state.surv) - 1
            q = self.life_table.q(d, yob + d, key.demographics, self.diagnostics)
            state.surv.append(state.surv[-1] * (1.0 - q))
        while len(state.alpha) <= age:
            a = len(state.alpha)
            if state.surv[a] <= 0.0:
                raise PrevalenceError(
                    f"life-table cohort extinct at age {a} on diagonal "
                    f"(birth year {yob}, {key.demographics}); prevalence undefined"
                )
            terms = np.empty(a)
            for d in range(a):
                terms[d] = self._row(state, key, d, a - d)[a - d - 1]
            if len(state.irga) < a:
                for d in range(len(state.irga), a):
                    state.irga.append(
                        state.ir_by_age[d] * (1.0 - state.alpha[d]) * state.surv[d]
                    )
            value = float(terms @ np.asarray(state.irga[:a])) / state.surv[a]
            if value >= 1.0:
                raise PrevalenceError(
                    f"prevalence {value:.6f} >= 1 at age {a} on diagonal "
                    f"(birth year {yob}, {key.demographics}); incidence and survival inputs disagree"
                )
            state.alpha.append(value)
        return state

    def prevalence(self, key: StratumKey) -> float:
        """alpha at the key's cell."""
        if key.age < 0:
            raise ValueError("prevalence needs age >= 0")
        state = self._ensure(key, key.age)
        return state.alpha[key.age]

    def _summands(self, key: StratumKey) -> np.ndarray:
        """Lag-s contributions to alpha: patient survival times the attrition-
        normalized diagnosis mass, s = 1..age."""
        a = key.age
        state = self._ensure(key, a)
        out = np.empty(a)
        for s in range(1, a + 1):
            d = a - s
            out[s - 1] = self._row(state, key, d, s)[s - 1] * state.irga[d]
        return out / state.surv[a]

    def lag_since_diagnosis_increments(self, key: StratumKey) -> np.ndarray:
        """Mass of the prevalent-case diagnosis-lag distribution at s = 1..age."""
        alpha = self.prevalence(key)
        if alpha <= 0.0:
            raise PrevalenceError(
                f"lag distribution undefined at {key}: prevalence is 0"
            )
        return self._summands(key) / alpha

    def lag_since_diagnosis_cdf(self, key: StratumKey, t: int) -> float:
        """P(diagnosed within the last t years | prevalent at key)."""
        if t < 0:
            raise ValueError("t must be >= 0")
        if t == 0:
            return 0.0
        inc = self.lag_since_diagnosis_increments(key)
        return float(inc[: min(int(t), inc.shape[0])].sum())

    def prevalent_mix_weights(self, key: StratumKey) -> np.ndarray:
        """Attrition-normalized diagnosis mass per lag s = 1..age, over alpha.

        These pair with `survival_from_diagnosis_matrix`: weight * M[s-1, t]
        is the probability of a diagnosis s years back followed by survival
        to horizon t, already conditioned on being prevalent.  The t = 0
        column then mixes to exactly 1 (the recursion's own sum).
        """
        a = key.age
        alpha = self.prevalence(key)
        if alpha <= 0.0:
            raise PrevalenceError(f"prevalent mixture undefined at {key}: prevalence is 0")
        state = self._state(key)
        irga = np.asarray(state.irga[:a])
        return irga[::-1] / (state.surv[a] * alpha)

    def survival_from_diagnosis_matrix(self, key: StratumKey, horizon: int) -> np.ndarray:
        """Matrix M[s-1, t] = S_O(t + s | diagnosed age-s years back), t = 0..horizon.

        Row s pairs with the lag-s mass of the prevalent-case distribution;
        the evaluation point carries the same within-year offset as the
        recursion.
        """
        a = key.age
        state = self._ensure(key, a)
        out = np.empty((a, horizon + 1))
        for s in range(1, a + 1):
            d = a - s
            row = self._row(state, key, d, s + horizon)
            out[s - 1, :] = row[s - 1 : s + horizon]
        return out


def prevalence(
    incidence: IncidenceTable, overall_survival, life_table, key: StratumKey, **kwargs
) -> float:
    """One-shot alpha computation (builds a throwaway calculator)."""
    return PrevalenceCalculator(incidence, overall_survival, life_table, **kwargs).prevalence(key)


def load_incidence_table(path) -> IncidenceTable:
    """Read an incidence CSV with header age,year,sex,ir."""
    path = Path(path)
    cells: dict[tuple[int, int, tuple], float] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"age", "year", "sex", "ir"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise IncidenceError(f"{path.name}: header must contain {sorted(required)}")
        for rownum, row in enumerate(reader, start=2):
            try:
                age = int(row["age"])
                year = int(row["year"])
                ir = float(row["ir"])
            except (TypeError, ValueError) as exc:
                raise IncidenceError(f"{path.name}:{rownum}: {exc}") from None
            demo = (row["sex"].strip(),)
            keyc = (age, year, demo)
            if keyc in cells:
                raise IncidenceError(f"{path.name}:{rownum}: duplicate cell (age={age}, year={year}, sex={demo[0]})")
            if not 0.0 <= ir < 1.0:
                raise IncidenceError(f"{path.name}:{rownum}: ir={ir} outside [0,1)")
            cells[keyc] = ir
    return IncidenceTable(cells)


def load_counts(path, value_column: str) -> dict:
    """Read a counts CSV (age,year,sex,<value_column>) into a cell dict."""
    path = Path(path)
    out: dict[tuple[int, int, tuple], float] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"age", "year", "sex", value_column}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise IncidenceError(f"{path.name}: header must contain {sorted(required)}")
        for rownum, row in enumerate(reader, start=2):
            try:
                keyc = (int(row["age"]), int(row["year"]), (row["sex"].strip(),))
                value = float(row[value_column])
            except (TypeError, ValueError) as exc:
                raise IncidenceError(f"{path.name}:{rownum}: {exc}") from None
            if keyc in out:
                raise IncidenceError(f"{path.name}:{rownum}: duplicate cell {keyc}")
            if value < 0:
                raise IncidenceError(f"{path.name}:{rownum}: negative {value_column}")
            out[keyc] = value
    return out

"""Removal of cancer mortality from life-table cohort survival.

The life-table cohort at a cell mixes prevalent cancer patients with
cancer-free subjects, and the cancer-free subjects may be diagnosed and die
of cancer later.  Writing the cell's cohort survival as

    lt(t) = alpha * prev(t) + (1 - alpha) * net_free(t) * S_P(t)

where prev(t) is the survival of prevalent cases, net_free(t) the probability
that a cancer-free subject escapes cancer death by t, and S_P(t) the
non-cancer survival being sought, gives at annual horizons the triangular
system

    S_P(t) = [lt(t) - alpha * prev(t)] / [(1 - alpha) * r(t)],
    r(t)   = 1 - sum_{k<t} (1 - S_O(t-k | cell+k) / S_P(t-k | cell+k)) * dF_k,

with dF_k the year-k diagnosis mass of cancer-free subjects and the kernel
vanishing at k = t.  r(1) = 1, so the system solves by forward substitution;
the shifted cells' S_P values enter at strictly smaller horizons.

Two independent solver paths are provided: a memoized recursion and an
explicit triangular-matrix assembly (`solve_noncancer_survival_triangular`),
kept separate as a numerical oracle for each other.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diagnostics import Diagnostics, ensure_diagnostics
from .extrapolation import loglinear_interpolate
from .incidence import IncidenceTable, PrevalenceCalculator, time_to_diagnosis_increments
from .lifetable import LifeTable, diagonal_survival
from .registry import StratumKey

SP_CLIP_EPS = 1e-9
R_FLOOR = 1e-6


class SolverError(ValueError):
    """The discrete system is numerically inconsistent at a named cell."""


@dataclass(frozen=True)
class PrevalentCaseSurvival:
    """Survival from the cell date of previously diagnosed subjects, t = 0..K."""

    origin: StratumKey
    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if abs(v[0] - 1.0) > 1e-9:
            raise ValueError("prevalent-case survival must start at 1")
        if (np.diff(v) > 1e-12).any() or v.min() < -1e-12:
            raise ValueError("prevalent-case survival must be non-increasing in [0,1]")


@dataclass
class AdjustedPopulationSurvival:
    """Non-cancer survival on the annual grid with log-linear interpolation."""

    origin: StratumKey
    values: np.ndarray
    clip_count: int = 0
    guard_count: int = 0

    def survival_at(self, t):
        return loglinear_interpolate(self.values, t)

    __call__ = survival_at


def prevalent_case_survival(
    key: StratumKey,
    mix_weights: np.ndarray,
    survival_matrix: np.ndarray,
) -> PrevalentCaseSurvival:
    """Mixture survival of prevalent cases over their diagnosis-lag law.

    `mix_weights[s-1]` is the attrition-normalized diagnosis mass of the
    year s years back divided by alpha, and `survival_matrix[s-1, t]` the
    survival from that diagnosis to horizon t; the product is the lag-s mass
    times the conditional survival of a case alive at the cell date (the
    survival-to-cell factor cancels), so the t = 0 column mixes to 1 by the
    prevalence recursion itself.
    """
    values = mix_weights @ survival_matrix
    values = np.clip(values, 0.0, 1.0)
    values[0] = 1.0
    return PrevalentCaseSurvival(key, values)


class AdjustmentIngredients:
    """Accessor bundle both solver paths consume.

    Subclasses provide per-cell grids; `horizon` is the number of annual
    steps solved.  `prevalent_grid` is only called where `alpha` is positive.
    """

    horizon: int

    def lt_survival_grid(self, key: StratumKey) -> np.ndarray:
        raise NotImplementedError

    def alpha(self, key: StratumKey) -> float:
        raise NotImplementedError

    def prevalent_grid(self, key: StratumKey) -> np.ndarray:
        raise NotImplementedError

    def so_grid(self, key: StratumKey) -> np.ndarray:
        raise NotImplementedError

    def diagnosis_mass(self, key: StratumKey) -> np.ndarray:
        raise NotImplementedError

    def shift(self, key: StratumKey, k: int) -> StratumKey:
        return key.shift(k)


def _numerator(ing: AdjustmentIngredients, key: StratumKey, alpha: float) -> np.ndarray:
    lt = np.asarray(ing.lt_survival_grid(key), dtype=np.float64)
    if alpha == 0.0:
        return lt.copy()
    if alpha >= 1.0:
        raise SolverError(f"prevalence {alpha} >= 1 at {key}")
    prev = np.asarray(ing.prevalent_grid(key), dtype=np.float64)
    return lt - alpha * prev


def solve_noncancer_survival(
    ing: AdjustmentIngredients,
    key: StratumKey,
    diagnostics: Diagnostics | None = None,
    _memo: dict | None = None,
    _cell_counts: dict | None = None,
) -> AdjustedPopulationSurvival:
    """Recursive forward solve with lattice memoization.

    Clip/guard counters are tracked per lattice cell so the returned curve
    reports only the target stratum's interventions (matching the
    triangular oracle); diagnostics aggregate every newly computed cell.
    """
    diag = ensure_diagnostics(diagnostics)
    memo = _memo if _memo is not None else {}
    counts = _cell_counts if _cell_counts is not None else {}

    def value(k: StratumKey, t: int) -> float:
        if t == 0:
            return 1.0
        got = memo.get((k, t))
        if got is not None:
            return got
        prev_value = value(k, t - 1)
        a = ing.alpha(k)
        numer = _numerator(ing, k, a)[t]
        if t == 1:
            r = 1.0
        else:
            dF = np.asarray(ing.diagnosis_mass(k), dtype=np.float64)
            acc = 0.0
            for kk in range(1, t):
                if dF[kk - 1] == 0.0:
                    continue
                shifted = ing.shift(k, kk)
                sp = value(shifted, t - kk)
                so = float(np.asarray(ing.so_grid(shifted))[t - kk])
                acc += (1.0 - so / sp) * float(dF[kk - 1])
            r = 1.0 - acc
        if r < R_FLOOR:
            raise SolverError(f"residual denominator r({t})={r:.3e} at {k}; inputs are inconsistent")
        v = numer / ((1.0 - a) * r)
        cell = counts.setdefault(k, [0, 0])
        clipped = min(max(v, SP_CLIP_EPS), 1.0)
        if clipped != v:
            cell[0] += 1
            diag.incr("sp_clip")
        v = clipped
        if v > prev_value:
            cell[1] += 1
            diag.incr("sp_monotone_guard")
            v = prev_value
        memo[(k, t)] = v
        return v

    values = np.ones(ing.horizon + 1)
    for t in range(1, ing.horizon + 1):
        values[t] = value(key, t)
    clip, guard = counts.get(key, [0, 0])
    return AdjustedPopulationSurvival(key, values, clip, guard)


def solve_noncancer_survival_triangular(
    ing: AdjustmentIngredients,
    key: StratumKey,
    diagnostics: Diagnostics | None = None,
) -> AdjustedPopulationSurvival:
    """Independent oracle: explicit strictly-lower-triangular assembly.

    Collects every lattice cell the target depends on, orders cells so all
    dependencies (shifts toward higher age at smaller horizons) are solved
    first, then builds each cell's K x K kernel matrix and applies forward
    substitution on r = 1 - H @ dF.
    """
    diag = ensure_diagnostics(diagnostics)
    need: dict[StratumKey, int] = {key: ing.horizon}
    stack = [key]
    while stack:
        s = stack.pop()
        n = need[s]
        for k in range(1, n):
            s2 = ing.shift(s, k)
            if need.get(s2, 0) < n - k:
                need[s2] = n - k
                stack.append(s2)
    order = sorted(
        need,
        key=lambda s: (s.demographics, s.year - s.age, -s.age),
    )
    solved: dict[StratumKey, np.ndarray] = {}
    result: AdjustedPopulationSurvival | None = None
    for s in order:
        n = need[s]
        a = ing.alpha(s)
        numer = _numerator(ing, s, a)[1 : n + 1]
        dF = np.asarray(ing.diagnosis_mass(s), dtype=np.float64)[:n]
        H = np.zeros((n, n))
        for k in range(1, n):
            shifted = ing.shift(s, k)
            so = np.asarray(ing.so_grid(shifted), dtype=np.float64)
            sp = solved[shifted]
            m = n - k
            H[k:, k - 1] = 1.0 - so[1 : m + 1] / sp[1 : m + 1]
        r = 1.0 - H @ dF
        too_small = r < R_FLOOR
        if too_small.any():
            t_bad = int(np.flatnonzero(too_small)[0]) + 1
            raise SolverError(
                f"residual denominator r({t_bad})={r[t_bad - 1]:.3e} at {s}; inputs are inconsistent"
            )
        raw = numer / ((1.0 - a) * r)
        values = np.ones(n + 1)
        clips = guards = 0
        for t in range(1, n + 1):
            v = raw[t - 1]
            c = min(max(v, SP_CLIP_EPS), 1.0)
            if c != v:
                clips += 1
            v = c
            if v > values[t - 1]:
                guards += 1
                v = values[t - 1]
            values[t] = v
        solved[s] = values
        diag.incr("sp_clip", clips)
        diag.incr("sp_monotone_guard", guards)
        if s == key:
            result = AdjustedPopulationSurvival(s, values, clips, guards)
    assert result is not None
    return result


class AdjustmentEngine(AdjustmentIngredients):
    """Production ingredients: life table + incidence + registry survival.

    Wires the prevalence recursion, the diagnosis-mass products, and the
    per-cell diagonal survival into the solver, memoizing every grid so each
    lattice cell is computed once per run.
    """

    def __init__(
        self,
        life_table: LifeTable,
        incidence: IncidenceTable,
        overall_survival,
        horizon: int = 15,
        lag_eval: str = "mid_year",
        diagnostics: Diagnostics | None = None,
    ):
        self.life_table = life_table
        self.incidence = incidence
        self.so = overall_survival
        self.horizon = int(horizon)
        self.diagnostics = ensure_diagnostics(diagnostics)
        self.calc = PrevalenceCalculator(
            incidence, overall_survival, life_table, lag_eval, self.diagnostics
        )
        self._lt_grids: dict[StratumKey, np.ndarray] = {}
        self._so_grids: dict[StratumKey, np.ndarray] = {}
        self._masses: dict[StratumKey, np.ndarray] = {}
        self._prev: dict[StratumKey, np.ndarray] = {}
        self._curves: dict[StratumKey, AdjustedPopulationSurvival] = {}
        self._memo: dict = {}
        self._cell_counts: dict = {}

    def lt_survival_grid(self, key: StratumKey) -> np.ndarray:
        grid = self._lt_grids.get(key)
        if grid is None:
            grid = diagonal_survival(self.life_table, key, self.horizon, self.diagnostics).values
            self._lt_grids[key] = grid
        return grid

    def alpha(self, key: StratumKey) -> float:
        return self.calc.prevalence(key)

    def prevalent_grid(self, key: StratumKey) -> np.ndarray:
        grid = self._prev.get(key)
        if grid is None:
            weights = self.calc.prevalent_mix_weights(key)
            matrix = self.calc.survival_from_diagnosis_matrix(key, self.horizon)
            grid = prevalent_case_survival(key, weights, matrix).values
            self._prev[key] = grid
        return grid

    def so_grid(self, key: StratumKey) -> np.ndarray:
        grid = self._so_grids.get(key)
        if grid is None:
            grid = np.asarray(self.so(key, np.arange(self.horizon + 1, dtype=np.float64)))
            self._so_grids[key] = grid
        return grid

    def diagnosis_mass(self, key: StratumKey) -> np.ndarray:
        mass = self._masses.get(key)
        if mass is None:
            mass = time_to_diagnosis_increments(self.incidence, key, self.horizon, self.diagnostics)
            self._masses[key] = mass
        return mass

    def prevalent_case_curve(self, key: StratumKey) -> PrevalentCaseSurvival:
        return PrevalentCaseSurvival(key, self.prevalent_grid(key))

    def solve(self, key: StratumKey) -> AdjustedPopulationSurvival:
        curve = self._curves.get(key)
        if curve is None:
            curve = solve_noncancer_survival(
                self, key, self.diagnostics, self._memo, self._cell_counts
            )
            self._curves[key] = curve
        return curve

    def residuals(self, key: StratumKey) -> np.ndarray:
        """r(t) for t = 1..K at the key's cell (diagnostic export)."""
        self.solve(key)
        dF = self.diagnosis_mass(key)
        out = np.empty(self.horizon)
        for t in range(1, self.horizon + 1):
            acc = 0.0
            for k in range(1, t):
                if dF[k - 1] == 0.0:
                    continue
                shifted = self.shift(key, k)
                sp = self._memo[(shifted, t - k)]
                so = float(self.so_grid(shifted)[t - k])
                acc += (1.0 - so / sp) * float(dF[k - 1])
            out[t - 1] = 1.0 - acc
        return out

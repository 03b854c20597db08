"""Life-table ingestion and cohort survival along the Lexis diagonal.

A life table maps (age, calendar year, demographics) to q, the conditional
probability of dying within the year.  Survival for a cohort starting at a
given (age, year) cell is the product of (1 - q) along the diagonal where age
and year advance together.  Hazard within a year is constant, so the
cumulative hazard is piecewise linear with slope -log(1 - q) per year.

Lookups outside the declared age/year ranges are clamped to the nearest
in-range cell (both coordinates independently) and counted.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diagnostics import Diagnostics, log
from .registry import StratumKey


class LifeTableError(ValueError):
    """Malformed life-table input."""


class InfiniteHazardError(ValueError):
    """q = 1 makes the annual hazard infinite at the named cell."""


class LifeTable:
    """Annual conditional death probabilities keyed by (age, year, demographics).

    `require_complete=True` (the loader's mode) demands every cell of the
    declared age x year rectangle for each demographic group.  Tables derived
    from a single birth cohort only populate the Lexis diagonal and are built
    with `require_complete=False`; all pipeline lookups for such tables stay
    on the diagonal (shifts move age and year together, and clamping sends
    out-of-range keys to the diagonal corner cell).
    """

    def __init__(self, cells: dict, require_complete: bool = True):
        if not cells:
            raise LifeTableError("life table has no cells")
        self.cells: dict[tuple[int, int, tuple], float] = {}
        for (age, year, demo), q in cells.items():
            q = float(q)
            if not 0.0 <= q <= 1.0:
                raise LifeTableError(f"q={q} outside [0,1] at cell (age={age}, year={year}, {demo})")
            self.cells[(int(age), int(year), demo)] = q
        ages = [k[0] for k in self.cells]
        years = [k[1] for k in self.cells]
        self.age_min, self.age_max = min(ages), max(ages)
        self.year_min, self.year_max = min(years), max(years)
        self.demographics = sorted({k[2] for k in self.cells})
        if require_complete:
            for demo in self.demographics:
                for age in range(self.age_min, self.age_max + 1):
                    for year in range(self.year_min, self.year_max + 1):
                        if (age, year, demo) not in self.cells:
                            raise LifeTableError(
                                f"missing cell (age={age}, year={year}, {demo})"
                            )

    def clamp(self, age: int, year: int, diagnostics: Diagnostics | None = None) -> tuple[int, int]:
        a = min(max(age, self.age_min), self.age_max)
        y = min(max(year, self.year_min), self.year_max)
        if (a, y) != (age, year) and diagnostics is not None:
            diagnostics.incr("lifetable_clamp")
        return a, y

    def q(self, age: int, year: int, demo: tuple, diagnostics: Diagnostics | None = None) -> float:
        a, y = self.clamp(age, year, diagnostics)
        try:
            return self.cells[(a, y, demo)]
        except KeyError:
            raise LifeTableError(f"no life-table cell (age={a}, year={y}, {demo})") from None

    def q_diagonal(self, key: StratumKey, steps: int, diagnostics: Diagnostics | None = None) -> np.ndarray:
        """q at (age+j, year+j) for j = 0..steps-1."""
        return np.array(
            [self.q(key.age + j, key.year + j, key.demographics, diagnostics) for j in range(steps)]
        )


@dataclass(frozen=True)
class DiagonalSurvival:
    """Cohort survival extracted along the diagonal: values at t = 0..K."""

    origin: StratumKey
    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v[0] != 1.0:
            raise ValueError("diagonal survival must start at 1")
        if (np.diff(v) > 1e-15).any() or v.min() < 0 or v.max() > 1:
            raise ValueError("diagonal survival must be non-increasing in [0,1]")


def diagonal_survival(
    lt: LifeTable, key: StratumKey, horizon: int, diagnostics: Diagnostics | None = None
) -> DiagonalSurvival:
    """S(t) = prod_{j<t} (1 - q(age+j, year+j)) for t = 0..horizon."""
    q = lt.q_diagonal(key, horizon, diagnostics)
    values = np.concatenate(([1.0], np.cumprod(1.0 - q)))
    return DiagonalSurvival(key, values)


def diagonal_cumulative_hazard(
    lt: LifeTable, key: StratumKey, t, diagnostics: Diagnostics | None = None
):
    """Piecewise-linear cumulative hazard along the diagonal.

    Annual slope is -log(1 - q_j); at integer t this equals -log of the
    diagonal survival.  Raises InfiniteHazardError when a needed q equals 1.
    """
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if (t_arr < 0).any():
        raise ValueError("cumulative hazard requires t >= 0")
    steps = int(np.ceil(t_arr.max())) if t_arr.size else 0
    if steps == 0:
        out = np.zeros_like(t_arr)
        return out if np.ndim(t) else float(out[0])
    q = lt.q_diagonal(key, steps, diagnostics)
    bad = np.flatnonzero(q == 1.0)
    if bad.size:
        j = int(bad[0])
        raise InfiniteHazardError(
            f"q=1 at cell (age={key.age + j}, year={key.year + j}, {key.demographics})"
        )
    slopes = -np.log1p(-q)
    cum = np.concatenate(([0.0], np.cumsum(slopes)))
    idx = np.minimum(np.floor(t_arr).astype(int), steps)
    frac = t_arr - idx
    slope_at = np.where(idx < steps, slopes[np.minimum(idx, steps - 1)], 0.0)
    out = cum[idx] + frac * slope_at
    return out if np.ndim(t) else float(out[0])


def load_life_table(path) -> LifeTable:
    """Read a life-table CSV with header age,year,sex,q.

    The observed ages x years rectangle must be complete for every sex;
    missing cells, duplicates, and q outside [0,1] are hard errors reported
    with their coordinates / row numbers.
    """
    path = Path(path)
    cells: dict[tuple[int, int, tuple], float] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"age", "year", "sex", "q"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise LifeTableError(f"{path.name}: header must contain {sorted(required)}")
        for rownum, row in enumerate(reader, start=2):
            try:
                age = int(row["age"])
                year = int(row["year"])
                q = float(row["q"])
            except (TypeError, ValueError) as exc:
                raise LifeTableError(f"{path.name}:{rownum}: {exc}") from None
            demo = (row["sex"].strip(),)
            keyc = (age, year, demo)
            if keyc in cells:
                raise LifeTableError(f"{path.name}:{rownum}: duplicate cell (age={age}, year={year}, sex={demo[0]})")
            if not 0.0 <= q <= 1.0:
                raise LifeTableError(f"{path.name}:{rownum}: q={q} outside [0,1] at (age={age}, year={year}, sex={demo[0]})")
            cells[keyc] = q
    table = LifeTable(cells, require_complete=True)
    log.info("loaded life table %s: ages %d-%d, years %d-%d, %d groups",
             path.name, table.age_min, table.age_max, table.year_min, table.year_max,
             len(table.demographics))
    return table

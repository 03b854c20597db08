"""Registry data model, stratification, and product-limit estimation.

A registry row carries the covariates fixed at diagnosis (age, calendar year,
demographic codes), the follow-up time in years, and an all-cause death
indicator.  Records are grouped into strata by their diagnosis covariates and
each stratum gets a Kaplan-Meier / Nelson-Aalen fit.

Conventions: the at-risk set at time u is {T >= u} (subjects dying at u count
as at risk at u), and deaths are processed before censorings at tied times.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diagnostics import Diagnostics, ensure_diagnostics, log


class EmptyInputError(ValueError):
    """Raised when an operation requires at least one record."""


@dataclass(frozen=True)
class PatientRecord:
    """One registry row: covariates at diagnosis, follow-up, event flag."""

    age_diag: int
    year_diag: int
    demographics: tuple
    time: float
    event: bool

    def __post_init__(self):
        if self.time < 0:
            raise ValueError(f"negative follow-up time {self.time}")
        if self.age_diag < 0:
            raise ValueError(f"negative age at diagnosis {self.age_diag}")


@dataclass(frozen=True, order=True)
class StratumKey:
    """Stratum identifier: (age, calendar year, demographic codes)."""

    age: int
    year: int
    demographics: tuple

    def shift(self, s: int) -> "StratumKey":
        """Move s years along the Lexis diagonal (age and year together)."""
        return StratumKey(self.age + s, self.year + s, self.demographics)


@dataclass(frozen=True)
class Banding:
    """Stratification config: band widths for age and calendar year."""

    age_width: int = 1
    year_width: int = 1

    def __post_init__(self):
        if self.age_width < 1 or self.year_width < 1:
            raise ValueError("band widths must be >= 1")


class RegistryFrame:
    """Column-oriented registry (ages, years, demo codes, times, events).

    Demographics tuples are interned into a small vocabulary so grouping can
    be done with integer arrays.
    """

    def __init__(self, age, year, demo_code, time, event, demo_vocab):
        self.age = np.asarray(age, dtype=np.int64)
        self.year = np.asarray(year, dtype=np.int64)
        self.demo_code = np.asarray(demo_code, dtype=np.int64)
        self.time = np.asarray(time, dtype=np.float64)
        self.event = np.asarray(event, dtype=bool)
        self.demo_vocab: list[tuple] = list(demo_vocab)
        n = self.age.shape[0]
        if not all(a.shape[0] == n for a in (self.year, self.demo_code, self.time, self.event)):
            raise ValueError("registry columns have unequal lengths")
        if n and self.time.min() < 0:
            raise ValueError("negative follow-up time in registry")

    @property
    def n(self) -> int:
        return self.age.shape[0]

    @property
    def n_events(self) -> int:
        return int(self.event.sum())

    @classmethod
    def from_records(cls, records: Sequence[PatientRecord]) -> "RegistryFrame":
        vocab: dict[tuple, int] = {}
        codes = np.empty(len(records), dtype=np.int64)
        for i, r in enumerate(records):
            codes[i] = vocab.setdefault(r.demographics, len(vocab))
        return cls(
            [r.age_diag for r in records],
            [r.year_diag for r in records],
            codes,
            [r.time for r in records],
            [r.event for r in records],
            list(vocab),
        )

    def to_records(self) -> list[PatientRecord]:
        return [
            PatientRecord(int(a), int(y), self.demo_vocab[c], float(t), bool(e))
            for a, y, c, t, e in zip(self.age, self.year, self.demo_code, self.time, self.event)
        ]

    def subset(self, mask: np.ndarray) -> "RegistryFrame":
        return RegistryFrame(
            self.age[mask], self.year[mask], self.demo_code[mask],
            self.time[mask], self.event[mask], self.demo_vocab,
        )


def as_frame(records) -> RegistryFrame:
    if isinstance(records, RegistryFrame):
        return records
    return RegistryFrame.from_records(list(records))


class EventTable:
    """Risk-set summary of one stratum: distinct times, deaths, censorings.

    Keeps the raw (time, event) arrays so tables can be merged exactly.
    """

    def __init__(self, raw_times: np.ndarray, raw_events: np.ndarray):
        raw_times = np.asarray(raw_times, dtype=np.float64)
        raw_events = np.asarray(raw_events, dtype=bool)
        if raw_times.size == 0:
            raise EmptyInputError("event table needs at least one observation")
        order = np.argsort(raw_times, kind="mergesort")
        self.raw_times = raw_times[order]
        self.raw_events = raw_events[order]
        self.times, inverse = np.unique(self.raw_times, return_inverse=True)
        m = self.times.shape[0]
        self.deaths = np.bincount(inverse, weights=self.raw_events.astype(float), minlength=m).astype(np.int64)
        totals = np.bincount(inverse, minlength=m).astype(np.int64)
        self.censored = totals - self.deaths
        exits = np.concatenate(([0], np.cumsum(totals)[:-1]))
        self.at_risk = raw_times.shape[0] - exits
        self._validate()

    def _validate(self):
        if (self.deaths < 0).any() or (self.censored < 0).any():
            raise ValueError("negative counts in event table")
        if (np.diff(self.at_risk) > 0).any():
            raise ValueError("at-risk counts must be non-increasing")

    @property
    def n(self) -> int:
        return int(self.at_risk[0]) if self.at_risk.size else 0

    def merge(self, other: "EventTable") -> "EventTable":
        return EventTable(
            np.concatenate([self.raw_times, other.raw_times]),
            np.concatenate([self.raw_events, other.raw_events]),
        )


def build_strata(records, banding: Banding = Banding()) -> dict[StratumKey, EventTable]:
    """Partition records into strata keyed by banded (age, year, demographics).

    Band representatives are the lower band edges.  Every record lands in
    exactly one stratum; stratum sizes sum to the record count.
    """
    frame = as_frame(records)
    if frame.n == 0:
        raise EmptyInputError("cannot stratify an empty registry")
    b_age = (frame.age // banding.age_width) * banding.age_width
    b_year = (frame.year // banding.year_width) * banding.year_width
    order = np.lexsort((b_year, b_age, frame.demo_code))
    strata: dict[StratumKey, EventTable] = {}
    ca, cy, cc = b_age[order], b_year[order], frame.demo_code[order]
    boundaries = np.flatnonzero(
        (np.diff(ca) != 0) | (np.diff(cy) != 0) | (np.diff(cc) != 0)
    ) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [frame.n]))
    for s, e in zip(starts, ends):
        idx = order[s:e]
        key = StratumKey(int(ca[s]), int(cy[s]), frame.demo_vocab[int(cc[s])])
        strata[key] = EventTable(frame.time[idx], frame.event[idx])
    return strata


def merge_small_strata(
    strata: dict[StratumKey, EventTable],
    min_size: int = 10,
    diagnostics: Diagnostics | None = None,
) -> tuple[dict[StratumKey, EventTable], dict[StratumKey, StratumKey]]:
    """Fold strata with fewer than min_size subjects into a neighbor.

    Preference: adjacent age with the same year, then the nearest existing
    stratum with the same demographics (Chebyshev distance on (age, year),
    ties toward lower age then lower year).  Returns the merged map plus a
    lookup from every original key to the key that now holds its records.
    """
    diag = ensure_diagnostics(diagnostics)
    merged = dict(strata)
    alias: dict[StratumKey, StratumKey] = {k: k for k in strata}

    def neighbor(key: StratumKey) -> StratumKey | None:
        pool = [k for k in merged if k.demographics == key.demographics and k != key]
        if not pool:
            return None
        for cand in (StratumKey(key.age - 1, key.year, key.demographics),
                     StratumKey(key.age + 1, key.year, key.demographics)):
            if cand in merged:
                return cand
        return min(
            pool,
            key=lambda k: (max(abs(k.age - key.age), abs(k.year - key.year)),
                           abs(k.age - key.age) + abs(k.year - key.year),
                           k.age, k.year),
        )

    while True:
        small = [k for k, t in merged.items() if t.n < min_size]
        if not small:
            break
        small.sort(key=lambda k: (merged[k].n, k))
        key = small[0]
        target = neighbor(key)
        if target is None:
            break
        merged[target] = merged[target].merge(merged.pop(key))
        for orig, cur in alias.items():
            if cur == key:
                alias[orig] = target
        diag.incr("stratum_merge")
        log.debug("merged stratum %s (n<%d) into %s", key, min_size, target)
    return merged, alias


class StepSurvivalCurve:
    """Right-continuous step survival curve with S(0) = 1."""

    def __init__(self, jump_times: np.ndarray, values: np.ndarray):
        self.jump_times = np.asarray(jump_times, dtype=np.float64)
        self.values = np.asarray(values, dtype=np.float64)
        if self.jump_times.size:
            if (np.diff(self.jump_times) <= 0).any():
                raise ValueError("jump times must be strictly increasing")
            if self.jump_times[0] <= 0:
                raise ValueError("jumps must occur at positive times")
            if (np.diff(self.values) > 1e-15).any():
                raise ValueError("survival curve must be non-increasing")
            if self.values.max() > 1 or self.values.min() < 0:
                raise ValueError("survival values must lie in [0, 1]")

    def survival_at(self, t):
        """Right-continuous evaluation; constant after the last jump."""
        t = np.asarray(t, dtype=np.float64)
        if self.jump_times.size == 0:
            out = np.ones_like(t)
            return out if out.ndim else float(out)
        idx = np.searchsorted(self.jump_times, t, side="right") - 1
        out = np.where(idx >= 0, self.values[np.maximum(idx, 0)], 1.0)
        return out if out.ndim else float(out)

    __call__ = survival_at


class CumulativeHazardCurve:
    """Non-decreasing step function, 0 at t = 0."""

    def __init__(self, jump_times: np.ndarray, values: np.ndarray):
        self.jump_times = np.asarray(jump_times, dtype=np.float64)
        self.values = np.asarray(values, dtype=np.float64)
        if self.jump_times.size and (np.diff(self.values) < -1e-15).any():
            raise ValueError("cumulative hazard must be non-decreasing")

    def hazard_at(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.jump_times.size == 0:
            out = np.zeros_like(t)
            return out if out.ndim else float(out)
        idx = np.searchsorted(self.jump_times, t, side="right") - 1
        out = np.where(idx >= 0, self.values[np.maximum(idx, 0)], 0.0)
        return out if out.ndim else float(out)

    __call__ = hazard_at


def kaplan_meier(table: EventTable) -> StepSurvivalCurve:
    """Product-limit curve of an event table (jumps at death times only)."""
    has_death = table.deaths > 0
    t = table.times[has_death]
    factors = 1.0 - table.deaths[has_death] / table.at_risk[has_death]
    return StepSurvivalCurve(t, np.cumprod(factors))


def nelson_aalen(table: EventTable) -> CumulativeHazardCurve:
    """Cumulative-hazard step function with increments deaths / at-risk."""
    has_death = table.deaths > 0
    t = table.times[has_death]
    inc = table.deaths[has_death] / table.at_risk[has_death]
    return CumulativeHazardCurve(t, np.cumsum(inc))


def survival_at(curve, t):
    """Evaluate any survival-like curve right-continuously at t >= 0."""
    return curve.survival_at(t)

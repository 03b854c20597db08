"""Per-stratum overall-survival lookup built from registry data.

Each stratum gets a Kaplan-Meier curve continued by the exponential tail fit;
queries for strata the registry never saw are clamped to the declared
age/year ranges and, failing an exact hit, resolved to the nearest existing
stratum with the same demographics.  Curves and tail fits are cached lazily.
"""
from __future__ import annotations

import numpy as np

from .diagnostics import Diagnostics, ensure_diagnostics
from .extrapolation import AnnualGridSurvival, ExtendedSurvival, extend_survival, follow_up_cutoff
from .lifetable import LifeTable, diagonal_survival
from .registry import (
    Banding,
    EventTable,
    StratumKey,
    as_frame,
    build_strata,
    kaplan_meier,
    merge_small_strata,
)

LIFETABLE_POP_GRID = 120  # annual steps of the per-cell population-cap grid


class ProviderError(ValueError):
    """No usable stratum for the requested demographics."""


class OverallSurvivalProvider:
    """Callable (key, times) -> overall-survival values for cancer patients.

    When a life table is supplied, extrapolated values are additionally
    capped so that beyond the fitted cutoff a patient cohort's survival
    decays at least as fast as the general population of its own cell
    (non-negative excess hazard); this only ever binds where a noisy tail
    fit came out implausibly flat.
    """

    def __init__(
        self,
        strata: dict[StratumKey, EventTable],
        alias: dict[StratumKey, StratumKey] | None = None,
        anchor_points: int = 4,
        tau_min_at_risk: int = 5,
        population_floor: LifeTable | None = None,
        diagnostics: Diagnostics | None = None,
    ):
        if not strata:
            raise ProviderError("no strata available")
        self.strata = strata
        self.alias = dict(alias) if alias else {}
        self.anchor_points = int(anchor_points)
        self.tau_min_at_risk = int(tau_min_at_risk)
        self.population_floor = population_floor
        self.diagnostics = ensure_diagnostics(diagnostics)
        self._curves: dict[StratumKey, ExtendedSurvival] = {}
        self._pop_curves: dict[StratumKey, AnnualGridSurvival] = {}
        self._resolved: dict[StratumKey, StratumKey] = {}
        self._index: dict[tuple, list[StratumKey]] = {}
        for key in strata:
            self._index.setdefault(key.demographics, []).append(key)
        self._ranges = {}
        for demo, keys in self._index.items():
            ages = [k.age for k in keys]
            years = [k.year for k in keys]
            self._ranges[demo] = (min(ages), max(ages), min(years), max(years))

    @classmethod
    def from_registry(
        cls,
        records,
        banding: Banding = Banding(),
        min_stratum_size: int = 10,
        anchor_points: int = 4,
        tau_min_at_risk: int = 5,
        population_floor: LifeTable | None = None,
        diagnostics: Diagnostics | None = None,
    ) -> "OverallSurvivalProvider":
        diag = ensure_diagnostics(diagnostics)
        strata = build_strata(as_frame(records), banding)
        merged, alias = merge_small_strata(strata, min_stratum_size, diag)
        return cls(merged, alias, anchor_points, tau_min_at_risk, population_floor, diag)

    def resolve(self, key: StratumKey) -> StratumKey:
        """Map a requested key onto a stratum that actually has data."""
        hit = self._resolved.get(key)
        if hit is not None:
            return hit
        resolved = self.alias.get(key, key)
        if resolved not in self.strata:
            demo = key.demographics
            keys = self._index.get(demo)
            if not keys:
                raise ProviderError(f"no strata with demographics {demo}")
            a_lo, a_hi, y_lo, y_hi = self._ranges[demo]
            a = min(max(key.age, a_lo), a_hi)
            y = min(max(key.year, y_lo), y_hi)
            cand = self.alias.get(StratumKey(a, y, demo), StratumKey(a, y, demo))
            if cand in self.strata:
                resolved = cand
            else:
                resolved = min(
                    keys,
                    key=lambda k: (
                        max(abs(k.age - a), abs(k.year - y)),
                        abs(k.age - a) + abs(k.year - y),
                        k.age,
                        k.year,
                    ),
                )
            self.diagnostics.incr("so_stratum_clamp")
        self._resolved[key] = resolved
        return resolved

    def curve(self, key: StratumKey) -> ExtendedSurvival:
        resolved = self.resolve(key)
        curve = self._curves.get(resolved)
        if curve is None:
            table = self.strata[resolved]
            km = kaplan_meier(table)
            tau = follow_up_cutoff(table, self.tau_min_at_risk)
            curve = extend_survival(km, tau, self.anchor_points, self.diagnostics)
            self._curves[resolved] = curve
        return curve

    def _population_curve(self, resolved: StratumKey) -> AnnualGridSurvival:
        pop = self._pop_curves.get(resolved)
        if pop is None:
            grid = diagonal_survival(
                self.population_floor, resolved, LIFETABLE_POP_GRID, self.diagnostics
            ).values
            pop = AnnualGridSurvival(np.maximum(grid, 1e-12), self.diagnostics)
            self._pop_curves[resolved] = pop
        return pop

    def _harden_tail(self, resolved: StratumKey, curve: ExtendedSurvival, times, values):
        """Apply the life-table guards to extrapolated values (t > tau).

        The fitted constant rate embeds the population hazard of the anchor
        years only; multiplying by the population's excess cumulative hazard
        past tau restores its growth with attained age.  The hard cap keeps
        the patient cohort from outliving its own general-population cell
        (non-negative excess hazard), which only binds on implausibly flat
        noise fits.
        """
        t = np.asarray(times, dtype=np.float64)
        pop = self._population_curve(resolved)
        tau = curve.tau
        lam_tau = pop.cumulative_hazard_at(tau)
        span = max(self.anchor_points - 1, 1)
        lam_fit = (lam_tau - pop.cumulative_hazard_at(max(tau - span, 0.0))) / min(
            span, tau
        ) if tau > 0 else 0.0
        excess_growth = pop.cumulative_hazard_at(t) - lam_tau - lam_fit * (t - tau)
        growth = np.minimum(np.exp(-excess_growth), 1.0)
        cap = float(curve.base.survival_at(tau)) * np.minimum(
            np.exp(-(pop.cumulative_hazard_at(t) - lam_tau)), 1.0
        )
        hardened = np.minimum(values * growth, cap)
        out = np.where(t > tau, hardened, values)
        hit = out < values
        if hit.any():
            self.diagnostics.incr("so_population_cap", int(np.sum(hit)))
        return out

    def survival(self, key: StratumKey, times) -> np.ndarray:
        resolved = self.resolve(key)
        curve = self.curve(key)
        values = np.asarray(curve.survival_at(times), dtype=np.float64)
        if self.population_floor is not None:
            values = self._harden_tail(resolved, curve, times, values)
        return values if values.ndim else float(values)

    __call__ = survival

    def grid(self, key: StratumKey, horizon: int) -> np.ndarray:
        """Survival at integer lags 0..horizon."""
        return np.asarray(self.survival(key, np.arange(horizon + 1, dtype=np.float64)))

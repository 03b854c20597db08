"""Exponential tail extrapolation and log-linear grid interpolation.

Beyond the end of reliable follow-up a stratum's survival curve is continued
as exp(-g0 - g1*t), with (g0, g1) the least-squares fit of -log S at a few
integer anchor times near the cutoff.  Between annual grid points, survival
is interpolated log-linearly (constant hazard within the year).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diagnostics import Diagnostics, ensure_diagnostics, log
from .registry import EventTable, StepSurvivalCurve


class ExtrapolationError(ValueError):
    """Tail fit impossible for this stratum."""


def follow_up_cutoff(table: EventTable, min_at_risk: int = 5) -> float:
    """Largest observed time whose risk set still holds min_at_risk subjects.

    Falls back to the last observed time when no time qualifies.
    """
    ok = table.at_risk >= min_at_risk
    if ok.any():
        return float(table.times[ok][-1])
    return float(table.times[-1])


def select_anchor_times(curve: StepSurvivalCurve, tau: float, h: int) -> np.ndarray:
    """The last h integer grid times <= tau where the curve is positive.

    Fewer than h available -> all of them; fewer than two -> error (the
    caller falls back to carrying the last value forward).
    """
    if h < 2:
        raise ValueError("need at least two anchor points")
    grid = np.arange(0, int(np.floor(tau)) + 1, dtype=np.float64)
    positive = grid[curve.survival_at(grid) > 0.0]
    if positive.shape[0] < 2:
        raise ExtrapolationError(f"only {positive.shape[0]} positive grid point(s) at or before tau={tau}")
    return positive[-h:]


def fit_exponential_tail(
    curve: StepSurvivalCurve, anchors: np.ndarray, diagnostics: Diagnostics | None = None
) -> tuple[float, float]:
    """OLS of -log S(anchor) on anchor time; negative slope clipped to 0."""
    diag = ensure_diagnostics(diagnostics)
    anchors = np.asarray(anchors, dtype=np.float64)
    if np.unique(anchors).shape[0] < 2:
        raise ExtrapolationError("anchor times are all equal; tail fit is singular")
    values = np.asarray(curve.survival_at(anchors), dtype=np.float64)
    if (values <= 0).any():
        raise ExtrapolationError("tail fit needs positive survival at every anchor")
    y = -np.log(values)
    g1, g0 = np.polyfit(anchors, y, 1)
    if g1 < 0.0:
        # float noise on flat curves is not worth reporting
        if g1 < -1e-12:
            diag.incr("extrapolation_slope_clipped")
            log.debug("negative tail slope %.3g clipped to 0", g1)
        g1 = 0.0
        g0 = float(np.mean(y))
    return float(g0), float(g1)


@dataclass
class ExtendedSurvival:
    """A step curve continued past tau by exp(-g0 - g1*t), clipped monotone."""

    base: StepSurvivalCurve
    tau: float
    g0: float
    g1: float

    def survival_at(self, t):
        t = np.asarray(t, dtype=np.float64)
        base_vals = np.asarray(self.base.survival_at(t), dtype=np.float64)
        cap = float(self.base.survival_at(self.tau))
        tail = np.minimum(np.exp(-self.g0 - self.g1 * t), cap)
        out = np.where(t <= self.tau, base_vals, tail)
        return out if out.ndim else float(out)

    __call__ = survival_at


def extend_survival(
    curve: StepSurvivalCurve,
    tau: float,
    h: int,
    diagnostics: Diagnostics | None = None,
) -> ExtendedSurvival:
    """Fit the exponential tail; on failure carry the value at tau forward."""
    diag = ensure_diagnostics(diagnostics)
    try:
        anchors = select_anchor_times(curve, tau, h)
        g0, g1 = fit_exponential_tail(curve, anchors, diag)
    except ExtrapolationError as exc:
        diag.incr("extrapolation_fallback")
        log.warning("tail fit failed (%s); carrying last value forward", exc)
        s_tau = float(curve.survival_at(tau))
        g0 = -np.log(s_tau) if s_tau > 0 else np.inf
        g1 = 0.0
    return ExtendedSurvival(curve, float(tau), g0, g1)


def loglinear_interpolate(values, t, diagnostics: Diagnostics | None = None):
    """Log-linear interpolation of an annual survival grid at real t in [0, K].

    Exact (bitwise) at integer grid points.  A zero right endpoint keeps the
    geometric decay of the previous interval (counted); a zero left endpoint
    makes the whole interval zero.
    """
    diag = ensure_diagnostics(diagnostics)
    values = np.asarray(values, dtype=np.float64)
    k_max = values.shape[0] - 1
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if (t_arr < 0).any() or (t_arr > k_max).any():
        raise ValueError(f"t must lie within [0, {k_max}]")
    floor = np.floor(t_arr)
    on_grid = t_arr == floor
    idx = floor.astype(int)
    frac = t_arr - floor
    out = np.empty_like(t_arr)
    out[on_grid] = values[idx[on_grid]]
    interior = ~on_grid
    if interior.any():
        left = values[idx[interior]]
        right = values[idx[interior] + 1]
        res = np.empty(left.shape)
        both = (left > 0) & (right > 0)
        res[both] = np.exp(
            (1.0 - frac[interior][both]) * np.log(left[both])
            + frac[interior][both] * np.log(right[both])
        )
        dead = left == 0
        res[dead] = 0.0
        hit_zero = (left > 0) & (right == 0)
        if hit_zero.any():
            diag.incr("interp_zero_endpoint", int(hit_zero.sum()))
            ji = idx[interior][hit_zero]
            usable = ji >= 1
            prev_left = values[np.maximum(ji - 1, 0)]
            ratio = np.where(
                usable & (prev_left > 0), values[ji] / np.maximum(prev_left, 1e-300), 1.0
            )
            ratio = np.minimum(ratio, 1.0)
            res[hit_zero] = values[ji] * ratio ** frac[interior][hit_zero]
        out[interior] = res
    return out if np.ndim(t) else float(out[0])


class AnnualGridSurvival:
    """Annual survival grid with log-linear interpolation and exact hazards.

    Grid values must be positive (callers floor them first); the cumulative
    hazard is piecewise linear with the yearly slopes implied by the grid,
    and evaluation past the grid carries the last slope forward (counted).
    """

    def __init__(self, values: np.ndarray, diagnostics: Diagnostics | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        if self.values[0] != 1.0:
            raise ValueError("annual survival grid must start at 1")
        if (self.values <= 0).any():
            raise ValueError("annual survival grid must be positive; floor it first")
        self.diagnostics = ensure_diagnostics(diagnostics)
        self.log_values = -np.log(self.values)
        self.slopes = np.diff(self.log_values)
        self.k_max = self.values.shape[0] - 1

    def cumulative_hazard_at(self, t):
        t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
        if (t_arr < 0).any():
            raise ValueError("t must be >= 0")
        beyond = t_arr > self.k_max
        if beyond.any():
            self.diagnostics.incr("grid_extended_eval", int(beyond.sum()))
        idx = np.minimum(np.floor(t_arr).astype(int), self.k_max - 1) if self.k_max > 0 else np.zeros_like(t_arr, dtype=int)
        frac = t_arr - idx
        out = self.log_values[idx] + frac * (self.slopes[idx] if self.k_max > 0 else 0.0)
        return out if np.ndim(t) else float(out[0])

    def survival_at(self, t):
        t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
        out = np.exp(-np.atleast_1d(self.cumulative_hazard_at(t_arr)))
        exact = (t_arr == np.floor(t_arr)) & (t_arr <= self.k_max) & (t_arr >= 0)
        if exact.any():
            out[exact] = self.values[t_arr[exact].astype(int)]
        return out if np.ndim(t) else float(out[0])

"""Named run-level counters and the package logger.

Every non-fatal numerical intervention in the pipeline (table clamps, weight
floors, monotonicity guards, extrapolation fallbacks, ...) increments a named
counter instead of passing silently.  A `Diagnostics` instance is threaded
through the pipeline explicitly so concurrent runs never share state; worker
results are folded back with `merge`.
"""
from __future__ import annotations

import logging
from collections import Counter

log = logging.getLogger("netadjust")


class Diagnostics:
    """Mutable bag of named event counters."""

    def __init__(self) -> None:
        self.counts: Counter[str] = Counter()

    def incr(self, name: str, n: int = 1) -> None:
        if n:
            self.counts[name] += int(n)

    def get(self, name: str) -> int:
        return self.counts.get(name, 0)

    def merge(self, other: "Diagnostics | dict") -> None:
        items = other.counts if isinstance(other, Diagnostics) else other
        self.counts.update(items)

    def as_dict(self) -> dict:
        return {k: int(v) for k, v in sorted(self.counts.items())}

    def __repr__(self) -> str:
        return f"Diagnostics({self.as_dict()})"


def ensure_diagnostics(diagnostics: Diagnostics | None) -> Diagnostics:
    """Return the given instance or a throwaway one."""
    return diagnostics if diagnostics is not None else Diagnostics()

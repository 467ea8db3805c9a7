"""Grouped price analytics over assembled ad events.

Groups partition the events by one reporting dimension; per group the table
carries count, nearest-rank quartiles, the 95th percentile, the maximum and
the CDF points of the USD prices.  This emits plot data, not plots.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import Decimal
from typing import Callable, Sequence

from .features import AdEvent
from .pricing import nearest_rank

GROUPINGS: dict[str, Callable[[AdEvent], str]] = {
    "day-of-week": lambda e: e.day_of_week.value,
    "time-of-day": lambda e: str(e.time_of_day),
    "iab": lambda e: e.iab_category,
    "age": lambda e: e.age_bucket.value,
    "country": lambda e: e.location,
    "cookie-sync": lambda e: "synced" if e.cookie_sync else "not-synced",
}


class UnknownGroupingError(ValueError):
    pass


@dataclass(frozen=True)
class GroupStats:
    group: str
    count: int
    median: Decimal
    q1: Decimal
    q3: Decimal
    p95: Decimal
    max: Decimal
    cdf: tuple[tuple[Decimal, float], ...]


@dataclass(frozen=True)
class AnalysisTable:
    grouping: str
    rows: tuple[GroupStats, ...]


def analyze_prices(events: Sequence[AdEvent], grouping: str) -> AnalysisTable:
    """Nearest-rank price statistics per group of the chosen dimension."""
    if grouping not in GROUPINGS:
        raise UnknownGroupingError(
            f"unknown grouping {grouping!r}; expected one of {', '.join(sorted(GROUPINGS))}"
        )
    if not events:
        raise ValueError("no events to analyze")
    key = GROUPINGS[grouping]
    groups: dict[str, list[Decimal]] = {}
    for event in events:
        groups.setdefault(key(event), []).append(event.price_value)

    rows = []
    for group in sorted(groups):
        values = sorted(groups[group])
        n = len(values)
        cdf = tuple((v, (i + 1) / n) for i, v in enumerate(values))
        rows.append(
            GroupStats(
                group=group,
                count=n,
                median=nearest_rank(values, 50),
                q1=nearest_rank(values, 25),
                q3=nearest_rank(values, 75),
                p95=nearest_rank(values, 95),
                max=values[-1],
                cdf=cdf,
            )
        )
    return AnalysisTable(grouping=grouping, rows=tuple(rows))


def table_to_dicts(table: AnalysisTable, with_cdf: bool = True) -> list[dict]:
    out = []
    for row in table.rows:
        item: dict[str, object] = {
            "grouping": table.grouping,
            "group": row.group,
            "count": row.count,
            "median": str(row.median),
            "q1": str(row.q1),
            "q3": str(row.q3),
            "p95": str(row.p95),
            "max": str(row.max),
        }
        if with_cdf:
            item["cdf"] = [[str(v), f] for v, f in row.cdf]
        out.append(item)
    return out

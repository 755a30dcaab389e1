"""Derivation of analysis variables from questionnaire-style inputs.

Covers night-sleep duration from clock times, the eligibility rule on the
number of observed waves, derived predictor transforms and simple
(mode/median) imputation of covariates.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .data import LongitudinalSeries
from .errors import SchemaError

MISSING = None
SEASONS = ("winter", "spring", "summer", "autumn")
QUARTILE_LABELS = ("Q1", "Q2", "Q3", "Q4")
CESD_CUTOFF = 23.0
PRETERM_WEEKS = 37.0
OBESITY_Z = 2.0
DEFAULT_PLAUSIBLE_HOURS = (4.0, 16.0)


@dataclass(frozen=True, order=True)
class ClockTime:
    hours: int
    minutes: int

    def __post_init__(self):
        if not (isinstance(self.hours, int) and 0 <= self.hours <= 23):
            raise ValueError(f"hours out of range: {self.hours!r}")
        if not (isinstance(self.minutes, int) and 0 <= self.minutes <= 59):
            raise ValueError(f"minutes out of range: {self.minutes!r}")

    @classmethod
    def parse(cls, text: str) -> "ClockTime":
        """Parse ``HH:MM`` (24-hour clock)."""
        parts = str(text).strip().split(":")
        if len(parts) != 2 or not all(p.isdigit() for p in parts):
            raise ValueError(f"malformed clock time {text!r}; expected HH:MM")
        return cls(int(parts[0]), int(parts[1]))

    @property
    def minute_of_day(self) -> int:
        return 60 * self.hours + self.minutes

    def __str__(self):
        return f"{self.hours:02d}:{self.minutes:02d}"


@dataclass(frozen=True)
class SleepReport:
    bedtime: ClockTime | None
    waketime: ClockTime | None
    age_label: str

    @property
    def duration(self) -> float | None:
        if self.bedtime is None or self.waketime is None:
            return None
        return compute_night_duration(self.bedtime, self.waketime)


def compute_night_duration(bed: ClockTime, wake: ClockTime) -> float:
    """Hours from ``bed`` to ``wake``, wrapping past midnight.

    Bedtime is taken to precede waketime on the following day whenever the
    clock reading of ``wake`` is not later than ``bed``.
    """
    delta = (wake.minute_of_day - bed.minute_of_day) % (24 * 60)
    if delta == 0:
        raise ValueError(f"bedtime {bed} equals waketime {wake}; duration is ambiguous")
    return delta / 60.0


def plausibility_flags(durations, accept: tuple[float, float] = DEFAULT_PLAUSIBLE_HOURS) -> np.ndarray:
    """True where a duration falls outside ``accept``. Missing values are never flagged."""
    d = np.asarray(durations, dtype=float)
    lo, hi = accept
    with np.errstate(invalid="ignore"):
        return np.isfinite(d) & ((d < lo) | (d > hi))


def eligibility_filter(
    series: Iterable[LongitudinalSeries],
    min_observed: int,
    grid: Sequence[float] | None = None,
) -> tuple[list[LongitudinalSeries], list[LongitudinalSeries]]:
    """Split subjects by whether they have at least ``min_observed`` non-missing values."""
    if grid is not None and min_observed > len(grid):
        raise ValueError(f"min_observed={min_observed} exceeds grid size {len(grid)}")
    included, excluded = [], []
    for s in series:
        (included if s.n_observed >= min_observed else excluded).append(s)
    return included, excluded


def threshold_flags(value: float, kind: str) -> bool:
    if not math.isfinite(value):
        raise ValueError("value must be finite")
    if kind == "cesd":
        return value >= CESD_CUTOFF
    if kind == "preterm":
        return value < PRETERM_WEEKS
    if kind == "obesity":
        return value >= OBESITY_Z
    raise ValueError(f"unknown threshold kind {kind!r}")


def ponderal_index(weight_kg: float, length_m: float) -> float:
    if not (weight_kg > 0 and length_m > 0):
        raise ValueError("weight and length must be positive")
    return weight_kg / length_m**3


def nap_hours(takes_nap: bool | None, duration: ClockTime | None) -> float | None:
    """Mean nap duration in hours; children who do not nap count as 0 h 0 min."""
    if takes_nap is None:
        return None
    if not takes_nap:
        return 0.0
    if duration is None:
        return None
    return duration.hours + duration.minutes / 60.0


def income_category(euros_per_month: float | None) -> str | None:
    if euros_per_month is None or not math.isfinite(euros_per_month):
        return None
    if euros_per_month <= 1500:
        return "<1500"
    if euros_per_month <= 3000:
        return "1501-3000"
    return ">3000"


def season_of(month: int) -> str:
    """Meteorological season (northern hemisphere) of a calendar month."""
    if not 1 <= month <= 12:
        raise ValueError(f"month out of range: {month}")
    return SEASONS[(month % 12) // 3]


def quartile_labels(values) -> list[str]:
    """Quartile labels from the sample's 25/50/75th percentiles; ties fall to the lower quartile."""
    v = np.asarray(values, dtype=float)
    if v.size < 4:
        raise ValueError(f"quartiles need at least 4 values, got {v.size}")
    cuts = np.percentile(v, [25, 50, 75])
    idx = np.searchsorted(cuts, v, side="left")
    return [QUARTILE_LABELS[i] for i in idx]


def season_quartiles(values: Sequence[float], strata: Sequence[str]) -> list[str]:
    if len(values) != len(strata):
        raise ValueError("values and strata must be aligned")
    unknown = set(strata) - set(SEASONS)
    if unknown:
        raise ValueError(f"unknown season labels: {sorted(unknown)}")
    v = np.asarray(values, dtype=float)
    s = np.asarray(strata, dtype=object)
    out = np.empty(v.size, dtype=object)
    for season in SEASONS:
        rows = np.flatnonzero(s == season)
        if rows.size == 0:
            continue
        if rows.size < 4:
            raise ValueError(f"stratum {season!r} has {rows.size} subjects; quartiles undefined")
        out[rows] = quartile_labels(v[rows])
    return out.tolist()


# ---------------------------------------------------------------------------
# Covariate tables


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str
    levels: tuple[str, ...] = ()
    reference: str | None = None
    unit: str | None = None

    def __post_init__(self):
        if self.kind not in ("categorical", "continuous"):
            raise SchemaError(f"column {self.name!r}: unknown type {self.kind!r}")
        if self.kind == "categorical":
            if len(self.levels) < 2:
                raise SchemaError(f"column {self.name!r}: categorical needs >= 2 levels")
            if self.reference is not None and self.reference not in self.levels:
                raise SchemaError(f"column {self.name!r}: reference {self.reference!r} not a level")

    @property
    def reference_level(self) -> str | None:
        if self.kind != "categorical":
            return None
        return self.reference if self.reference is not None else self.levels[0]

    def to_dict(self) -> dict:
        d: dict = {"type": self.kind}
        if self.kind == "categorical":
            d["levels"] = list(self.levels)
            d["reference"] = self.reference_level
        if self.unit:
            d["unit"] = self.unit
        return d

    @classmethod
    def from_dict(cls, name: str, d: dict) -> "ColumnSpec":
        if "type" not in d:
            raise SchemaError(f"column {name!r}: schema entry lacks 'type'")
        return cls(
            name=name,
            kind=d["type"],
            levels=tuple(str(x) for x in d.get("levels", ())),
            reference=d.get("reference"),
            unit=d.get("unit"),
        )


@dataclass(frozen=True)
class ImputedCell:
    subject_id: str
    column: str
    value: object


@dataclass(frozen=True, eq=False)
class CovariateTable:
    subject_ids: tuple[str, ...]
    columns: tuple[ColumnSpec, ...]
    cells: dict
    imputation_log: tuple[ImputedCell, ...] = field(default=())

    def __post_init__(self):
        n = len(self.subject_ids)
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate column names")
        if set(self.cells) != set(names):
            raise SchemaError("cells and declared columns disagree")
        frozen = {}
        for col in self.columns:
            raw = list(self.cells[col.name])
            if len(raw) != n:
                raise SchemaError(f"column {col.name!r} has {len(raw)} cells for {n} subjects")
            frozen[col.name] = tuple(_coerce(col, v) for v in raw)
        object.__setattr__(self, "subject_ids", tuple(str(s) for s in self.subject_ids))
        object.__setattr__(self, "cells", frozen)

    def spec(self, name: str) -> ColumnSpec:
        for c in self.columns:
            if c.name == name:
                return c
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    def n_missing(self) -> int:
        return sum(v is MISSING for col in self.cells.values() for v in col)

    def missing_fraction(self) -> float:
        total = len(self.subject_ids) * len(self.columns)
        return self.n_missing() / total if total else 0.0

    def select(self, subject_ids: Sequence[str]) -> "CovariateTable":
        """Rows reordered (and restricted) to ``subject_ids``."""
        pos = {s: i for i, s in enumerate(self.subject_ids)}
        try:
            idx = [pos[s] for s in subject_ids]
        except KeyError as exc:
            raise SchemaError(f"subject {exc.args[0]!r} has no covariate row") from None
        keep = set(subject_ids)
        return CovariateTable(
            tuple(subject_ids),
            self.columns,
            {k: [v[i] for i in idx] for k, v in self.cells.items()},
            tuple(c for c in self.imputation_log if c.subject_id in keep),
        )

    def drop(self, names: Iterable[str]) -> "CovariateTable":
        names = set(names)
        cols = tuple(c for c in self.columns if c.name not in names)
        return CovariateTable(
            self.subject_ids,
            cols,
            {c.name: self.cells[c.name] for c in cols},
            tuple(c for c in self.imputation_log if c.column not in names),
        )


def _coerce(col: ColumnSpec, v):
    if v is None or (isinstance(v, str) and v.strip() == ""):
        return MISSING
    if isinstance(v, float) and math.isnan(v):
        return MISSING
    if col.kind == "categorical":
        v = str(v)
        if v not in col.levels:
            raise SchemaError(f"column {col.name!r}: value {v!r} not in levels {list(col.levels)}")
        return v
    try:
        x = float(v)
    except (TypeError, ValueError):
        raise SchemaError(f"column {col.name!r}: non-numeric value {v!r}") from None
    if not math.isfinite(x):
        raise SchemaError(f"column {col.name!r}: non-finite value {v!r}")
    return x


def impute_simple(table: CovariateTable) -> CovariateTable:
    """Fill categorical gaps with the column mode and continuous gaps with the median.

    Mode ties resolve to the lexicographically first level.
    """
    cells = {}
    log = list(table.imputation_log)
    for col in table.columns:
        vals = table.cells[col.name]
        present = [v for v in vals if v is not MISSING]
        if not present:
            raise ValueError(f"column {col.name!r} is entirely missing")
        if len(present) == len(vals):
            cells[col.name] = vals
            continue
        if col.kind == "categorical":
            counts = Counter(present)
            top = max(counts.values())
            fill = min(level for level, c in counts.items() if c == top)
        else:
            fill = float(np.median(present))
        new = []
        for sid, v in zip(table.subject_ids, vals):
            if v is MISSING:
                log.append(ImputedCell(sid, col.name, fill))
                new.append(fill)
            else:
                new.append(v)
        cells[col.name] = new
    return replace(table, cells=cells, imputation_log=tuple(log))

"""Longitudinal measurements on a shared age grid."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import SchemaError

GRID_ATOL = 1e-9
DEFAULT_GRID = (2.0, 3.0, 5.5)


@dataclass(frozen=True)
class LongitudinalSeries:
    """One subject's observed (age, value) pairs; unobserved grid ages are omitted."""

    subject_id: str
    ages: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.ages) != len(self.values):
            raise ValueError(f"{self.subject_id}: ages and values differ in length")
        if any(b <= a for a, b in zip(self.ages, self.ages[1:])):
            raise ValueError(f"{self.subject_id}: ages must be strictly increasing")

    @property
    def n_observed(self) -> int:
        return sum(1 for v in self.values if np.isfinite(v))


@dataclass(frozen=True, eq=False)
class Cohort:
    """Dense N x T panel; ``values[i, t]`` is NaN when subject i was not measured at ``grid[t]``."""

    subject_ids: tuple[str, ...]
    grid: np.ndarray
    values: np.ndarray
    _mask: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        grid = np.array(self.grid, dtype=float)
        values = np.array(self.values, dtype=float)
        if grid.ndim != 1 or grid.size == 0:
            raise SchemaError("age grid must be a non-empty 1-d sequence")
        if np.any(np.diff(grid) <= 0):
            raise SchemaError("age grid must be strictly increasing")
        if values.ndim != 2 or values.shape != (len(self.subject_ids), grid.size):
            raise SchemaError(
                f"values shape {values.shape} does not match "
                f"{len(self.subject_ids)} subjects x {grid.size} ages"
            )
        if len(set(self.subject_ids)) != len(self.subject_ids):
            raise SchemaError("duplicate subject ids")
        if np.isinf(values).any():
            raise SchemaError("infinite measurement values")
        grid.setflags(write=False)
        values.setflags(write=False)
        mask = np.isfinite(values)
        mask.setflags(write=False)
        object.__setattr__(self, "subject_ids", tuple(str(s) for s in self.subject_ids))
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "_mask", mask)

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)

    @property
    def mask(self) -> np.ndarray:
        return self._mask

    @property
    def n_observed(self) -> np.ndarray:
        return self._mask.sum(axis=1)

    def subset(self, rows) -> "Cohort":
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        return Cohort(tuple(self.subject_ids[i] for i in rows), self.grid, self.values[rows])

    def complete_cases(self) -> "Cohort":
        return self.subset(self._mask.all(axis=1))

    def canonical(self) -> tuple["Cohort", np.ndarray]:
        """Return the cohort sorted by subject id and the permutation used."""
        order = np.array(sorted(range(self.n_subjects), key=lambda i: self.subject_ids[i]), dtype=int)
        return self.subset(order), order

    def to_series(self) -> list[LongitudinalSeries]:
        out = []
        for sid, row, m in zip(self.subject_ids, self.values, self._mask):
            out.append(LongitudinalSeries(sid, tuple(self.grid[m].tolist()), tuple(row[m].tolist())))
        return out

    @classmethod
    def from_series(cls, series: Iterable[LongitudinalSeries], grid: Sequence[float]) -> "Cohort":
        grid = np.asarray(grid, dtype=float)
        series = list(series)
        values = np.full((len(series), grid.size), np.nan)
        for i, s in enumerate(series):
            for age, val in zip(s.ages, s.values):
                t = grid_index(grid, age)
                values[i, t] = val
        return cls(tuple(s.subject_id for s in series), grid, values)


def grid_index(grid: np.ndarray, age: float) -> int:
    hit = np.flatnonzero(np.abs(grid - age) <= GRID_ATOL)
    if hit.size == 0:
        raise SchemaError(f"age {age!r} is not on the declared grid {grid.tolist()}")
    return int(hit[0])

"""File formats: long-format measurements, wide covariates with a JSON schema,
model and report JSON, and per-row bed/wake clock times.

Every reader accepts a path or ``"-"`` (stdin); writers accept a path or
``"-"`` (stdout). Floats are written with ``repr`` so a round trip is exact.
"""
from __future__ import annotations

import contextlib
import csv
import io
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import Cohort, grid_index
from .diagnostics import Assignment
from .errors import SchemaError
from .gbtm.model import FittedModel
from .preprocess import MISSING, ClockTime, ColumnSpec, CovariateTable, compute_night_duration

LONG_HEADER = ("subject_id", "age_years", "value")
DURATION_HEADER = ("subject_id", "age_years", "bedtime", "waketime")


# ---------------------------------------------------------------------------
# plumbing


@contextlib.contextmanager
def open_text(path, mode: str = "r"):
    if str(path) == "-":
        stream = sys.stdin if "r" in mode else sys.stdout
        yield stream
        if "w" in mode:
            stream.flush()
        return
    with open(path, mode, encoding="utf-8", newline="") as fh:
        yield fh


def read_text(path) -> str:
    with open_text(path) as fh:
        return fh.read()


def write_text(path, text: str) -> None:
    with open_text(path, "w") as fh:
        fh.write(text)


def fmt_float(x) -> str:
    """Shortest round-trip representation; empty for missing."""
    if x is None:
        return ""
    x = float(x)
    if math.isnan(x):
        return ""
    return repr(x)


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        if math.isnan(x):
            return None
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps_json(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, obj) -> str:
    text = dumps_json(obj)
    write_text(path, text)
    return text


def read_json(path) -> dict:
    try:
        return json.loads(read_text(path))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from None


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _reader(text: str, required: Sequence[str], where: str):
    rd = csv.DictReader(io.StringIO(text))
    if rd.fieldnames is None:
        raise SchemaError(f"{where}: empty file (a header row is required)")
    fields = [f.strip() for f in rd.fieldnames]
    missing = [c for c in required if c not in fields]
    if missing:
        raise SchemaError(f"{where}: missing required columns {missing}; found {fields}")
    rd.fieldnames = fields
    return rd


def parse_grid(text: str) -> tuple[float, ...]:
    try:
        grid = tuple(float(x) for x in str(text).split(","))
    except ValueError:
        raise SchemaError(f"malformed grid {text!r}; expected e.g. 2,3,5.5") from None
    if len(grid) == 0 or any(b <= a for a, b in zip(grid, grid[1:])):
        raise SchemaError(f"grid {text!r} must be strictly increasing")
    return grid


# ---------------------------------------------------------------------------
# long-format measurements


def parse_long_csv(text: str, grid: Sequence[float], where: str = "<input>") -> Cohort:
    """Build a cohort from ``subject_id,age_years,value`` rows; subjects keep first-seen order."""
    grid_arr = np.asarray(grid, dtype=float)
    rd = _reader(text, LONG_HEADER, where)
    order: list[str] = []
    rows: dict[str, np.ndarray] = {}
    seen = set()
    for line, rec in enumerate(rd, start=2):
        sid = (rec["subject_id"] or "").strip()
        if not sid:
            raise SchemaError(f"{where}:{line}: empty subject_id")
        try:
            age = float(rec["age_years"])
        except (TypeError, ValueError):
            raise SchemaError(f"{where}:{line}: malformed age {rec['age_years']!r}") from None
        try:
            t = grid_index(grid_arr, age)
        except SchemaError as exc:
            raise SchemaError(f"{where}:{line}: {exc}") from None
        if (sid, t) in seen:
            raise SchemaError(f"{where}:{line}: duplicate measurement for {sid!r} at age {age}")
        seen.add((sid, t))
        raw = (rec["value"] or "").strip()
        if raw == "":
            val = np.nan
        else:
            try:
                val = float(raw)
            except ValueError:
                raise SchemaError(f"{where}:{line}: malformed value {raw!r}") from None
            if not math.isfinite(val):
                raise SchemaError(f"{where}:{line}: non-finite value {raw!r}")
        if sid not in rows:
            order.append(sid)
            rows[sid] = np.full(grid_arr.size, np.nan)
        rows[sid][t] = val
    values = np.vstack([rows[s] for s in order]) if order else np.empty((0, grid_arr.size))
    return Cohort(tuple(order), grid_arr, values)


def read_long_csv(path, grid: Sequence[float]) -> Cohort:
    return parse_long_csv(read_text(path), grid, str(path))


def long_csv_text(cohort: Cohort) -> str:
    rows = []
    for sid, row in zip(cohort.subject_ids, cohort.values):
        for age, v in zip(cohort.grid, row):
            rows.append((sid, fmt_float(age), fmt_float(v)))
    return csv_text(LONG_HEADER, rows)


def write_long_csv(path, cohort: Cohort) -> str:
    text = long_csv_text(cohort)
    write_text(path, text)
    return text


# ---------------------------------------------------------------------------
# covariates


def parse_covariates(text: str, schema: dict, where: str = "<covariates>") -> CovariateTable:
    if not isinstance(schema, dict) or not schema:
        raise SchemaError("covariate schema must be a non-empty JSON object")
    rd = _reader(text, ("subject_id",), where)
    header = [f for f in rd.fieldnames if f != "subject_id"]
    extra = [c for c in header if c not in schema]
    absent = [c for c in schema if c not in header]
    if extra:
        raise SchemaError(f"{where}: columns {extra} are not declared in the schema")
    if absent:
        raise SchemaError(f"{where}: schema columns {absent} are absent from the file")
    specs = tuple(ColumnSpec.from_dict(name, schema[name]) for name in header)
    ids, cells = [], {c: [] for c in header}
    for line, rec in enumerate(rd, start=2):
        sid = (rec["subject_id"] or "").strip()
        if not sid:
            raise SchemaError(f"{where}:{line}: empty subject_id")
        ids.append(sid)
        for c in header:
            cells[c].append(rec[c])
    if len(set(ids)) != len(ids):
        raise SchemaError(f"{where}: duplicate subject ids")
    try:
        return CovariateTable(tuple(ids), specs, cells)
    except SchemaError as exc:
        raise SchemaError(f"{where}: {exc}") from None


def read_covariates(path, schema_path) -> CovariateTable:
    return parse_covariates(read_text(path), read_json(schema_path), str(path))


def covariates_csv_text(table: CovariateTable) -> str:
    rows = []
    for i, sid in enumerate(table.subject_ids):
        row = [sid]
        for c in table.columns:
            v = table.cells[c.name][i]
            if v is MISSING:
                row.append("")
            elif c.kind == "continuous":
                row.append(fmt_float(v))
            else:
                row.append(v)
        rows.append(row)
    return csv_text(["subject_id", *table.names], rows)


def covariate_schema(table: CovariateTable) -> dict:
    return {c.name: c.to_dict() for c in table.columns}


def write_covariates(path, schema_path, table: CovariateTable) -> None:
    write_text(path, covariates_csv_text(table))
    # schema keys are written in column order so the sidecar reads like the header
    write_text(schema_path, json.dumps(covariate_schema(table), indent=2) + "\n")


# ---------------------------------------------------------------------------
# models and assignments


def read_model(path) -> FittedModel:
    d = read_json(path)
    try:
        return FittedModel.from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, SchemaError):
            raise
        raise SchemaError(f"{path}: malformed model file ({exc})") from None


def assignment_csv_text(assignment: Assignment, probs: np.ndarray) -> str:
    K = assignment.n_groups
    header = ["subject_id", "group", "tie", *[f"posterior_{k + 1}" for k in range(K)]]
    rows = []
    for sid, g, tie, p in zip(assignment.subject_ids, assignment.groups, assignment.tie_flags, probs):
        rows.append([sid, int(g) + 1, int(bool(tie)), *[fmt_float(x) for x in p]])
    return csv_text(header, rows)


def parse_assignments(text: str, where: str = "<assignments>") -> Assignment:
    rd = _reader(text, ("subject_id", "group"), where)
    post_cols = [f for f in rd.fieldnames if f.startswith("posterior_")]
    ids, groups, ties = [], [], []
    for line, rec in enumerate(rd, start=2):
        ids.append(rec["subject_id"].strip())
        try:
            g = int(rec["group"])
        except (TypeError, ValueError):
            raise SchemaError(f"{where}:{line}: malformed group {rec['group']!r}") from None
        if g < 1:
            raise SchemaError(f"{where}:{line}: group labels are 1-based")
        groups.append(g - 1)
        ties.append(str(rec.get("tie", "0")).strip() in ("1", "true", "True"))
    K = len(post_cols) if post_cols else (max(groups) + 1 if groups else 0)
    if groups and max(groups) >= K:
        raise SchemaError(f"{where}: group label exceeds the number of posterior columns")
    return Assignment(tuple(ids), np.array(groups, dtype=int), np.array(ties, dtype=bool), K)


def read_assignments(path) -> Assignment:
    return parse_assignments(read_text(path), str(path))


# ---------------------------------------------------------------------------
# bed/wake clock times


@dataclass(frozen=True)
class DurationRow:
    line: int
    subject_id: str
    age: str
    hours: float | None
    error: str | None = None


def parse_durations(text: str, where: str = "<durations>") -> list[DurationRow]:
    """One result per input row; malformed rows carry an error and no duration."""
    rd = _reader(text, DURATION_HEADER, where)
    out = []
    for line, rec in enumerate(rd, start=2):
        sid = (rec["subject_id"] or "").strip()
        age = (rec["age_years"] or "").strip()
        bed = (rec["bedtime"] or "").strip()
        wake = (rec["waketime"] or "").strip()
        if not sid:
            out.append(DurationRow(line, sid, age, None, "empty subject_id"))
            continue
        try:
            float(age)
        except ValueError:
            out.append(DurationRow(line, sid, age, None, f"malformed age {age!r}"))
            continue
        if not bed or not wake:
            out.append(DurationRow(line, sid, age, None))
            continue
        try:
            hours = compute_night_duration(ClockTime.parse(bed), ClockTime.parse(wake))
        except ValueError as exc:
            out.append(DurationRow(line, sid, age, None, str(exc)))
            continue
        out.append(DurationRow(line, sid, age, hours))
    return out


def durations_csv_text(rows: Sequence[DurationRow]) -> str:
    return csv_text(
        LONG_HEADER,
        [(r.subject_id, r.age, "" if r.hours is None else f"{r.hours:.2f}") for r in rows],
    )


def rows_to_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> str:
    text = csv_text(header, rows)
    write_text(path, text)
    return text


def dicts_to_csv_text(records: Sequence[dict]) -> str:
    if not records:
        return ""
    header = list(records[0].keys())
    rows = [[fmt_float(r[h]) if isinstance(r[h], float) else ("" if r[h] is None else r[h]) for h in header]
            for r in records]
    return csv_text(header, rows)


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p

"""Cohort data ingestion and derived exposure variables.

Loads rectangular subject-level CSV data under an explicit column-type
schema, performs listwise deletion, and builds binary maltreatment
indicators from ordinal frequency items (dichotomization, cross-rater
and cross-period combination, prevalence summaries).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

__all__ = [
    "COLUMN_TYPES",
    "LIKERT_LABELS",
    "PERIODS",
    "RATERS",
    "AbuseIndicator",
    "AbuseRule",
    "CohortError",
    "CohortTable",
    "LoadReport",
    "combine_raters",
    "dichotomize",
    "load_cohort",
    "prevalence_table",
    "select_complete",
]

COLUMN_TYPES = ("continuous", "binary", "categorical", "ordinal")

#: 5-point frequency scale used by the retrospective maltreatment items.
LIKERT_LABELS = {
    "never": 1,
    "rarely": 2,
    "sometimes": 3,
    "often": 4,
    "very often": 5,
}

RATERS = ("mother", "partner", "child")
PERIODS = ("0-10", "11-18")

DEFAULT_MISSING_TOKENS = ("", "NA", ".")

ID_COLUMN = "subject_id"


class CohortError(ValueError):
    """Raised on schema violations or malformed cohort input."""


@dataclass
class LoadReport:
    """Bookkeeping emitted by :func:`load_cohort`."""

    path: str
    n_rows: int = 0
    n_columns: int = 0
    bad_cells: dict[str, int] = field(default_factory=dict)
    messages: list[str] = field(default_factory=list)

    @property
    def n_bad_cells(self) -> int:
        return sum(self.bad_cells.values())

    def to_text(self) -> str:
        lines = [
            f"source={self.path}",
            f"rows={self.n_rows}",
            f"columns={self.n_columns}",
            f"cells_marked_missing={self.n_bad_cells}",
        ]
        for col, n in sorted(self.bad_cells.items()):
            lines.append(f"  {col}: {n}")
        lines.extend(self.messages)
        return "\n".join(lines) + "\n"


@dataclass
class CohortTable:
    """Rectangular subject-by-variable dataset with explicit missingness.

    ``data`` holds one row per subject (float columns, NaN = missing,
    except the subject-id column). ``types`` maps each non-id column to
    one of ``COLUMN_TYPES``. ``hidden_columns`` are simulator truth
    columns excluded from exports unless explicitly requested.
    """

    data: pd.DataFrame
    types: dict[str, str]
    load_report: LoadReport | None = None
    hidden_columns: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if ID_COLUMN not in self.data.columns:
            raise CohortError(f"cohort table requires a '{ID_COLUMN}' column")
        ids = self.data[ID_COLUMN]
        if ids.duplicated().any():
            dup = ids[ids.duplicated()].iloc[0]
            raise CohortError(f"duplicate subject id: {dup!r}")
        for col, kind in self.types.items():
            if kind not in COLUMN_TYPES:
                raise CohortError(f"unknown column type {kind!r} for {col!r}")
            if col not in self.data.columns:
                raise CohortError(f"typed column {col!r} not present in data")

    @property
    def n(self) -> int:
        return len(self.data)

    @property
    def columns(self) -> list[str]:
        return [c for c in self.data.columns if c != ID_COLUMN]

    def column(self, name: str) -> pd.Series:
        if name not in self.data.columns:
            raise CohortError(f"unknown column {name!r}")
        return self.data[name]

    def require_columns(self, names) -> None:
        missing = [c for c in names if c not in self.data.columns]
        if missing:
            raise CohortError(f"unknown column(s): {', '.join(missing)}")

    def with_column(self, name: str, values, kind: str = "continuous") -> "CohortTable":
        """Return a copy with ``values`` attached as column ``name``."""
        data = self.data.copy()
        data[name] = np.asarray(values, dtype=float)
        types = dict(self.types)
        types[name] = kind
        return CohortTable(data, types, self.load_report, self.hidden_columns)

    def export_frame(self, unsafe: bool = False) -> pd.DataFrame:
        """Exportable view; truth columns dropped unless ``unsafe``."""
        if unsafe or not self.hidden_columns:
            return self.data.copy()
        keep = [c for c in self.data.columns if c not in self.hidden_columns]
        return self.data[keep].copy()


@dataclass(frozen=True)
class AbuseRule:
    """Dichotomization rule: 1 if the ordinal response >= threshold."""

    item: str
    threshold: int

    def __post_init__(self) -> None:
        if not 1 <= int(self.threshold) <= 5:
            raise CohortError(f"threshold must be in [1, 5], got {self.threshold}")


@dataclass
class AbuseIndicator:
    """Binary per-subject exposure indicator for one rater set and period."""

    rater_set: frozenset
    period: str
    kind: str
    values: pd.Series

    def __post_init__(self) -> None:
        self.rater_set = frozenset(self.rater_set)
        if not self.rater_set:
            raise CohortError("rater_set must be nonempty")
        unknown = self.rater_set - set(RATERS)
        if unknown:
            raise CohortError(f"unknown rater(s): {sorted(unknown)}")
        if self.period not in PERIODS:
            raise CohortError(f"period must be one of {PERIODS}, got {self.period!r}")
        if self.kind not in ("cruelty", "sex_abuse", "any"):
            raise CohortError(f"unknown abuse kind {self.kind!r}")
        vals = self.values.dropna()
        if not vals.isin([0.0, 1.0]).all():
            raise CohortError("indicator values must be 0, 1, or missing")

    @property
    def prevalence(self) -> float:
        """Share of ones among non-missing subjects (NaN if all missing)."""
        vals = self.values.dropna()
        if vals.empty:
            return float("nan")
        return float(vals.mean())

    def label(self) -> str:
        tags = {"mother": "M", "partner": "P", "child": "C"}
        return "".join(tags[r] for r in RATERS if r in self.rater_set)


def _coerce_cell(raw: str, kind: str) -> float:
    """Parse one CSV cell under its column type; NaN means type failure."""
    text = raw.strip()
    if kind == "ordinal":
        mapped = LIKERT_LABELS.get(text.lower())
        if mapped is not None:
            return float(mapped)
    try:
        value = float(text)
    except ValueError:
        return float("nan")
    if kind == "binary":
        return value if value in (0.0, 1.0) else float("nan")
    if kind == "ordinal":
        if value != int(value) or not 1 <= value <= 5:
            return float("nan")
        return value
    return value


def load_cohort(path, schema: dict[str, str] | None = None,
                missing_tokens=DEFAULT_MISSING_TOKENS) -> CohortTable:
    """Load a cohort CSV under ``schema`` (column name -> type).

    Columns not named in the schema (or all columns, when no schema is
    given) are parsed as free-form continuous values. Cells that fail
    their declared type are marked missing and counted in the attached
    :class:`LoadReport`; structural problems (missing file, header
    mismatch, duplicate ids, no data rows) raise :class:`CohortError`.
    """
    schema = dict(schema or {})
    for col, kind in schema.items():
        if kind not in COLUMN_TYPES:
            raise CohortError(f"unknown column type {kind!r} for {col!r}")
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError:
        raise CohortError(f"no such file: {path}") from None
    except pd.errors.EmptyDataError:
        raise CohortError("no data rows") from None
    if raw.empty:
        raise CohortError("no data rows")
    if ID_COLUMN not in raw.columns:
        raise CohortError(f"header is missing the '{ID_COLUMN}' column")
    missing_schema = [c for c in schema if c not in raw.columns]
    if missing_schema:
        raise CohortError(f"header is missing schema column(s): {', '.join(missing_schema)}")

    report = LoadReport(path=str(path), n_rows=len(raw), n_columns=len(schema))
    missing_set = {t.lower() for t in missing_tokens}
    data = pd.DataFrame({ID_COLUMN: raw[ID_COLUMN]})
    for col, kind in schema.items():
        parsed = np.empty(len(raw), dtype=float)
        n_bad = 0
        for i, cell in enumerate(raw[col]):
            if cell.strip().lower() in missing_set:
                parsed[i] = np.nan
                continue
            value = _coerce_cell(cell, kind)
            if np.isnan(value):
                n_bad += 1
            parsed[i] = value
        data[col] = parsed
        if n_bad:
            report.bad_cells[col] = n_bad
            warnings.warn(
                f"column {col!r}: {n_bad} cell(s) failed type {kind!r} and were marked missing",
                stacklevel=2,
            )
    # untyped extra columns are carried through as free-form continuous
    for col in raw.columns:
        if col == ID_COLUMN or col in schema:
            continue
        data[col] = pd.to_numeric(raw[col].replace(list(missing_tokens), np.nan), errors="coerce")
    types = dict(schema)
    for col in data.columns:
        if col != ID_COLUMN and col not in types:
            types[col] = "continuous"
    report.messages.append(f"retained_rows={len(data)}")
    return CohortTable(data, types, load_report=report)


def select_complete(table: CohortTable, variables) -> CohortTable:
    """Listwise deletion: keep rows with no missing value among ``variables``."""
    variables = list(variables)
    table.require_columns(variables)
    if not variables:
        return table
    mask = table.data[variables].notna().all(axis=1)
    kept = table.data.loc[mask].reset_index(drop=True)
    if kept.empty:
        warnings.warn("listwise deletion removed every row", stacklevel=2)
    report = LoadReport(
        path=table.load_report.path if table.load_report else "<memory>",
        n_rows=len(kept),
        n_columns=len(table.types),
        messages=[f"listwise_deletion_on={','.join(variables)}", f"retained_rows={len(kept)}"],
    )
    return CohortTable(kept, dict(table.types), load_report=report, hidden_columns=table.hidden_columns)


def dichotomize(table: CohortTable, rule: AbuseRule) -> pd.Series:
    """Binary recode of an ordinal item: 1 iff response >= rule.threshold."""
    if table.types.get(rule.item) != "ordinal":
        raise CohortError(f"dichotomize requires an ordinal column, {rule.item!r} is "
                          f"{table.types.get(rule.item, 'absent')!r}")
    col = table.column(rule.item)
    out = pd.Series(np.where(col >= rule.threshold, 1.0, 0.0), index=col.index, name=rule.item)
    out[col.isna()] = np.nan
    return out


def combine_raters(indicators, raters, period: str) -> AbuseIndicator:
    """OR the indicators of the selected raters for one period.

    Subjects missing every selected rater are missing; subjects missing
    only some raters use the OR of the observed reports.
    """
    raters = frozenset(raters)
    if not raters:
        raise CohortError("rater_set must be nonempty")
    periods = {ind.period for ind in indicators}
    if periods != {period}:
        raise CohortError(f"indicators mix periods {sorted(periods)}, expected {period!r}")
    selected = [ind for ind in indicators if ind.rater_set <= raters]
    if not selected:
        raise CohortError("no indicator matches the requested rater set")
    kinds = {ind.kind for ind in selected}
    kind = kinds.pop() if len(kinds) == 1 else "any"
    stacked = pd.concat([ind.values for ind in selected], axis=1)
    combined = stacked.max(axis=1, skipna=True)  # OR over observed reports
    combined[stacked.isna().all(axis=1)] = np.nan
    covered = frozenset().union(*(ind.rater_set for ind in selected))
    return AbuseIndicator(rater_set=covered, period=period, kind=kind, values=combined)


def any_abuse(cruelty: AbuseIndicator, sex_abuse: AbuseIndicator) -> AbuseIndicator:
    """OR of cruelty and sex-abuse indicators for the same period."""
    if cruelty.period != sex_abuse.period:
        raise CohortError("indicators must share the period")
    stacked = pd.concat([cruelty.values, sex_abuse.values], axis=1)
    combined = stacked.max(axis=1, skipna=True)
    combined[stacked.isna().all(axis=1)] = np.nan
    return AbuseIndicator(
        rater_set=cruelty.rater_set | sex_abuse.rater_set,
        period=cruelty.period,
        kind="any",
        values=combined,
    )


def prevalence_table(indicators) -> pd.DataFrame:
    """Percent exposed per rater-set x period x kind, plus persistence.

    Persistence is the share of subjects with kind='any' equal to one in
    both periods for the same rater set (rows labelled 'persistence').
    """
    indicators = list(indicators)
    if not indicators:
        return pd.DataFrame(columns=["rater_set", "period", "kind", "percent"])
    rows = []
    for ind in indicators:
        rows.append(
            {
                "rater_set": ind.label(),
                "period": ind.period,
                "kind": ind.kind,
                "percent": 100.0 * ind.prevalence,
            }
        )
    by_set: dict[str, dict[str, AbuseIndicator]] = {}
    for ind in indicators:
        if ind.kind == "any":
            by_set.setdefault(ind.label(), {})[ind.period] = ind
    for label, per in sorted(by_set.items()):
        if set(per) == set(PERIODS):
            both = (per["0-10"].values == 1.0) & (per["11-18"].values == 1.0)
            observed = per["0-10"].values.notna() & per["11-18"].values.notna()
            share = float(both[observed].mean()) if observed.any() else float("nan")
            rows.append(
                {"rater_set": label, "period": "both", "kind": "persistence", "percent": 100.0 * share}
            )
    return pd.DataFrame(rows)

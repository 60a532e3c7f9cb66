"""Aligned-text and CSV rendering of regression results, plus atomic writes.

Significance stars follow the usual three-level convention (10/5/1
percent). All file output goes through a write-temp-then-rename helper
so a failed run never leaves a partial file behind, and every run can
record a plain-text manifest listing its inputs, seed, and outputs.
"""

from __future__ import annotations

import os
import tempfile
from datetime import datetime, timezone

import numpy as np
import pandas as pd

__all__ = [
    "atomic_write_text",
    "effect_ci_frame",
    "regression_table",
    "rdd_panel_table",
    "significance_stars",
    "write_manifest",
]

STAR_LEVELS = ((0.01, "***"), (0.05, "**"), (0.10, "*"))


def significance_stars(p_value: float) -> str:
    """Three-level star convention: *** p<0.01, ** p<0.05, * p<0.10."""
    if not np.isfinite(p_value):
        return ""
    for cutoff, stars in STAR_LEVELS:
        if p_value < cutoff:
            return stars
    return ""


def _fmt(value: float, digits: int = 3) -> str:
    return f"{value:.{digits}f}"


def regression_table(fits: dict, rows: list[str] | None = None, digits: int = 3,
                     stats: bool = True) -> str:
    """Aligned text table: one column per fit, coefficient rows with
    stars and standard errors in parentheses underneath.

    ``fits`` maps column headers to RegressionFit-like objects exposing
    ``names``, ``coefficients``, ``standard_errors``, ``p_values``,
    ``n``, ``r_squared``. ``rows`` restricts and orders the coefficient
    rows (default: union of all names except the intercept, in first
    appearance order).
    """
    if not fits:
        raise ValueError("no fits to tabulate")
    if rows is None:
        rows = []
        for fit in fits.values():
            for name in fit.names:
                if name != "intercept" and name not in rows:
                    rows.append(name)

    headers = list(fits)
    cells: list[list[str]] = []
    for name in rows:
        coef_row, se_row = [name], [""]
        for fit in fits.values():
            if name in fit.names:
                i = fit.names.index(name)
                coef_row.append(_fmt(fit.coefficients[i], digits)
                                + significance_stars(fit.p_values[i]))
                se_row.append(f"({_fmt(fit.standard_errors[i], digits)})")
            else:
                coef_row.append("")
                se_row.append("")
        cells.append(coef_row)
        cells.append(se_row)
    if stats:
        cells.append(["N"] + [str(fit.n) for fit in fits.values()])
        cells.append(["R-squared"] + [_fmt(fit.r_squared, digits) for fit in fits.values()])

    table = [[""] + headers] + cells
    widths = [max(len(row[j]) for row in table) for j in range(len(headers) + 1)]
    lines = []
    for idx, row in enumerate(table):
        lines.append("  ".join(cell.ljust(widths[0]) if j == 0 else cell.rjust(widths[j])
                               for j, cell in enumerate(row)))
        if idx == 0:
            lines.append("-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def rdd_panel_table(panels: dict, digits: int = 3) -> str:
    """Three-panel discontinuity layout: one panel per bandwidth.

    ``panels`` maps panel titles (e.g. month windows) to dicts of
    column-header -> RddFit. Each panel shows the jump estimate with
    stars, its standard error, and side-specific sample sizes.
    """
    if not panels:
        raise ValueError("no panels to tabulate")
    lines: list[str] = []
    for title, fits in panels.items():
        headers = list(fits)
        rows = [
            ["Treat"] + [_fmt(f.estimate, digits) + significance_stars(f.p_value)
                         for f in fits.values()],
            [""] + [f"({_fmt(f.standard_error, digits)})" for f in fits.values()],
            ["N"] + [str(f.n) for f in fits.values()],
            ["Bandwidth (months)"] + [str(f.bandwidth) for f in fits.values()],
        ]
        table = [[""] + headers] + rows
        widths = [max(len(r[j]) for r in table) for j in range(len(headers) + 1)]
        lines.append(title)
        for idx, row in enumerate(table):
            lines.append("  ".join(cell.ljust(widths[0]) if j == 0 else cell.rjust(widths[j])
                                   for j, cell in enumerate(row)))
            if idx == 0:
                lines.append("-" * len(lines[-1]))
        lines.append("")
    return "\n".join(lines)


def effect_ci_frame(fits: dict, level: float = 0.95) -> pd.DataFrame:
    """Plot-ready effect data: one row per category with point and CI."""
    records = []
    for label, fit in fits.items():
        low, high = fit.confidence_interval(level)
        records.append({"category": label, "effect": fit.estimate,
                        "ci_low": low, "ci_high": high,
                        "std_error": fit.standard_error, "n": fit.n})
    return pd.DataFrame.from_records(records)


def atomic_write_text(path: str, content: str) -> None:
    """Write via a temp file in the target directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            handle.write(content)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_frame(path: str, frame: pd.DataFrame) -> None:
    """CSV export through the same temp-then-rename discipline."""
    atomic_write_text(path, frame.to_csv(index=False))


def write_manifest(path: str, subcommand: str, inputs: list[str], outputs: list[str],
                   seed: int | None = None, settings: dict | None = None) -> None:
    """Plain-text run manifest: settings, inputs, and every output file.

    The timestamp line is informational; all other lines are functions
    of the run configuration, so two identical runs differ at most in
    that one line.
    """
    lines = [f"subcommand={subcommand}"]
    if seed is not None:
        lines.append(f"seed={seed}")
    for key in sorted(settings or {}):
        lines.append(f"{key}={settings[key]}")
    for item in inputs:
        lines.append(f"input={item}")
    for item in outputs:
        lines.append(f"output={item}")
    lines.append(f"timestamp={datetime.now(timezone.utc).isoformat()}")
    atomic_write_text(path, "\n".join(lines) + "\n")

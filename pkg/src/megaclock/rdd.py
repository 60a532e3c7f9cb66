"""Sharp regression-discontinuity tooling around a school-entry cutoff.

Birth month is recentred so the first month on the treated side of the
cutoff maps to zero; the design is the standard local-linear sharp RDD
with separate slopes on each side, heteroskedasticity-robust standard
errors, and optional additive covariates. A pooled fully-interacted
variant estimates class-specific jumps with delta-method standard
errors from a single fit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.stats

from .cohort import CohortTable
from .inference import InferenceError, ols

__all__ = [
    "RddError",
    "RddFit",
    "RddSpec",
    "normalize_running",
    "placebo_outcome",
    "rdd_fit",
    "rdd_heterogeneity",
]

CUTOFF_MONTH = 9  # first month of the school-entry year


class RddError(ValueError):
    """Raised on invalid running variables, bandwidths, or designs."""


def normalize_running(birth_month) -> np.ndarray:
    """Recentre calendar birth month on the entry cutoff.

    September maps to 0 (first treated month), October to 1, August to
    -1, May to -4, January to -8. Input months must be integers in
    1..12; missing values are rejected.
    """
    month = np.asarray(birth_month, dtype=float)
    if np.isnan(month).any():
        raise RddError("birth month contains missing values")
    if not np.all(month == np.round(month)):
        raise RddError("birth month must be integer-valued")
    month = month.astype(int)
    if month.min() < 1 or month.max() > 12:
        bad = month[(month < 1) | (month > 12)][0]
        raise RddError(f"birth month out of range 1..12: {bad}")
    return month - CUTOFF_MONTH


@dataclass
class RddSpec:
    """Outcome, running-variable column, bandwidth, and optional covariates."""

    outcome: str
    month_column: str
    bandwidth: int = 4
    covariates: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.bandwidth < 1:
            raise RddError(f"bandwidth must be a positive month count, got {self.bandwidth}")
        if self.outcome in self.covariates:
            raise RddError("outcome cannot also be a covariate")


@dataclass
class RddFit:
    """Treatment-effect estimate with the underlying local-linear fit."""

    estimate: float
    standard_error: float
    n: int
    n_left: int
    n_right: int
    bandwidth: int
    names: list[str]
    coefficients: np.ndarray
    standard_errors: np.ndarray
    covariance: np.ndarray
    tag: str = ""

    @property
    def t_statistic(self) -> float:
        return self.estimate / self.standard_error

    @property
    def p_value(self) -> float:
        df = max(self.n - len(self.names), 1)
        return float(2.0 * scipy.stats.t.sf(abs(self.t_statistic), df))

    def confidence_interval(self, level: float = 0.95) -> tuple[float, float]:
        df = max(self.n - len(self.names), 1)
        half = scipy.stats.t.ppf(0.5 + level / 2.0, df) * self.standard_error
        return self.estimate - half, self.estimate + half

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "term": self.names,
                "coefficient": self.coefficients,
                "std_error": self.standard_errors,
            }
        )


def _prepare(table: CohortTable, spec: RddSpec):
    cols = [spec.outcome, spec.month_column] + list(spec.covariates)
    table.require_columns(cols)
    frame = table.data[cols]
    if frame.isna().any().any():
        raise RddError("RDD columns contain missing values; run select_complete first")
    running = normalize_running(frame[spec.month_column].to_numpy())
    keep = (running >= -spec.bandwidth) & (running <= spec.bandwidth - 1)
    if not keep.any():
        raise RddError(f"no observations inside bandwidth {spec.bandwidth}")
    y = frame[spec.outcome].to_numpy(float)[keep]
    r = running[keep].astype(float)
    W = frame[spec.covariates].to_numpy(float)[keep] if spec.covariates else None
    return y, r, W


def rdd_fit(table: CohortTable, spec: RddSpec) -> RddFit:
    """Sharp local-linear RDD with robust (HC1) standard errors.

    Fits ``y ~ 1 + treat + running + treat:running (+ covariates)`` on
    observations within the bandwidth; the jump at the cutoff is the
    ``treat`` coefficient.
    """
    y, r, W = _prepare(table, spec)
    treat = (r >= 0).astype(float)
    n_left = int((treat == 0).sum())
    n_right = int((treat == 1).sum())
    if n_left < 2 or n_right < 2:
        raise RddError(
            f"need at least 2 observations on each side of the cutoff "
            f"(got {n_left} left, {n_right} right)"
        )
    design = [np.ones(len(y)), treat, r, treat * r]
    names = ["intercept", "treat", "running", "treat_x_running"]
    if W is not None:
        design.append(W)
        names += list(spec.covariates)
    X = np.column_stack(design)
    fit = ols(y, X, names=names, se_type="hc1", tag="rdd")
    return RddFit(
        estimate=fit.coefficient("treat"),
        standard_error=fit.standard_error("treat"),
        n=len(y),
        n_left=n_left,
        n_right=n_right,
        bandwidth=spec.bandwidth,
        names=names,
        coefficients=fit.coefficients,
        standard_errors=fit.standard_errors,
        covariance=fit.covariance,
        tag="rdd",
    )


def rdd_heterogeneity(table: CohortTable, spec: RddSpec, group_column: str,
                      split_sample: bool = False) -> dict[str, RddFit]:
    """Class-specific jumps, from one pooled fully-interacted regression.

    ``group_column`` must be a binary indicator; the pooled design
    interacts every RDD term with it, and the group-one jump is the
    linear combination treat + treat:group with a delta-method standard
    error. ``split_sample=True`` instead fits the two subsamples
    separately.
    """
    table.require_columns([group_column])
    group_all = table.data[group_column]
    if group_all.isna().any():
        raise RddError(f"group column {group_column!r} contains missing values")
    values = set(np.unique(group_all.to_numpy(float)))
    if not values <= {0.0, 1.0}:
        raise RddError(f"group column {group_column!r} must be binary 0/1")

    if split_sample:
        out = {}
        for g in (0, 1):
            mask = group_all.to_numpy(float) == g
            sub = CohortTable(
                data=table.data.loc[mask].reset_index(drop=True),
                types=dict(table.types),
                hidden_columns=table.hidden_columns,
            )
            fit = rdd_fit(sub, spec)
            fit.tag = f"rdd[{group_column}={g}]"
            out[f"{group_column}={g}"] = fit
        return out

    cols = [spec.outcome, spec.month_column, group_column] + list(spec.covariates)
    table.require_columns(cols)
    frame = table.data[cols]
    if frame.isna().any().any():
        raise RddError("RDD columns contain missing values; run select_complete first")
    running = normalize_running(frame[spec.month_column].to_numpy())
    keep = (running >= -spec.bandwidth) & (running <= spec.bandwidth - 1)
    y = frame[spec.outcome].to_numpy(float)[keep]
    r = running[keep].astype(float)
    g = frame[group_column].to_numpy(float)[keep]
    treat = (r >= 0).astype(float)
    base = [np.ones(len(y)), treat, r, treat * r]
    base_names = ["intercept", "treat", "running", "treat_x_running"]
    design = list(base) + [col * g for col in base[:4]]
    names = base_names + [f"{name}_x_group" for name in base_names[:4]]
    names[4] = "group"
    if spec.covariates:
        design.append(frame[spec.covariates].to_numpy(float)[keep])
        names += list(spec.covariates)
    X = np.column_stack(design)
    fit = ols(y, X, names=names, se_type="hc1", tag="rdd_pooled")

    out = {}
    i_treat = names.index("treat")
    i_inter = names.index("treat_x_group")
    contrast0 = np.zeros(len(names))
    contrast0[i_treat] = 1.0
    contrast1 = contrast0.copy()
    contrast1[i_inter] = 1.0
    for label, contrast, g_val in ((f"{group_column}=0", contrast0, 0.0),
                                   (f"{group_column}=1", contrast1, 1.0)):
        est = float(contrast @ fit.coefficients)
        se = float(np.sqrt(contrast @ fit.covariance @ contrast))
        mask = g == g_val
        out[label] = RddFit(
            estimate=est,
            standard_error=se,
            n=len(y),
            n_left=int(((treat == 0) & mask).sum()),
            n_right=int(((treat == 1) & mask).sum()),
            bandwidth=spec.bandwidth,
            names=names,
            coefficients=fit.coefficients,
            standard_errors=fit.standard_errors,
            covariance=fit.covariance,
            tag=f"rdd_pooled[{label}]",
        )
    return out


def placebo_outcome(table: CohortTable, spec: RddSpec, placebo_column: str) -> RddFit:
    """Re-run the RDD with a predetermined outcome; the jump should be null."""
    placebo_spec = RddSpec(
        outcome=placebo_column,
        month_column=spec.month_column,
        bandwidth=spec.bandwidth,
        covariates=list(spec.covariates),
    )
    fit = rdd_fit(table, placebo_spec)
    fit.tag = f"rdd_placebo[{placebo_column}]"
    return fit

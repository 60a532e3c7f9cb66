"""Linear regression machinery and the stacked-GLS certification oracle.

OLS is solved through a pivoted QR decomposition (never via normal
equations), with classical or HC1 standard errors. The constrained SUR
GLS estimator stacks one equation per clock with a common coefficient
vector and cross-equation error covariance, and certifies numerically
that regressing the inverse-covariance weighted index is equivalent.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.linalg
import scipy.stats

from .aggregation import ClockPanel
from .cohort import CohortTable

__all__ = [
    "InferenceError",
    "LinearModelSpec",
    "RegressionFit",
    "age_acceleration",
    "build_outcome_spec",
    "build_exposure_spec",
    "constrained_sur_gls",
    "ols",
    "ols_fit",
]

RANK_TOL = 1e-10


class InferenceError(ValueError):
    """Raised on rank-deficient designs or malformed model specs."""


@dataclass
class LinearModelSpec:
    """Outcome, ordered regressors, and the standard-error flavour."""

    outcome: str
    regressors: list[str]
    intercept: bool = True
    se_type: str = "classical"
    tag: str = ""

    def __post_init__(self) -> None:
        if self.se_type not in ("classical", "hc1"):
            raise InferenceError(f"unknown se_type {self.se_type!r}")
        if len(set(self.regressors)) != len(self.regressors):
            raise InferenceError("regressors must be distinct")
        if self.outcome in self.regressors:
            raise InferenceError("outcome cannot also be a regressor")


@dataclass
class RegressionFit:
    names: list[str]
    coefficients: np.ndarray
    standard_errors: np.ndarray
    n: int
    r_squared: float
    adj_r_squared: float
    residuals: np.ndarray
    se_type: str
    covariance: np.ndarray
    tag: str = ""
    t_statistics: np.ndarray = field(init=False)
    p_values: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        with np.errstate(divide="ignore", invalid="ignore"):
            self.t_statistics = self.coefficients / self.standard_errors
        df = max(self.n - len(self.names), 1)
        self.p_values = 2.0 * scipy.stats.t.sf(np.abs(self.t_statistics), df)

    def coefficient(self, name: str) -> float:
        return float(self.coefficients[self.names.index(name)])

    def standard_error(self, name: str) -> float:
        return float(self.standard_errors[self.names.index(name)])

    def confidence_interval(self, name: str, level: float = 0.95) -> tuple[float, float]:
        df = max(self.n - len(self.names), 1)
        crit = scipy.stats.t.ppf(0.5 + level / 2.0, df)
        i = self.names.index(name)
        half = crit * self.standard_errors[i]
        return float(self.coefficients[i] - half), float(self.coefficients[i] + half)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "term": self.names,
                "coefficient": self.coefficients,
                "std_error": self.standard_errors,
                "t_statistic": self.t_statistics,
                "p_value": self.p_values,
            }
        )


def ols(y: np.ndarray, X: np.ndarray, names=None, se_type: str = "classical",
        tag: str = "") -> RegressionFit:
    """Least squares via pivoted QR with classical or HC1 standard errors."""
    y = np.asarray(y, dtype=float).ravel()
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    if names is None:
        names = [f"x{j}" for j in range(p)]
    names = list(names)
    if len(y) != n:
        raise InferenceError("outcome and design row counts differ")
    if n <= p:
        raise InferenceError(f"need N > number of regressors, got N={n}, p={p}")

    Q, R, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    threshold = RANK_TOL * (diag.max() if diag.size else 0.0)
    rank = int(np.sum(diag > threshold))
    if rank < p:
        dropped = names[piv[rank]] if rank < len(piv) else "<unknown>"
        raise InferenceError(f"design matrix is rank deficient (collinear column: {dropped})")

    beta_piv = scipy.linalg.solve_triangular(R, Q.T @ y)
    beta = np.empty(p)
    beta[piv] = beta_piv
    fitted = X @ beta
    resid = y - fitted

    # (X'X)^{-1} from the R factor, mapped back through the pivot
    Rinv = scipy.linalg.solve_triangular(R, np.eye(p))
    xtx_inv_piv = Rinv @ Rinv.T
    xtx_inv = np.empty((p, p))
    xtx_inv[np.ix_(piv, piv)] = xtx_inv_piv

    if se_type == "classical":
        sigma2 = float(resid @ resid) / (n - p)
        cov = sigma2 * xtx_inv
    elif se_type == "hc1":
        meat = (X * resid[:, None] ** 2).T @ X
        cov = xtx_inv @ meat @ xtx_inv * (n / (n - p))
    else:
        raise InferenceError(f"unknown se_type {se_type!r}")

    tss = float(((y - y.mean()) ** 2).sum())
    rss = float(resid @ resid)
    if tss <= 0.0:
        warnings.warn("outcome is constant; R-squared reported as 0", stacklevel=2)
        r2 = 0.0
    else:
        r2 = 1.0 - rss / tss
    adj_r2 = 1.0 - (1.0 - r2) * (n - 1) / (n - p) if tss > 0 else 0.0

    return RegressionFit(
        names=names,
        coefficients=beta,
        standard_errors=np.sqrt(np.diag(cov)),
        n=n,
        r_squared=r2,
        adj_r_squared=adj_r2,
        residuals=resid,
        se_type=se_type,
        covariance=cov,
        tag=tag,
    )


def design_matrix(table: CohortTable, spec: LinearModelSpec) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Extract (y, X, names) for a spec, with complete cases enforced."""
    table.require_columns([spec.outcome] + spec.regressors)
    frame = table.data[[spec.outcome] + spec.regressors]
    if frame.isna().any().any():
        raise InferenceError(
            "model columns contain missing values; run select_complete on the model variables"
        )
    y = frame[spec.outcome].to_numpy(float)
    X = frame[spec.regressors].to_numpy(float)
    names = list(spec.regressors)
    if spec.intercept:
        X = np.column_stack([np.ones(len(y)), X])
        names = ["intercept"] + names
    return y, X, names


def ols_fit(spec: LinearModelSpec, table: CohortTable) -> RegressionFit:
    """Fit a LinearModelSpec on complete-case cohort data."""
    y, X, names = design_matrix(table, spec)
    return ols(y, X, names=names, se_type=spec.se_type, tag=spec.tag)


def age_acceleration(scores, age_years) -> np.ndarray:
    """Residuals of epigenetic-age scores after a linear fit on chronological age."""
    scores = np.asarray(scores, dtype=float).ravel()
    age = np.asarray(age_years, dtype=float).ravel()
    if len(scores) != len(age):
        raise InferenceError("scores and ages must align")
    if age.var() <= 0.0:
        raise InferenceError("chronological age is constant; residualization undefined")
    X = np.column_stack([np.ones(len(age)), age])
    fit = ols(scores, X, names=["intercept", "age"])
    return fit.residuals


def constrained_sur_gls(panel, X: np.ndarray, names=None,
                        cov_source: str = "clocks") -> RegressionFit:
    """GLS on the stacked clock equations with a common coefficient vector.

    ``panel`` is a ClockPanel or a plain (N, K) readings array. Stacks
    C_k = X b + e_k for every clock k, with cross-equation error
    covariance taken as the sample clock covariance (``cov_source='clocks'``,
    matching the weighted-index construction) or the covariance of the
    per-clock OLS residuals (``cov_source='residuals'``). Solved through
    the full NK-system normal equations, block by block; the result is
    the oracle the weighted-index regression is certified against. With
    a single clock the estimator reduces exactly to OLS on that clock.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    if isinstance(panel, ClockPanel):
        C = panel.readings
    else:
        C = np.asarray(panel, dtype=float)
        if C.ndim == 1:
            C = C[:, None]
    if n != C.shape[0]:
        raise InferenceError("panel and design must share rows")
    if names is None:
        names = [f"x{j}" for j in range(p)]
    K = C.shape[1]

    if cov_source == "clocks":
        M = np.atleast_2d(np.cov(C, rowvar=False, ddof=1))
        if np.linalg.matrix_rank(M) < K:
            raise InferenceError("clock covariance is singular")
    elif cov_source == "residuals":
        resids = np.empty_like(C)
        for k in range(K):
            resids[:, k] = ols(C[:, k], X, names=names).residuals
        M = np.cov(resids, rowvar=False, ddof=1)
    else:
        raise InferenceError(f"unknown cov_source {cov_source!r}")

    Minv = np.linalg.inv(M)
    xtx = X.T @ X
    A = np.zeros((p, p))
    b = np.zeros(p)
    for k in range(K):
        for l in range(K):
            A += Minv[k, l] * xtx
            b += Minv[k, l] * (X.T @ C[:, l])
    beta = np.linalg.solve(A, b)
    cov = np.linalg.inv(A)

    stacked_resid = (C - (X @ beta)[:, None]).T.ravel()
    fitted_index = C @ (Minv @ np.ones(K)) / float(np.ones(K) @ Minv @ np.ones(K))
    index_resid = fitted_index - X @ beta
    tss = float(((fitted_index - fitted_index.mean()) ** 2).sum())
    rss = float(index_resid @ index_resid)
    r2 = 1.0 - rss / tss if tss > 0 else 0.0
    adj_r2 = 1.0 - (1.0 - r2) * (n - 1) / (n - p) if tss > 0 else 0.0

    return RegressionFit(
        names=list(names),
        coefficients=beta,
        standard_errors=np.sqrt(np.diag(cov)),
        n=n * K,
        r_squared=r2,
        adj_r_squared=adj_r2,
        residuals=stacked_resid,
        se_type="gls",
        covariance=cov,
        tag=f"sur_gls[{cov_source}]",
    )


#: Individual controls used by both outcome and exposure regressions:
#: maternal age at birth plus indicator blocks for maternal education,
#: paternal social class, child gender, birth year, birth order, and
#: age at the methylation assessment.
DEFAULT_CONTROLS = [
    "mother_age_at_birth",
    "mother_edu_upper_secondary",
    "mother_edu_post_secondary",
    "father_class_non_manual",
    "father_class_manual",
    "female",
    "born_1992",
    "first_born",
    "age_years",
]

HEALTH_COLUMNS = ["bmi_15", "smoker_15", "drinker_15"]


def build_outcome_spec(mega_column: str, outcome: str, health_columns=None, controls=None,
              include_health: bool = True, extra_covariates=None,
              se_type: str = "classical") -> LinearModelSpec:
    """Spec for an adult-outcome regression on the composite clock.

    ``include_health=False`` drops the adolescent health block from the
    control set. ``extra_covariates`` appends further
    controls (e.g. cell-count columns) at the end of the design.
    """
    health_columns = list(HEALTH_COLUMNS if health_columns is None else health_columns)
    controls = list(DEFAULT_CONTROLS if controls is None else controls)
    regressors = [mega_column]
    if include_health:
        regressors += health_columns
    regressors += controls
    if extra_covariates:
        regressors += list(extra_covariates)
    return LinearModelSpec(outcome=outcome, regressors=regressors, se_type=se_type,
                           tag="adult_outcome")


def build_exposure_spec(mega_column: str, abuse_0_10: str, abuse_11_18: str, controls=None,
              disaggregated=None, extra_covariates=None,
              se_type: str = "classical") -> LinearModelSpec:
    """Spec for the exposure regression: composite clock on period indicators.

    ``disaggregated`` replaces the two any-abuse indicators with four
    kind-by-period columns (cruelty/sex x early/late).
    """
    controls = list(DEFAULT_CONTROLS if controls is None else controls)
    if disaggregated is not None:
        exposure = list(disaggregated)
        if len(exposure) != 4:
            raise InferenceError("disaggregated variant expects four indicator columns")
    else:
        if abuse_0_10 == abuse_11_18:
            raise InferenceError("period indicators must be distinct columns")
        exposure = [abuse_11_18, abuse_0_10]
    regressors = exposure + controls
    if extra_covariates:
        regressors += list(extra_covariates)
    return LinearModelSpec(outcome=mega_column, regressors=regressors, se_type=se_type,
                           tag="abuse_exposure")

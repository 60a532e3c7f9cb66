"""Composite biological-age indices from a panel of clock readings.

Two aggregation routes are implemented. The weighted index uses the
row sums of the inverse clock covariance matrix as weights, which makes
a regression on the index equivalent to a cross-equation GLS system
with a common coefficient (see ``inference.constrained_sur_gls`` for
the certifying oracle). The factor route extracts a single common
factor from the clock correlation matrix (principal-factor iteration,
Kaiser retention) and premultiplies the loadings by the inverse
covariance. Both indices are computed on the clocks in their natural
year scale, so scores stay interpretable as ages.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.linalg

from .cohort import CohortTable

__all__ = [
    "AggregationError",
    "ClockPanel",
    "CovarianceEstimate",
    "FactorSolution",
    "MegaWeights",
    "efa",
    "leave_one_out",
    "mega_fa",
    "mega_wgt",
    "sample_covariance",
    "weighted_index_weights",
]

CONDITION_CEILING = 1e12


class AggregationError(ValueError):
    """Raised on degenerate panels or ill-conditioned moment matrices."""


@dataclass
class ClockPanel:
    """Complete-case readings of K clocks (years) for N subjects."""

    clock_names: list[str]
    readings: np.ndarray
    age_years: np.ndarray
    subject_ids: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.readings = np.asarray(self.readings, dtype=float)
        self.age_years = np.asarray(self.age_years, dtype=float)
        n, k = self.readings.shape
        if k != len(self.clock_names):
            raise AggregationError("clock_names and readings disagree on K")
        if k < 2:
            raise AggregationError("need at least two clocks")
        if n <= k:
            raise AggregationError(f"need N > K, got N={n}, K={k}")
        if not np.all(np.isfinite(self.readings)):
            raise AggregationError("readings contain missing values; run select_complete first")
        if len(self.age_years) != n:
            raise AggregationError("age_years length must match readings rows")

    @property
    def n(self) -> int:
        return self.readings.shape[0]

    @property
    def k(self) -> int:
        return self.readings.shape[1]

    @classmethod
    def from_table(cls, table: CohortTable, clock_columns, age_column: str = "age_years") -> "ClockPanel":
        clock_columns = list(clock_columns)
        table.require_columns(clock_columns + [age_column])
        frame = table.data[clock_columns + [age_column]]
        if frame.isna().any().any():
            raise AggregationError("clock panel has missing cells; run select_complete first")
        return cls(
            clock_names=clock_columns,
            readings=frame[clock_columns].to_numpy(float),
            age_years=frame[age_column].to_numpy(float),
            subject_ids=table.data["subject_id"].to_numpy(),
        )

    def drop_clock(self, name: str) -> "ClockPanel":
        if name not in self.clock_names:
            raise AggregationError(f"clock {name!r} not in panel")
        keep = [i for i, c in enumerate(self.clock_names) if c != name]
        return ClockPanel(
            clock_names=[self.clock_names[i] for i in keep],
            readings=self.readings[:, keep],
            age_years=self.age_years,
            subject_ids=self.subject_ids,
        )


@dataclass
class CovarianceEstimate:
    """Sample covariance of the clocks with diagnostics."""

    matrix: np.ndarray
    clock_names: list[str]
    n_used: int
    ddof: int = 1
    condition_number: float = field(init=False)
    is_positive_definite: bool = field(init=False)

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=float)
        scale = max(1.0, float(np.max(np.abs(m))))
        if np.max(np.abs(m - m.T)) > 1e-12 * scale:
            raise AggregationError("covariance matrix is not symmetric")
        self.matrix = 0.5 * (m + m.T)
        eigvals = np.linalg.eigvalsh(self.matrix)
        self.is_positive_definite = bool(eigvals[0] > 0.0)
        self.condition_number = float(eigvals[-1] / eigvals[0]) if eigvals[0] > 0 else float("inf")

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Return matrix^{-1} @ rhs via a Cholesky solve."""
        if not self.is_positive_definite:
            raise AggregationError("covariance matrix is singular")
        if self.condition_number >= CONDITION_CEILING:
            raise AggregationError(
                f"covariance matrix ill-conditioned (condition number {self.condition_number:.3e})"
            )
        chol = scipy.linalg.cho_factor(self.matrix, lower=True)
        return scipy.linalg.cho_solve(chol, rhs)


@dataclass
class MegaWeights:
    """Aggregation weights for one index method ('wgt' or 'fa')."""

    method: str
    clock_names: list[str]
    raw_weights: np.ndarray
    loadings_used: np.ndarray | None = None
    excluded_clocks: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if self.method not in ("wgt", "fa"):
            raise AggregationError(f"unknown method {self.method!r}")
        self.raw_weights = np.asarray(self.raw_weights, dtype=float)
        total = float(self.raw_weights.sum())
        if abs(total) < 1e-10:
            raise AggregationError("degenerate normalization: weights sum to zero")
        self.normalized_weights = self.raw_weights / total


@dataclass
class FactorSolution:
    """Single-factor extraction from the clock correlation matrix.

    ``eigenvalues`` are those of the correlation matrix and drive the
    Kaiser retention count. ``factor_eigenvalues`` are the eigenvalues
    of the final reduced matrix (communalities on the diagonal) and
    measure how much common variance each factor carries.
    """

    clock_names: list[str]
    eigenvalues: np.ndarray
    factor_eigenvalues: np.ndarray
    n_retained: int
    loadings: np.ndarray
    uniqueness: np.ndarray
    method: str = "principal_factor"
    n_iterations: int = 0

    @property
    def communalities(self) -> np.ndarray:
        return 1.0 - self.uniqueness


def sample_covariance(panel: ClockPanel, ddof: int = 1) -> CovarianceEstimate:
    """Sample covariance of the clock readings (denominator N - ddof)."""
    variances = panel.readings.var(axis=0, ddof=ddof)
    for name, var in zip(panel.clock_names, variances):
        if var <= 0.0:
            raise AggregationError(f"clock {name!r} is constant (zero variance)")
    matrix = np.cov(panel.readings, rowvar=False, ddof=ddof)
    return CovarianceEstimate(matrix=matrix, clock_names=list(panel.clock_names),
                              n_used=panel.n, ddof=ddof)


def weighted_index_weights(cov: CovarianceEstimate) -> MegaWeights:
    """Row sums of the inverse covariance matrix as index weights."""
    raw = cov.solve(np.ones(len(cov.clock_names)))
    return MegaWeights(method="wgt", clock_names=list(cov.clock_names), raw_weights=raw)


def mega_wgt(panel: ClockPanel, weights: MegaWeights) -> np.ndarray:
    """Weighted average of the clocks in years, using inverse-covariance weights."""
    if weights.method != "wgt":
        raise AggregationError(f"expected method 'wgt', got {weights.method!r}")
    if weights.clock_names != panel.clock_names:
        raise AggregationError("weights were computed for a different clock set")
    return panel.readings @ weights.normalized_weights


def _squared_multiple_correlations(corr: np.ndarray) -> np.ndarray:
    inv = np.linalg.inv(corr)
    return 1.0 - 1.0 / np.diag(inv)


def efa(panel: ClockPanel, method: str = "principal_factor",
        tol: float = 1e-6, max_iter: int = 100) -> FactorSolution:
    """Single-factor exploratory analysis of the clock correlation matrix.

    Retention uses the Kaiser rule on the correlation-matrix eigenvalues.
    Loadings come from iterated principal-factor extraction: initial
    communalities are squared multiple correlations, then the reduced
    matrix is re-eigendecomposed until the communalities change by less
    than ``tol`` or ``max_iter`` is reached. The iteration converges
    linearly, so hitting the cap with steadily shrinking updates is an
    accepted stop; updates that stall or grow instead raise an error
    carrying the iteration trace. Loadings are sign-normalized so their
    sum is positive.

    ``method='principal_component'`` skips the communality iteration and
    returns loadings from the raw correlation matrix, for sensitivity
    checks.
    """
    if method not in ("principal_factor", "principal_component"):
        raise AggregationError(f"unknown extraction method {method!r}")
    corr = np.corrcoef(panel.readings, rowvar=False)
    if not np.all(np.isfinite(corr)):
        raise AggregationError("correlation matrix undefined (constant clock?)")
    eigenvalues = np.sort(np.linalg.eigvalsh(corr))[::-1]
    n_retained = int(np.sum(eigenvalues > 1.0))
    if n_retained == 0:
        raise AggregationError("no common factor under Kaiser criterion (all eigenvalues <= 1)")

    if method == "principal_component":
        vals, vecs = np.linalg.eigh(corr)
        first = vecs[:, -1] * np.sqrt(vals[-1])
        if first.sum() < 0:
            first = -first
        communality = np.clip(first**2, 0.0, 1.0)
        return FactorSolution(
            clock_names=list(panel.clock_names),
            eigenvalues=eigenvalues,
            factor_eigenvalues=np.sort(vals)[::-1],
            n_retained=n_retained,
            loadings=first,
            uniqueness=1.0 - communality,
            method=method,
        )

    # rank-1 correlation (e.g. duplicated clocks) makes the SMC start
    # undefined; perfect communalities are the exact solution there.
    if np.linalg.matrix_rank(corr, tol=1e-10) < corr.shape[0]:
        communality = np.ones(corr.shape[0])
    else:
        communality = np.clip(_squared_multiple_correlations(corr), 0.0, 1.0)
    trace: list[float] = []
    loadings = np.zeros(corr.shape[0])
    reduced_vals = np.zeros(corr.shape[0])
    for iteration in range(1, max_iter + 1):
        reduced = corr.copy()
        np.fill_diagonal(reduced, communality)
        vals, vecs = np.linalg.eigh(reduced)
        reduced_vals = np.sort(vals)[::-1]
        lead = max(vals[-1], 0.0)
        loadings = vecs[:, -1] * np.sqrt(lead)
        new_communality = np.clip(loadings**2, 0.0, 1.0)
        delta = float(np.max(np.abs(new_communality - communality)))
        trace.append(delta)
        communality = new_communality
        if delta < tol:
            break
    else:
        # cap reached: accept only a steadily contracting iteration
        tail = trace[-10:]
        contracting = all(later <= earlier * (1.0 + 1e-12)
                          for earlier, later in zip(tail, tail[1:]))
        if not (contracting and np.isfinite(loadings).all()):
            raise AggregationError(
                "principal-factor iteration did not converge; "
                "communality deltas: " + ", ".join(f"{d:.2e}" for d in trace[-5:])
            )
    if loadings.sum() < 0:
        loadings = -loadings
    return FactorSolution(
        clock_names=list(panel.clock_names),
        eigenvalues=eigenvalues,
        factor_eigenvalues=reduced_vals,
        n_retained=n_retained,
        loadings=loadings,
        uniqueness=1.0 - communality,
        method=method,
        n_iterations=iteration,
    )


def factor_weights(solution: FactorSolution, cov: CovarianceEstimate) -> MegaWeights:
    """Inverse covariance times first-factor loadings, normalized to sum one."""
    if solution.n_retained != 1:
        raise AggregationError(
            f"factor weights require a single retained factor, got {solution.n_retained}"
        )
    if solution.clock_names != cov.clock_names:
        raise AggregationError("factor solution and covariance use different clock sets")
    raw = cov.solve(solution.loadings)
    return MegaWeights(
        method="fa",
        clock_names=list(cov.clock_names),
        raw_weights=raw,
        loadings_used=solution.loadings.copy(),
    )


def mega_fa(panel: ClockPanel, solution: FactorSolution, cov: CovarianceEstimate) -> np.ndarray:
    """Factor-based weighted average of the clocks in years."""
    weights = factor_weights(solution, cov)
    if weights.clock_names != panel.clock_names:
        raise AggregationError("weights were computed for a different clock set")
    return panel.readings @ weights.normalized_weights


def leave_one_out(panel: ClockPanel, exclude: str, method: str) -> np.ndarray:
    """Recompute the chosen index after dropping one clock.

    The covariance (and, for the factor route, the whole extraction and
    its single-factor retention check) is recomputed on the reduced panel.
    """
    if panel.k < 3:
        raise AggregationError("leave-one-out requires at least three clocks")
    reduced = panel.drop_clock(exclude)
    cov = sample_covariance(reduced)
    if method == "wgt":
        return mega_wgt(reduced, weighted_index_weights(cov))
    if method == "fa":
        solution = efa(reduced)
        if solution.n_retained != 1:
            raise AggregationError(
                f"reduced panel without {exclude!r} retains {solution.n_retained} factors"
            )
        return mega_fa(reduced, solution, cov)
    raise AggregationError(f"unknown method {method!r}")


def weights_frame(weights: MegaWeights) -> pd.DataFrame:
    """Tabular export of raw and normalized weights."""
    frame = pd.DataFrame(
        {
            "clock": weights.clock_names,
            "raw_weight": weights.raw_weights,
            "normalized_weight": weights.normalized_weights,
        }
    )
    if weights.loadings_used is not None:
        frame["loading"] = weights.loadings_used
    return frame


def run_manifest(method: str, panel: ClockPanel, cov: CovarianceEstimate,
                 solution: FactorSolution | None = None) -> dict[str, str]:
    """key=value diagnostics recorded next to exported scores."""
    manifest = {
        "method": method,
        "n": str(panel.n),
        "k": str(panel.k),
        "clocks": ",".join(panel.clock_names),
        "covariance_ddof": str(cov.ddof),
        "condition_number": f"{cov.condition_number:.6e}",
    }
    if solution is not None:
        manifest["n_retained"] = str(solution.n_retained)
        manifest["efa_iterations"] = str(solution.n_iterations)
        manifest["eigenvalues"] = ",".join(f"{v:.6f}" for v in solution.eigenvalues)
    return manifest

"""megaclock: composite biological-age indices from noisy clock panels.

Aggregates several epigenetic-clock readings into a single latent-age
measure three ways — an inverse-covariance weighted index, a
factor-analytic index, and full maximum-likelihood estimation of a
latent-variable measurement model — and ships the downstream tooling
used with such scores: linear regressions with robust errors, a sharp
school-entry regression discontinuity, and deterministic simulators
that serve as ground-truth oracles.
"""

from .aggregation import (
    AggregationError,
    ClockPanel,
    CovarianceEstimate,
    FactorSolution,
    MegaWeights,
    efa,
    factor_weights,
    leave_one_out,
    mega_fa,
    mega_wgt,
    sample_covariance,
    weighted_index_weights,
)
from .cohort import (
    AbuseIndicator,
    AbuseRule,
    CohortError,
    CohortTable,
    LoadReport,
    any_abuse,
    combine_raters,
    dichotomize,
    load_cohort,
    prevalence_table,
    select_complete,
)
from .inference import (
    InferenceError,
    LinearModelSpec,
    RegressionFit,
    age_acceleration,
    build_exposure_spec,
    build_outcome_spec,
    constrained_sur_gls,
    ols,
    ols_fit,
)
from .rdd import (
    RddError,
    RddFit,
    RddSpec,
    normalize_running,
    placebo_outcome,
    rdd_fit,
    rdd_heterogeneity,
)
from .sem import (
    SemError,
    SemFit,
    SemModel,
    build_mimic,
    fit_sem,
    latent_scores,
    rescale_reference,
)
from .simulate import (
    SimConfig,
    SimulationError,
    simulate_abuse_cohort,
    simulate_clock_panel,
    simulate_rdd_cohort,
)

__version__ = "0.1.0"

__all__ = [
    "AbuseIndicator",
    "AbuseRule",
    "AggregationError",
    "ClockPanel",
    "CohortError",
    "CohortTable",
    "CovarianceEstimate",
    "FactorSolution",
    "InferenceError",
    "LinearModelSpec",
    "LoadReport",
    "MegaWeights",
    "RddError",
    "RddFit",
    "RddSpec",
    "RegressionFit",
    "SemError",
    "SemFit",
    "SemModel",
    "SimConfig",
    "SimulationError",
    "age_acceleration",
    "any_abuse",
    "build_exposure_spec",
    "build_mimic",
    "build_outcome_spec",
    "combine_raters",
    "constrained_sur_gls",
    "dichotomize",
    "efa",
    "factor_weights",
    "fit_sem",
    "latent_scores",
    "leave_one_out",
    "load_cohort",
    "mega_fa",
    "mega_wgt",
    "normalize_running",
    "ols",
    "ols_fit",
    "placebo_outcome",
    "prevalence_table",
    "rdd_fit",
    "rdd_heterogeneity",
    "rescale_reference",
    "sample_covariance",
    "select_complete",
    "simulate_abuse_cohort",
    "simulate_clock_panel",
    "simulate_rdd_cohort",
    "weighted_index_weights",
]

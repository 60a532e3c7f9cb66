"""Deterministic synthetic-cohort generators used as estimation oracles.

Three generators share one validated configuration: a single-factor
clock panel, an abuse-exposure design with under-reporting raters and
cross-period persistence, and a school-entry discontinuity design with
an optional class-specific jump. Every column draws from its own named
random substream, so adding a column to a generator never perturbs the
values of existing ones, and identical (config, seed) pairs reproduce
bit-identical tables.

Ground-truth columns (the latent, its disturbance, true exposure
status) are attached as hidden columns: they are available to oracle
code in-process but are excluded from exported CSVs unless explicitly
requested.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .cohort import CohortTable, ID_COLUMN
from .rdd import normalize_running

__all__ = [
    "SimConfig",
    "SimulationError",
    "simulate_abuse_cohort",
    "simulate_clock_panel",
    "simulate_rdd_cohort",
    "verify_moments",
]

TRUTH_COLUMNS = (
    "true_latent",
    "true_disturbance",
    "true_abuse_0_10",
    "true_abuse_11_18",
)


class SimulationError(ValueError):
    """Raised on invalid simulation configurations."""


@dataclass
class SimConfig:
    """All knobs for the three generators; ``seed`` is mandatory.

    Clock measurement: ``loadings`` and ``error_sds`` (one per clock,
    years), optional per-clock ``intercepts``. Latent model: EA* =
    ``age_slope``*age + X'gamma + omega with covariates drawn standard
    normal per entry of ``covariate_effects``. Abuse design: early
    prevalence, persistence into the later period, base late-onset
    rate, per-rater miss (under-report) probabilities, effect sizes in
    years, optional mediator channel. Discontinuity design: jump
    ``tau``, running-variable ``slope``, birth-month weights, optional
    extra jump ``group_tau`` for the ``group_share`` subpopulation.
    """

    seed: int | None = None
    n: int = 448
    loadings: tuple = (1.0, 0.8, 1.2, 0.9)
    error_sds: tuple = (2.5, 3.0, 3.2, 3.5)
    intercepts: tuple | None = None
    age_mean: float = 15.5
    age_sd: float = 0.3
    age_slope: float = 1.0
    omega_sd: float = 2.5
    covariate_effects: dict = field(default_factory=dict)
    # abuse design
    abuse_prevalence: float = 0.14
    persistence: float = 0.45
    late_onset_rate: float = 0.08
    rater_miss: dict = field(default_factory=lambda: {"mother": 0.3, "child": 0.3})
    effect_0_10: float = 0.5
    effect_11_18: float = 0.0
    mediator_effect: float = 0.0
    mediator_to_latent: float = 0.0
    mediator_sd: float = 1.0
    # discontinuity design
    tau: float = 0.5
    rdd_slope: float = 0.0
    rdd_intercept: float = 0.0
    rdd_noise_sd: float = 1.0
    month_weights: tuple | None = None
    group_share: float = 0.0
    group_tau: float = 0.0
    layer_clocks: bool = False

    def __post_init__(self) -> None:
        if self.seed is None:
            raise SimulationError("seed is mandatory")
        if self.n < 1:
            raise SimulationError("n must be positive")
        self.loadings = tuple(float(v) for v in self.loadings)
        self.error_sds = tuple(float(v) for v in self.error_sds)
        if len(self.loadings) != len(self.error_sds):
            raise SimulationError("loadings and error_sds must have one entry per clock")
        if self.intercepts is not None:
            self.intercepts = tuple(float(v) for v in self.intercepts)
            if len(self.intercepts) != len(self.loadings):
                raise SimulationError("intercepts must have one entry per clock")
        for name, value in [("age_sd", self.age_sd), ("omega_sd", self.omega_sd),
                            ("mediator_sd", self.mediator_sd),
                            ("rdd_noise_sd", self.rdd_noise_sd)]:
            if value < 0:
                raise SimulationError(f"{name} must be >= 0, got {value}")
        if any(sd < 0 for sd in self.error_sds):
            raise SimulationError("clock error SDs must be >= 0")
        for name, p in [("abuse_prevalence", self.abuse_prevalence),
                        ("persistence", self.persistence),
                        ("late_onset_rate", self.late_onset_rate),
                        ("group_share", self.group_share)]:
            if not 0.0 <= p <= 1.0:
                raise SimulationError(f"{name} must lie in [0, 1], got {p}")
        for rater, p in self.rater_miss.items():
            if not 0.0 <= p <= 1.0:
                raise SimulationError(f"miss probability for {rater!r} must lie in [0, 1]")
        if self.month_weights is not None:
            w = tuple(float(v) for v in self.month_weights)
            if len(w) != 12 or any(v < 0 for v in w) or sum(w) <= 0:
                raise SimulationError("month_weights needs 12 non-negative weights, not all zero")
            self.month_weights = w

    @property
    def k(self) -> int:
        return len(self.loadings)

    def rng(self, stream: str) -> np.random.Generator:
        """Independent generator for one named column stream."""
        return np.random.default_rng([self.seed, zlib.crc32(stream.encode())])


def _clock_columns(config: SimConfig, latent: np.ndarray) -> dict[str, np.ndarray]:
    intercepts = config.intercepts or (0.0,) * config.k
    out = {}
    for k in range(config.k):
        noise = config.rng(f"clock_{k + 1}").normal(0.0, config.error_sds[k], config.n)
        out[f"clock_{k + 1}"] = intercepts[k] + config.loadings[k] * latent + noise
    return out


def _covariate_columns(config: SimConfig) -> tuple[dict[str, np.ndarray], np.ndarray]:
    cols = {}
    contribution = np.zeros(config.n)
    for name, effect in config.covariate_effects.items():
        values = config.rng(f"covariate:{name}").standard_normal(config.n)
        cols[name] = values
        contribution += effect * values
    return cols, contribution


def _assemble(config: SimConfig, columns: dict[str, np.ndarray],
              types: dict[str, str]) -> CohortTable:
    data = pd.DataFrame({ID_COLUMN: np.arange(1, config.n + 1), **columns})
    hidden = frozenset(c for c in columns if c in TRUTH_COLUMNS)
    return CohortTable(data=data, types=types, hidden_columns=hidden)


def simulate_clock_panel(config: SimConfig) -> CohortTable:
    """Single-factor clock panel with hidden latent truth columns."""
    if config.n <= config.k:
        raise SimulationError(f"need n > number of clocks, got n={config.n}, k={config.k}")
    age = config.age_mean + config.rng("age_years").normal(0.0, config.age_sd, config.n)
    covs, cov_part = _covariate_columns(config)
    omega = config.rng("omega").normal(0.0, config.omega_sd, config.n)
    latent = config.age_slope * age + cov_part + omega
    columns = {"age_years": age, **covs, **_clock_columns(config, latent),
               "true_latent": latent, "true_disturbance": omega}
    types = {name: "continuous" for name in columns}
    return _assemble(config, columns, types)


def simulate_abuse_cohort(config: SimConfig) -> CohortTable:
    """Abuse-exposure design: persistence, noisy raters, latent aging shift.

    Early-period abuse is Bernoulli(``abuse_prevalence``); later-period
    abuse follows with probability ``persistence`` among the early
    abused and ``late_onset_rate`` otherwise. Each configured rater
    reports true abuse with probability 1 - miss (no false positives),
    producing columns ``<rater>_abuse_<period>``. The latent is shifted
    by the true effects, optionally partly through a mediator column.
    """
    if config.n <= config.k:
        raise SimulationError(f"need n > number of clocks, got n={config.n}, k={config.k}")
    rng_ab = config.rng("abuse_0_10")
    early = (rng_ab.random(config.n) < config.abuse_prevalence).astype(float)
    rng_late = config.rng("abuse_11_18")
    draw = rng_late.random(config.n)
    late = np.where(early == 1.0,
                    (draw < config.persistence).astype(float),
                    (draw < config.late_onset_rate).astype(float))

    age = config.age_mean + config.rng("age_years").normal(0.0, config.age_sd, config.n)
    covs, cov_part = _covariate_columns(config)
    omega = config.rng("omega").normal(0.0, config.omega_sd, config.n)

    mediator_part = np.zeros(config.n)
    mediator_cols: dict[str, np.ndarray] = {}
    if config.mediator_effect != 0.0 or config.mediator_to_latent != 0.0:
        med_noise = config.rng("mediator").normal(0.0, config.mediator_sd, config.n)
        mediator = config.mediator_effect * early + med_noise
        mediator_cols["cell_count_proxy"] = mediator
        mediator_part = config.mediator_to_latent * mediator

    latent = (config.age_slope * age + cov_part + omega
              + config.effect_0_10 * early + config.effect_11_18 * late
              + mediator_part)

    reports: dict[str, np.ndarray] = {}
    for rater, miss in config.rater_miss.items():
        for period, truth in (("0_10", early), ("11_18", late)):
            seen = config.rng(f"rater:{rater}:{period}").random(config.n) >= miss
            reports[f"{rater}_abuse_{period}"] = truth * seen.astype(float)

    columns = {
        "age_years": age,
        **covs,
        **reports,
        **mediator_cols,
        **_clock_columns(config, latent),
        "true_latent": latent,
        "true_disturbance": omega,
        "true_abuse_0_10": early,
        "true_abuse_11_18": late,
    }
    types = {name: "continuous" for name in columns}
    for name in list(reports) + ["true_abuse_0_10", "true_abuse_11_18"]:
        types[name] = "binary"
    return _assemble(config, columns, types)


def simulate_rdd_cohort(config: SimConfig) -> CohortTable:
    """School-entry discontinuity design with a known jump at the cutoff.

    Outcome = intercept + tau*Treat + slope*MoB + covariate effects +
    noise, with an additional ``group_tau``*Treat jump for the
    ``group``=1 subpopulation when configured. With ``layer_clocks``
    the outcome instead shifts the latent and clock columns are
    generated on top.
    """
    weights = np.asarray(config.month_weights if config.month_weights is not None
                         else (1.0,) * 12, dtype=float)
    weights = weights / weights.sum()
    months = config.rng("birth_month").choice(np.arange(1, 13), size=config.n, p=weights)
    running = normalize_running(months).astype(float)
    if not (running >= 0).any() or not (running < 0).any():
        raise SimulationError("month distribution leaves one side of the cutoff empty")
    treat = (running >= 0).astype(float)

    covs, cov_part = _covariate_columns(config)
    group_cols: dict[str, np.ndarray] = {}
    group_part = np.zeros(config.n)
    if config.group_share > 0.0:
        group = (config.rng("group").random(config.n) < config.group_share).astype(float)
        group_cols["group"] = group
        group_part = config.group_tau * treat * group

    noise = config.rng("rdd_noise").normal(0.0, config.rdd_noise_sd, config.n)
    signal = (config.rdd_intercept + config.tau * treat + config.rdd_slope * running
              + cov_part + group_part)

    columns: dict[str, np.ndarray] = {"mob": months.astype(float), **covs, **group_cols}
    types: dict[str, str] = {name: "continuous" for name in columns}
    if "group" in columns:
        types["group"] = "binary"
    if config.layer_clocks:
        omega = config.rng("omega").normal(0.0, config.omega_sd, config.n)
        age = config.age_mean + config.rng("age_years").normal(0.0, config.age_sd, config.n)
        latent = config.age_slope * age + signal + omega
        columns["age_years"] = age
        columns.update(_clock_columns(config, latent))
        columns["true_latent"] = latent
        columns["true_disturbance"] = omega
        for name in ("age_years", "true_latent", "true_disturbance"):
            types[name] = "continuous"
        for k in range(config.k):
            types[f"clock_{k + 1}"] = "continuous"
    else:
        columns["outcome"] = signal + noise
        types["outcome"] = "continuous"
    return _assemble(config, columns, types)


def verify_moments(table: CohortTable, config: SimConfig) -> dict[str, bool]:
    """Self-test: generated column moments sit within 4/sqrt(N) bands.

    Checks the normally generated building blocks (age and covariates)
    against their configured mean/SD; returns a per-column pass map.
    """
    tol = 4.0 / np.sqrt(config.n)
    out: dict[str, bool] = {}
    if "age_years" in table.data.columns:
        age = table.data["age_years"].to_numpy(float)
        out["age_years"] = (abs(age.mean() - config.age_mean) <= 4.0 * max(config.age_sd, 1e-12)
                            / np.sqrt(config.n) + 1e-12)
    for name in config.covariate_effects:
        if name in table.data.columns:
            v = table.data[name].to_numpy(float)
            out[name] = abs(v.mean()) <= tol and abs(v.std(ddof=1) - 1.0) <= tol
    return out

"""Latent-aging measurement model estimated by Gaussian maximum likelihood.

The model treats each clock as a noisy indicator of a latent biological
age, identified by fixing the reference indicator's loading to one. Two
structural configurations are supported: the latent regressed on
observed covariates (the default), and the latent entering as a
regressor in an outcome equation alongside controls.

Estimation maximizes the conditional Gaussian likelihood of the
indicators given the covariates. The likelihood and its analytic
gradient are evaluated from cross-product sufficient statistics, so the
per-iteration cost is independent of the sample size; standard errors
come from the observed information (numerically differentiated analytic
gradient), with a sandwich variant behind a flag.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize

from .cohort import CohortTable

__all__ = [
    "MeasurementBlock",
    "SemError",
    "SemFit",
    "SemModel",
    "build_mimic",
    "fit_sem",
    "latent_scores",
    "parse_model_file",
    "rescale_reference",
]

LATENT_ON_COVARIATES = "latent_on_covariates"
OUTCOME_ON_LATENT = "outcome_on_latent"

GRAD_TOL = 1e-6  # on the per-observation log-likelihood scale
VAR_FLOOR = 1e-10
HEYWOOD_TOL = 1e-8


class SemError(ValueError):
    """Raised on malformed models, identification failures, or non-convergence."""


@dataclass(frozen=True)
class MeasurementBlock:
    latent: str
    indicators: tuple
    reference: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "indicators", tuple(self.indicators))
        if len(self.indicators) < 2:
            raise SemError(f"latent {self.latent!r} is under-identified: "
                           f"{len(self.indicators)} indicator(s), need at least 2")
        if len(set(self.indicators)) != len(self.indicators):
            raise SemError(f"latent {self.latent!r} lists duplicate indicators")
        if self.reference not in self.indicators:
            raise SemError(f"reference {self.reference!r} is not an indicator of {self.latent!r}")


@dataclass
class SemModel:
    """Validated model description with identification bookkeeping."""

    blocks: list[MeasurementBlock]
    covariates: list[str]
    config: str = LATENT_ON_COVARIATES
    outcome: str | None = None
    outcome_controls: list[str] = field(default_factory=list)
    n_free_parameters: int = field(init=False)
    n_moments: int = field(init=False)
    degrees_of_freedom: int = field(init=False)

    def __post_init__(self) -> None:
        if not self.blocks:
            raise SemError("model needs at least one measurement block")
        seen: set[str] = set()
        for block in self.blocks:
            overlap = seen & set(block.indicators)
            if overlap:
                raise SemError(f"indicator(s) assigned to two latents: {sorted(overlap)}")
            seen |= set(block.indicators)
        if self.config == OUTCOME_ON_LATENT:
            if self.outcome is None:
                raise SemError("outcome_on_latent config requires an outcome column")
            if len(self.blocks) != 1:
                raise SemError("outcome_on_latent config supports a single latent")
            if self.covariates:
                raise SemError("outcome_on_latent config places controls in the outcome "
                               "equation, not on the latent")
        elif self.config != LATENT_ON_COVARIATES:
            raise SemError(f"unknown config {self.config!r}")
        self._count_parameters()
        if self.degrees_of_freedom < 0:
            raise SemError(
                f"model is under-identified: {self.n_free_parameters} free parameters "
                f"for {self.n_moments} observed moments"
            )

    def _count_parameters(self) -> None:
        K = self.n_indicators
        L = len(self.blocks)
        free_loadings = K - L
        if self.config == LATENT_ON_COVARIATES:
            P = len(self.covariates)
            params = free_loadings + K + L * P + L + K
            moments = K + K * P + K * (K + 1) // 2
        else:
            PH = len(self.outcome_controls)
            # observed block is (indicators, outcome); latent mean fixed at 0
            D = K + 1
            params = free_loadings + 1 + K + 1 + PH + 1 + K + 1
            moments = D + D * PH + D * (D + 1) // 2
        self.n_free_parameters = params
        self.n_moments = moments
        self.degrees_of_freedom = moments - params

    @property
    def n_indicators(self) -> int:
        return sum(len(b.indicators) for b in self.blocks)

    @property
    def indicator_names(self) -> list[str]:
        return [name for b in self.blocks for name in b.indicators]

    @property
    def latent_names(self) -> list[str]:
        return [b.latent for b in self.blocks]

    def block_for(self, indicator: str) -> MeasurementBlock:
        for block in self.blocks:
            if indicator in block.indicators:
                return block
        raise SemError(f"{indicator!r} is not an indicator of any latent")

    def parameter_summary(self) -> dict[str, int]:
        K, L = self.n_indicators, len(self.blocks)
        summary = {
            "free_loadings": K - L,
            "intercepts": K,
            "indicator_variances": K,
            "latent_variances": L,
        }
        if self.config == LATENT_ON_COVARIATES:
            summary["gamma"] = L * len(self.covariates)
        else:
            summary["delta"] = 1
            summary["outcome_controls"] = len(self.outcome_controls)
            summary["outcome_variance"] = 1
        return summary


def build_mimic(latents, covariates, config: str = LATENT_ON_COVARIATES,
                outcome: str | None = None, outcome_controls=None) -> SemModel:
    """Assemble and validate a measurement+structural model.

    ``latents`` is a list of (latent name, indicator list, reference
    indicator) triples. Under-identified descriptions are rejected here,
    before any data is touched.
    """
    blocks = [MeasurementBlock(latent=name, indicators=inds, reference=ref)
              for name, inds, ref in latents]
    return SemModel(
        blocks=blocks,
        covariates=list(covariates),
        config=config,
        outcome=outcome,
        outcome_controls=list(outcome_controls or []),
    )


def parse_model_file(text: str) -> SemModel:
    """Parse the plain-text model block format.

    Lines: ``latent <name>: ind1 ind2 ... ref=<indicator>``,
    ``covariates: ...``, ``outcome: <col>``, ``controls: ...``.
    """
    latents = []
    covariates: list[str] = []
    outcome = None
    controls: list[str] = []
    for raw_line in text.splitlines():
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, rest = line.partition(":")
        key = key.strip().lower()
        tokens = rest.split()
        if key.startswith("latent"):
            parts = key.split()
            if len(parts) != 2:
                raise SemError(f"malformed latent line: {raw_line!r}")
            name = parts[1]
            inds = [t for t in tokens if not t.startswith("ref=")]
            refs = [t[4:] for t in tokens if t.startswith("ref=")]
            if len(refs) != 1:
                raise SemError(f"latent {name!r} needs exactly one ref=<indicator>")
            latents.append((name, inds, refs[0]))
        elif key == "covariates":
            covariates = tokens
        elif key == "outcome":
            if len(tokens) != 1:
                raise SemError("outcome line must name exactly one column")
            outcome = tokens[0]
        elif key == "controls":
            controls = tokens
        else:
            raise SemError(f"unrecognized model line: {raw_line!r}")
    config = OUTCOME_ON_LATENT if outcome is not None else LATENT_ON_COVARIATES
    return build_mimic(latents, covariates, config=config, outcome=outcome,
                       outcome_controls=controls)


# ---------------------------------------------------------------------------
# likelihood problems
# ---------------------------------------------------------------------------


class _BaseProblem:
    """Shared negative-mean-log-likelihood machinery.

    Subclasses provide the residual map T(params) such that the
    per-subject residual is e_i = T z_i, and the model-implied residual
    covariance Sigma(params). The data enters only through S_zz = Z'Z.
    """

    def __init__(self, Z: np.ndarray, obs_dim: int):
        self.Z = Z
        self.N = Z.shape[0]
        self.obs_dim = obs_dim
        self.S_zz = Z.T @ Z

    # -- generic evaluation -------------------------------------------------

    def value_and_grad(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        T, Sigma = self._structure(x)
        try:
            chol = scipy.linalg.cho_factor(Sigma, lower=True)
        except (scipy.linalg.LinAlgError, ValueError):
            return np.inf, np.zeros_like(x)
        logdet = 2.0 * float(np.sum(np.log(np.diag(chol[0]))))
        W = scipy.linalg.cho_solve(chol, np.eye(self.obs_dim))
        E2 = T @ self.S_zz @ T.T
        ll = -0.5 * self.N * (self.obs_dim * np.log(2.0 * np.pi) + logdet) \
            - 0.5 * float(np.sum(W * E2))
        G = -0.5 * self.N * W + 0.5 * (W @ E2 @ W)
        DT = -(W @ T @ self.S_zz)
        grad_ll = self._grad(x, T, G, DT)
        return -ll / self.N, -grad_ll / self.N

    def loglik(self, x: np.ndarray) -> float:
        value, _ = self.value_and_grad(x)
        return -value * self.N

    def scores(self, x: np.ndarray) -> np.ndarray:
        """Per-observation gradient of the log-likelihood (N x n_params)."""
        T, Sigma = self._structure(x)
        W = np.linalg.inv(Sigma)
        E = self.Z @ T.T          # residuals, N x obs_dim
        U = E @ W                 # W e_i rows
        return self._per_obs_scores(x, T, W, E, U)

    def residuals(self, x: np.ndarray) -> np.ndarray:
        T, _ = self._structure(x)
        return self.Z @ T.T

    # subclass hooks
    def _structure(self, x):  # pragma: no cover - abstract
        raise NotImplementedError

    def _grad(self, x, T, G, DT):  # pragma: no cover - abstract
        raise NotImplementedError

    def _per_obs_scores(self, x, T, W, E, U):  # pragma: no cover - abstract
        raise NotImplementedError


class _LatentOnCovariatesProblem(_BaseProblem):
    """Conditional likelihood of the indicators given the covariates.

    z_i = (C_i, X_i, 1); T = [I_K | -Lambda Gamma | -nu];
    Sigma = Lambda Psi Lambda' + diag(theta).
    """

    def __init__(self, model: SemModel, C: np.ndarray, X: np.ndarray):
        self.model = model
        self.K = model.n_indicators
        self.L = len(model.blocks)
        self.P = len(model.covariates)
        self.C = C
        self.X = X
        Z = np.column_stack([C, X, np.ones(len(C))])
        super().__init__(Z, self.K)
        # loading pattern: row index of each indicator, its latent column
        self.latent_of = np.zeros(self.K, dtype=int)
        self.is_reference = np.zeros(self.K, dtype=bool)
        idx = 0
        for l, block in enumerate(model.blocks):
            for name in block.indicators:
                self.latent_of[idx] = l
                self.is_reference[idx] = name == block.reference
                idx += 1
        self.free_rows = np.flatnonzero(~self.is_reference)
        self.param_names = (
            [f"loading:{name}" for name, ref in zip(model.indicator_names, self.is_reference)
             if not ref]
            + [f"intercept:{name}" for name in model.indicator_names]
            + [f"gamma:{b.latent}:{cov}" for b in model.blocks for cov in model.covariates]
            + [f"latent_var:{b.latent}" for b in model.blocks]
            + [f"resid_var:{name}" for name in model.indicator_names]
        )
        nl = len(self.free_rows)
        self.slices = {
            "loadings": slice(0, nl),
            "nu": slice(nl, nl + self.K),
            "gamma": slice(nl + self.K, nl + self.K + self.L * self.P),
            "psi": slice(nl + self.K + self.L * self.P, nl + self.K + self.L * self.P + self.L),
            "theta": slice(nl + self.K + self.L * self.P + self.L,
                           nl + self.K + self.L * self.P + self.L + self.K),
        }
        self.n_params = self.slices["theta"].stop

    def unpack(self, x: np.ndarray):
        Lam = np.zeros((self.K, self.L))
        Lam[np.arange(self.K)[self.is_reference], self.latent_of[self.is_reference]] = 1.0
        Lam[self.free_rows, self.latent_of[self.free_rows]] = x[self.slices["loadings"]]
        nu = x[self.slices["nu"]]
        Gam = x[self.slices["gamma"]].reshape(self.L, self.P)
        psi = x[self.slices["psi"]]
        theta = x[self.slices["theta"]]
        return Lam, nu, Gam, psi, theta

    def _structure(self, x):
        Lam, nu, Gam, psi, theta = self.unpack(x)
        T = np.empty((self.K, self.K + self.P + 1))
        T[:, : self.K] = np.eye(self.K)
        T[:, self.K: self.K + self.P] = -Lam @ Gam
        T[:, -1] = -nu
        Sigma = (Lam * psi) @ Lam.T + np.diag(theta)
        return T, Sigma

    def _grad(self, x, T, G, DT):
        Lam, nu, Gam, psi, theta = self.unpack(x)
        g = np.empty(self.n_params)
        GLP = 2.0 * (G @ (Lam * psi))                      # K x L
        x_cols = slice(self.K, self.K + self.P)
        for j, k in enumerate(self.free_rows):
            l = self.latent_of[k]
            g[j] = GLP[k, l] - DT[k, x_cols] @ Gam[l]
        g[self.slices["nu"]] = -DT[:, -1]
        gam_grad = -(Lam.T @ DT[:, x_cols])                # L x P
        g[self.slices["gamma"]] = gam_grad.ravel()
        g[self.slices["psi"]] = np.einsum("kl,kj,jl->l", Lam, G, Lam)
        g[self.slices["theta"]] = np.diag(G)
        return g

    def _per_obs_scores(self, x, T, W, E, U):
        Lam, nu, Gam, psi, theta = self.unpack(x)
        N = self.N
        S = np.empty((N, self.n_params))
        WLP = W @ (Lam * psi)                              # K x L
        UL = U @ Lam                                       # N x L
        for j, k in enumerate(self.free_rows):
            l = self.latent_of[k]
            # covariance channel plus the mean channel through -Lambda Gamma
            S[:, j] = (-WLP[k, l] + psi[l] * U[:, k] * UL[:, l]
                       + U[:, k] * (self.X @ Gam[l]))
        S[:, self.slices["nu"]] = U
        for l in range(self.L):
            for p in range(self.P):
                col = self.slices["gamma"].start + l * self.P + p
                S[:, col] = UL[:, l] * self.X[:, p]
        WL = W @ Lam
        for l in range(self.L):
            S[:, self.slices["psi"].start + l] = (
                -0.5 * float(Lam[:, l] @ WL[:, l]) + 0.5 * UL[:, l] ** 2
            )
        S[:, self.slices["theta"]] = -0.5 * np.diag(W)[None, :] + 0.5 * U**2
        return S

    def start_values(self, rng: np.random.Generator | None = None) -> np.ndarray:
        """Moment-based start: block-mean proxies for each latent."""
        x = np.empty(self.n_params)
        Lam0 = np.ones(self.K)
        psi0 = np.empty(self.L)
        theta0 = np.empty(self.K)
        Gam0 = np.zeros((self.L, self.P))
        for l, block in enumerate(self.blocks_indices()):
            cols = self.C[:, block]
            ref_local = int(np.flatnonzero(self.is_reference[block])[0])
            proxy = cols.mean(axis=1)
            var_proxy = max(proxy.var(), 1e-8)
            lam_block = np.array([np.cov(cols[:, j], proxy)[0, 1] / var_proxy
                                  for j in range(cols.shape[1])])
            ref_val = lam_block[ref_local] if abs(lam_block[ref_local]) > 1e-8 else 1.0
            lam_block = lam_block / ref_val
            Lam0[block] = lam_block
            if self.P:
                Xd = np.column_stack([np.ones(self.N), self.X])
                coef, *_ = np.linalg.lstsq(Xd, proxy / ref_val, rcond=None)
                Gam0[l] = coef[1:]
            psi0[l] = max(0.5 * proxy.var() / ref_val**2, 1e-4)
            theta0[block] = np.maximum(0.5 * cols.var(axis=0), 1e-4)
        latent_mean = np.zeros(self.K)
        for l, block in enumerate(self.blocks_indices()):
            mu_l = (self.X @ Gam0[l]).mean() if self.P else 0.0
            latent_mean[block] = mu_l * Lam0[block]
        nu0 = self.C.mean(axis=0) - latent_mean
        x[self.slices["loadings"]] = Lam0[self.free_rows]
        x[self.slices["nu"]] = nu0
        x[self.slices["gamma"]] = Gam0.ravel()
        x[self.slices["psi"]] = psi0
        x[self.slices["theta"]] = theta0
        if rng is not None:
            scale = np.maximum(np.abs(x), 0.1)
            x = x + rng.normal(0.0, 0.3, size=x.shape) * scale
            x[self.slices["psi"]] = np.abs(x[self.slices["psi"]]) + 1e-4
            x[self.slices["theta"]] = np.abs(x[self.slices["theta"]]) + 1e-4
        return x

    def blocks_indices(self) -> list[np.ndarray]:
        out = []
        idx = 0
        for block in self.model.blocks:
            out.append(np.arange(idx, idx + len(block.indicators)))
            idx += len(block.indicators)
        return out

    def bounds(self):
        b: list[tuple[float | None, float | None]] = [(None, None)] * self.n_params
        for s in (self.slices["psi"], self.slices["theta"]):
            for i in range(s.start, s.stop):
                b[i] = (VAR_FLOOR, None)
        return b

    def variance_indices(self) -> list[int]:
        return list(range(self.slices["psi"].start, self.slices["theta"].stop))


class _OutcomeOnLatentProblem(_BaseProblem):
    """Joint likelihood of (indicators, outcome) given outcome controls.

    Augmented loading vector b = (lambda, delta) on the single latent;
    Sigma = phi b b' + diag(theta, sigma2_u). The latent mean is fixed
    at zero; indicator intercepts and the outcome equation absorb means.
    """

    def __init__(self, model: SemModel, C: np.ndarray, Y: np.ndarray, H: np.ndarray):
        self.model = model
        self.K = model.n_indicators
        self.PH = H.shape[1]
        self.C = C
        self.Y = Y
        self.H = H
        Z = np.column_stack([C, Y, H, np.ones(len(C))])
        super().__init__(Z, self.K + 1)
        block = model.blocks[0]
        self.ref_index = block.indicators.index(block.reference)
        self.free_rows = np.array([k for k in range(self.K) if k != self.ref_index])
        names = model.indicator_names
        self.param_names = (
            [f"loading:{names[k]}" for k in self.free_rows]
            + ["delta"]
            + [f"intercept:{name}" for name in names]
            + ["outcome_intercept"]
            + [f"outcome_beta:{c}" for c in model.outcome_controls]
            + [f"latent_var:{block.latent}"]
            + [f"resid_var:{name}" for name in names]
            + ["outcome_resid_var"]
        )
        nl = len(self.free_rows)
        offsets = np.cumsum([0, nl, 1, self.K, 1, self.PH, 1, self.K, 1])
        keys = ["loadings", "delta", "nu", "c", "beta", "phi", "theta", "sigma_u"]
        self.slices = {k: slice(offsets[i], offsets[i + 1]) for i, k in enumerate(keys)}
        self.n_params = offsets[-1]

    def unpack(self, x: np.ndarray):
        b = np.empty(self.K + 1)
        b[self.ref_index] = 1.0
        b[self.free_rows] = x[self.slices["loadings"]]
        b[self.K] = x[self.slices["delta"]][0]
        nu = x[self.slices["nu"]]
        c0 = x[self.slices["c"]][0]
        beta = x[self.slices["beta"]]
        phi = x[self.slices["phi"]][0]
        diag_err = np.empty(self.K + 1)
        diag_err[: self.K] = x[self.slices["theta"]]
        diag_err[self.K] = x[self.slices["sigma_u"]][0]
        return b, nu, c0, beta, phi, diag_err

    def _structure(self, x):
        b, nu, c0, beta, phi, diag_err = self.unpack(x)
        D = self.K + 1
        T = np.zeros((D, D + self.PH + 1))
        T[:, :D] = np.eye(D)
        T[self.K, D: D + self.PH] = -beta
        T[: self.K, -1] = -nu
        T[self.K, -1] = -c0
        Sigma = phi * np.outer(b, b) + np.diag(diag_err)
        return T, Sigma

    def _grad(self, x, T, G, DT):
        b, nu, c0, beta, phi, diag_err = self.unpack(x)
        g = np.empty(self.n_params)
        Gb = G @ b
        D = self.K + 1
        g[self.slices["loadings"]] = 2.0 * phi * Gb[self.free_rows]
        g[self.slices["delta"]] = 2.0 * phi * Gb[self.K]
        g[self.slices["nu"]] = -DT[: self.K, -1]
        g[self.slices["c"]] = -DT[self.K, -1]
        g[self.slices["beta"]] = -DT[self.K, D: D + self.PH]
        g[self.slices["phi"]] = float(b @ Gb)
        g[self.slices["theta"]] = np.diag(G)[: self.K]
        g[self.slices["sigma_u"]] = G[self.K, self.K]
        return g

    def _per_obs_scores(self, x, T, W, E, U):
        b, nu, c0, beta, phi, diag_err = self.unpack(x)
        S = np.empty((self.N, self.n_params))
        Wb = W @ b
        Ub = U @ b
        for j, k in enumerate(np.concatenate([self.free_rows, [self.K]])):
            S[:, j] = -phi * Wb[k] + phi * U[:, k] * Ub
        S[:, self.slices["nu"]] = U[:, : self.K]
        S[:, self.slices["c"]] = U[:, [self.K]]
        S[:, self.slices["beta"]] = U[:, [self.K]] * self.H
        S[:, self.slices["phi"]] = -0.5 * float(b @ Wb) + 0.5 * Ub**2
        S[:, self.slices["theta"]] = -0.5 * np.diag(W)[None, : self.K] + 0.5 * U[:, : self.K] ** 2
        S[:, self.slices["sigma_u"]] = (-0.5 * W[self.K, self.K] + 0.5 * U[:, self.K] ** 2)[:, None]
        return S

    def start_values(self, rng: np.random.Generator | None = None) -> np.ndarray:
        x = np.empty(self.n_params)
        proxy = self.C.mean(axis=1)
        var_proxy = max(proxy.var(), 1e-8)
        lam = np.array([np.cov(self.C[:, j], proxy)[0, 1] / var_proxy for j in range(self.K)])
        ref = lam[self.ref_index] if abs(lam[self.ref_index]) > 1e-8 else 1.0
        lam = lam / ref
        x[self.slices["loadings"]] = lam[self.free_rows]
        Hd = np.column_stack([np.ones(self.N), self.H, proxy])
        coef, *_ = np.linalg.lstsq(Hd, self.Y, rcond=None)
        x[self.slices["delta"]] = coef[-1]
        x[self.slices["nu"]] = self.C.mean(axis=0)
        x[self.slices["c"]] = coef[0]
        x[self.slices["beta"]] = coef[1:-1]
        x[self.slices["phi"]] = max(0.5 * proxy.var(), 1e-4)
        x[self.slices["theta"]] = np.maximum(0.5 * self.C.var(axis=0), 1e-4)
        x[self.slices["sigma_u"]] = max(0.5 * self.Y.var(), 1e-4)
        if rng is not None:
            scale = np.maximum(np.abs(x), 0.1)
            x = x + rng.normal(0.0, 0.3, size=x.shape) * scale
            for key in ("phi", "theta", "sigma_u"):
                s = self.slices[key]
                x[s] = np.abs(x[s]) + 1e-4
        return x

    def bounds(self):
        b: list[tuple[float | None, float | None]] = [(None, None)] * self.n_params
        for key in ("phi", "theta", "sigma_u"):
            s = self.slices[key]
            for i in range(s.start, s.stop):
                b[i] = (VAR_FLOOR, None)
        return b

    def variance_indices(self) -> list[int]:
        out = []
        for key in ("phi", "theta", "sigma_u"):
            s = self.slices[key]
            out.extend(range(s.start, s.stop))
        return out


def _make_problem(model: SemModel, table: CohortTable) -> _BaseProblem:
    needed = model.indicator_names + list(model.covariates) + list(model.outcome_controls)
    if model.outcome:
        needed.append(model.outcome)
    table.require_columns(needed)
    frame = table.data[needed]
    if frame.isna().any().any():
        raise SemError("model columns contain missing values; run select_complete first")
    C = frame[model.indicator_names].to_numpy(float)
    if model.config == LATENT_ON_COVARIATES:
        X = frame[model.covariates].to_numpy(float) if model.covariates \
            else np.empty((len(frame), 0))
        return _LatentOnCovariatesProblem(model, C, X)
    Y = frame[model.outcome].to_numpy(float)
    H = frame[model.outcome_controls].to_numpy(float) if model.outcome_controls \
        else np.empty((len(frame), 0))
    return _OutcomeOnLatentProblem(model, C, Y, H)


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


@dataclass
class SemFit:
    model: SemModel
    parameters: np.ndarray
    parameter_names: list[str]
    log_likelihood: float
    n_obs: int
    gradient_norm: float
    n_iterations: int
    n_restarts: int
    converged: bool
    heywood: list[str]
    standard_errors: np.ndarray
    covariance: np.ndarray
    se_type: str = "observed"
    _problem: _BaseProblem | None = field(default=None, repr=False, compare=False)

    def __getitem__(self, name: str) -> float:
        return float(self.parameters[self.parameter_names.index(name)])

    def se(self, name: str) -> float:
        return float(self.standard_errors[self.parameter_names.index(name)])

    def loading(self, indicator: str) -> float:
        block = self.model.block_for(indicator)
        if indicator == block.reference:
            return 1.0
        return self[f"loading:{indicator}"]

    def loadings(self) -> dict[str, float]:
        return {name: self.loading(name) for name in self.model.indicator_names}

    def gamma(self, latent: str | None = None) -> np.ndarray:
        latent = latent or self.model.blocks[0].latent
        return np.array([self[f"gamma:{latent}:{cov}"] for cov in self.model.covariates])

    def intercept(self, indicator: str) -> float:
        return self[f"intercept:{indicator}"]

    def to_frame(self):
        import pandas as pd

        return pd.DataFrame(
            {
                "parameter": self.parameter_names,
                "estimate": self.parameters,
                "std_error": self.standard_errors,
            }
        )


def _numeric_hessian(fun_grad, x: np.ndarray, rel_step: float = 1e-5) -> np.ndarray:
    n = len(x)
    H = np.empty((n, n))
    for i in range(n):
        h = rel_step * max(abs(x[i]), 1.0)
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        _, gp = fun_grad(xp)
        _, gm = fun_grad(xm)
        H[i] = (gp - gm) / (2.0 * h)
    return 0.5 * (H + H.T)


class _LogVarianceObjective:
    """Reparametrize variance entries as log-variances for the optimizer.

    The likelihood surface becomes extremely ill-conditioned when an
    error variance collapses toward zero (degenerate, near-noiseless
    fits); in log space the same descent is smooth and unbounded, so
    the quasi-Newton search reaches the optimum instead of stalling on
    the boundary.
    """

    def __init__(self, problem: "_BaseProblem"):
        self.problem = problem
        self.n_params = problem.n_params
        self.vidx = np.array(problem.variance_indices(), dtype=int)

    def to_z(self, x: np.ndarray) -> np.ndarray:
        z = np.asarray(x, dtype=float).copy()
        z[self.vidx] = np.log(np.maximum(z[self.vidx], 1e-300))
        return z

    def to_x(self, z: np.ndarray) -> np.ndarray:
        x = np.asarray(z, dtype=float).copy()
        x[self.vidx] = np.exp(x[self.vidx])
        return x

    def value_and_grad(self, z: np.ndarray) -> tuple[float, np.ndarray]:
        x = self.to_x(z)
        value, grad = self.problem.value_and_grad(x)
        gz = grad.copy()
        gz[self.vidx] = grad[self.vidx] * x[self.vidx]
        return value, gz

    def bounds(self):
        b: list[tuple[float | None, float | None]] = [(None, None)] * self.n_params
        for i in self.vidx:
            b[i] = (-40.0, 40.0)
        return b


def fit_sem(model: SemModel, table: CohortTable, seed: int = 0, n_restarts: int = 3,
            se_type: str = "observed", max_iter: int = 2000) -> SemFit:
    """Fit the model by quasi-Newton maximization of the Gaussian likelihood.

    One moment-informed start plus ``n_restarts`` randomly perturbed
    starts are tried; the best converged likelihood wins. Deterministic
    given ``seed``. Variances sitting on the zero boundary are reported
    as Heywood cases with a warning rather than aborting the fit.
    """
    problem = _make_problem(model, table)
    if problem.N <= problem.n_params:
        raise SemError(
            f"need more observations ({problem.N}) than free parameters ({problem.n_params})"
        )
    rng = np.random.default_rng(seed)
    starts = [problem.start_values()]
    starts += [problem.start_values(rng) for _ in range(n_restarts)]

    objective = _LogVarianceObjective(problem)
    best = None
    attempts = []
    for x0 in starts:
        result = scipy.optimize.minimize(
            objective.value_and_grad,
            objective.to_z(x0),
            jac=True,
            method="L-BFGS-B",
            bounds=objective.bounds(),
            options={"maxiter": max_iter, "ftol": 1e-14, "gtol": 1e-9},
        )
        attempts.append(result)
        if not np.isfinite(result.fun):
            continue
        if best is None or result.fun < best.fun - 1e-12:
            best = result
    if best is None:
        trace = "; ".join(f"start {i}: {r.message}" for i, r in enumerate(attempts))
        raise SemError(f"optimization failed from every start ({trace})")

    # Restarting L-BFGS-B with a fresh curvature memory escapes stalls in
    # the narrow valleys created by near-zero error variances.
    z, f_prev = best.x, best.fun
    for _ in range(10):
        cycle = scipy.optimize.minimize(
            objective.value_and_grad,
            z,
            jac=True,
            method="L-BFGS-B",
            bounds=objective.bounds(),
            options={"maxiter": max_iter, "ftol": 1e-16, "gtol": 1e-10,
                     "maxcor": 30, "maxls": 60},
        )
        if not np.isfinite(cycle.fun) or cycle.fun > f_prev:
            break
        z = cycle.x
        if f_prev - cycle.fun < 1e-12 * max(abs(cycle.fun), 1.0):
            f_prev = cycle.fun
            break
        f_prev = cycle.fun

    x = objective.to_x(_polish(objective, z))
    value, grad = problem.value_and_grad(x)
    free = np.array([
        not (lo is not None and x[i] <= lo + HEYWOOD_TOL)
        for i, (lo, _) in enumerate(problem.bounds())
    ])
    grad_norm = float(np.max(np.abs(grad[free]))) if free.any() else 0.0
    converged = bool(np.isfinite(value)) and grad_norm < GRAD_TOL

    heywood = []
    for i in problem.variance_indices():
        if x[i] <= VAR_FLOOR + HEYWOOD_TOL:
            x[i] = VAR_FLOOR
            heywood.append(problem.param_names[i])
    if heywood:
        warnings.warn(
            "Heywood case: variance(s) pinned at zero: " + ", ".join(heywood),
            stacklevel=2,
        )

    info = problem.N * _numeric_hessian(problem.value_and_grad, x)
    cov = _safe_inverse(info)
    if se_type == "robust":
        bread = cov
        scores = problem.scores(x)
        meat = scores.T @ scores
        cov = bread @ meat @ bread
    elif se_type != "observed":
        raise SemError(f"unknown se_type {se_type!r}")
    with np.errstate(invalid="ignore"):
        ses = np.sqrt(np.clip(np.diag(cov), 0.0, None))

    return SemFit(
        model=model,
        parameters=x,
        parameter_names=list(problem.param_names),
        log_likelihood=-value * problem.N,
        n_obs=problem.N,
        gradient_norm=grad_norm,
        n_iterations=int(best.nit),
        n_restarts=len(starts),
        converged=converged,
        heywood=heywood,
        standard_errors=ses,
        covariance=cov,
        se_type=se_type,
        _problem=problem,
    )


def _polish(problem: _BaseProblem, x: np.ndarray, max_steps: int = 8,
            target: float = 1e-10) -> np.ndarray:
    """Newton refinement of the quasi-Newton solution.

    Near-degenerate fits (error variances on the boundary) leave the
    likelihood surface extremely ill-conditioned, where L-BFGS-B stops
    early; a few damped Newton steps on the interior parameters push
    the gradient down to machine-level accuracy.
    """
    x = x.copy()
    bounds = problem.bounds()
    for _ in range(max_steps):
        value, grad = problem.value_and_grad(x)
        free = np.array([
            not (lo is not None and x[i] <= lo + HEYWOOD_TOL and grad[i] > 0)
            for i, (lo, _) in enumerate(bounds)
        ])
        if not free.any() or np.max(np.abs(grad[free])) < target:
            break
        H = _numeric_hessian(problem.value_and_grad, x)[np.ix_(free, free)]
        try:
            step = np.linalg.solve(H, -grad[free])
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, -grad[free], rcond=None)[0]
        improved = False
        scale = 1.0
        for _ in range(12):
            trial = x.copy()
            trial[free] = x[free] + scale * step
            for i, (lo, _) in enumerate(bounds):
                if lo is not None and trial[i] < lo:
                    trial[i] = lo
            trial_value, _ = problem.value_and_grad(trial)
            if np.isfinite(trial_value) and trial_value <= value + 1e-15:
                x = trial
                improved = trial_value < value - 1e-16
                break
            scale *= 0.5
        if not improved:
            break
    return x


def _safe_inverse(matrix: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.inv(matrix)
    except np.linalg.LinAlgError:
        return np.linalg.pinv(matrix)


# ---------------------------------------------------------------------------
# scores and reparameterization
# ---------------------------------------------------------------------------


def latent_scores(fit: SemFit, table: CohortTable | None = None,
                  mode: str = "regression-score", latent: str | None = None) -> np.ndarray:
    """Per-subject latent-age scores in reference-clock units.

    ``linear-prediction`` returns the structural prediction (reference
    intercept plus covariate part) and requires the latent-on-covariates
    configuration. ``regression-score`` adds the conditional expectation
    of the latent disturbance given all indicators.
    """
    problem = fit._problem
    if problem is None:
        raise SemError("fit was created without data access; refit to score")
    if table is not None:
        problem = _make_problem(fit.model, table)
    model = fit.model
    block = model.blocks[0] if latent is None else \
        next(b for b in model.blocks if b.latent == latent)
    l_index = model.blocks.index(block)
    ref_intercept = fit.intercept(block.reference)

    if model.config == OUTCOME_ON_LATENT:
        if mode == "linear-prediction":
            raise SemError("linear-prediction requires the latent-on-covariates config")
        b, nu, c0, beta, phi, diag_err = problem.unpack(fit.parameters)
        T, Sigma = problem._structure(fit.parameters)
        E = problem.Z @ T.T
        weights = phi * _solve_possibly_singular(Sigma, b)
        return ref_intercept + E @ weights

    Lam, nu, Gam, psi, theta = problem.unpack(fit.parameters)
    base = ref_intercept + (problem.X @ Gam[l_index] if problem.P else np.zeros(problem.N))
    if mode == "linear-prediction":
        return base
    if mode != "regression-score":
        raise SemError(f"unknown scoring mode {mode!r}")
    T, Sigma = problem._structure(fit.parameters)
    E = problem.Z @ T.T
    weights = psi[l_index] * _solve_possibly_singular(Sigma, Lam[:, l_index])
    return base + E @ weights


def _solve_possibly_singular(Sigma: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        cond = np.linalg.cond(Sigma)
    except np.linalg.LinAlgError:
        cond = np.inf
    if not np.isfinite(cond) or cond > 1e12:
        return np.linalg.pinv(Sigma) @ rhs
    return np.linalg.solve(Sigma, rhs)


def rescale_reference(fit: SemFit, new_reference: str) -> SemFit:
    """Re-express the fit with a different reference indicator.

    The latent's scale changes by the old loading of the new reference;
    loadings, structural coefficients, and the latent variance are
    rescaled accordingly. The log-likelihood is unchanged. Standard
    errors are propagated through the (nonlinear) reparameterization by
    the delta method.
    """
    model = fit.model
    block = model.block_for(new_reference)
    scale = fit.loading(new_reference)
    if abs(scale) < 1e-12:
        raise SemError(f"cannot rescale: loading on {new_reference!r} is zero")

    new_blocks = [
        MeasurementBlock(b.latent, b.indicators, new_reference if b is block else b.reference)
        for b in model.blocks
    ]
    new_model = SemModel(
        blocks=new_blocks,
        covariates=list(model.covariates),
        config=model.config,
        outcome=model.outcome,
        outcome_controls=list(model.outcome_controls),
    )

    old_problem = fit._problem
    if old_problem is None:
        raise SemError("fit was created without data access; refit to rescale")
    new_problem = _rebuild_problem(new_model, old_problem)

    def transform(x: np.ndarray) -> np.ndarray:
        return _map_params(fit, model, new_model, old_problem, new_problem, block,
                           new_reference, x)

    new_x = transform(fit.parameters)
    jac = _numeric_jacobian(transform, fit.parameters)
    new_cov = jac @ fit.covariance @ jac.T
    with np.errstate(invalid="ignore"):
        ses = np.sqrt(np.clip(np.diag(new_cov), 0.0, None))

    return SemFit(
        model=new_model,
        parameters=new_x,
        parameter_names=list(new_problem.param_names),
        log_likelihood=fit.log_likelihood,
        n_obs=fit.n_obs,
        gradient_norm=fit.gradient_norm,
        n_iterations=fit.n_iterations,
        n_restarts=fit.n_restarts,
        converged=fit.converged,
        heywood=list(fit.heywood),
        standard_errors=ses,
        covariance=new_cov,
        se_type=fit.se_type,
        _problem=new_problem,
    )


def _rebuild_problem(new_model: SemModel, old: _BaseProblem) -> _BaseProblem:
    if isinstance(old, _LatentOnCovariatesProblem):
        return _LatentOnCovariatesProblem(new_model, old.C, old.X)
    return _OutcomeOnLatentProblem(new_model, old.C, old.Y, old.H)


def _map_params(fit, model, new_model, old_problem, new_problem, block, new_reference, x):
    """Map a parameter vector to the new reference normalization."""
    old_names = old_problem.param_names
    values = dict(zip(old_names, x))

    def old_loading(ind: str, b) -> float:
        return 1.0 if ind == b.reference else values[f"loading:{ind}"]

    scale = old_loading(new_reference, block)
    new_values: dict[str, float] = {}
    for b, nb in zip(model.blocks, new_model.blocks):
        rescaled = b is block
        s = scale if rescaled else 1.0
        for ind in b.indicators:
            if ind != nb.reference:
                new_values[f"loading:{ind}"] = old_loading(ind, b) / s
        new_values[f"latent_var:{b.latent}"] = values[f"latent_var:{b.latent}"] * s**2
        for cov in model.covariates:
            key = f"gamma:{b.latent}:{cov}"
            if key in values:
                new_values[key] = values[key] * s
    if model.config == OUTCOME_ON_LATENT:
        new_values["delta"] = values["delta"] / scale
    for name in old_names:
        if name not in new_values and not name.startswith("loading:"):
            new_values[name] = values[name]
    return np.array([new_values[name] for name in new_problem.param_names])


def _numeric_jacobian(fun, x: np.ndarray, rel_step: float = 1e-6) -> np.ndarray:
    f0 = fun(x)
    J = np.empty((len(f0), len(x)))
    for i in range(len(x)):
        h = rel_step * max(abs(x[i]), 1.0)
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        J[:, i] = (fun(xp) - fun(xm)) / (2.0 * h)
    return J

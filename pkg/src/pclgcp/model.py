"""Reparameterised log-Gaussian Cox process on a lattice.

Log-intensity per cell::

    eta = beta0 + Z beta + tau^(-1/2) (sqrt(phi) u* + sqrt(1 - phi) v)

with ``u*`` a unit-precision scaled RW2D field (sum-to-zero) and ``v`` iid N(0, 1).
The latent vector is laid out as ``x = (beta0, beta, u*, v)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np
from scipy.special import expit, gammaln

from .errors import DataError, NumericalError
from .igmrf import ScaledPrecision
from .kernels import poisson_terms
from .lattice import CountGrid, CovariateStack, PointPattern
from .priors import PcMixPrior, PcPrecPrior

ETA_MAX = 40.0
LOG_2PI = math.log(2.0 * math.pi)
# Precision added along the constrained directions of the structured field to make
# the prior proper; it cancels in every constrained density.
KAPPA = 1.0


@dataclass(frozen=True)
class Hyperparameters:
    tau: float
    phi: float

    def __post_init__(self):
        if not self.tau > 0:
            raise DataError(f"tau must be positive, got {self.tau}")
        if not 0 <= self.phi <= 1:
            raise DataError(f"phi must lie in [0, 1], got {self.phi}")

    @classmethod
    def from_internal(cls, theta) -> "Hyperparameters":
        return cls(float(math.exp(theta[0])), float(expit(theta[1])))

    @property
    def internal(self) -> np.ndarray:
        return np.array([math.log(self.tau), math.log(self.phi) - math.log1p(-self.phi)])

    @property
    def sigma(self) -> float:
        return self.tau ** -0.5

    @property
    def weights(self) -> tuple[float, float]:
        """Multipliers of u* and v in the predictor."""
        if math.isinf(self.tau):
            return 0.0, 0.0
        return math.sqrt(self.phi / self.tau), math.sqrt((1.0 - self.phi) / self.tau)


@dataclass
class LatentState:
    beta0: float
    beta: np.ndarray
    u_star: np.ndarray
    v: np.ndarray

    def to_vector(self) -> np.ndarray:
        return np.concatenate([[self.beta0], np.asarray(self.beta, float), self.u_star, self.v])

    @classmethod
    def from_vector(cls, x, p: int, n: int) -> "LatentState":
        x = np.asarray(x, dtype=float)
        return cls(float(x[0]), x[1 : p + 1].copy(), x[p + 1 : p + 1 + n].copy(), x[p + 1 + n :].copy())

    @classmethod
    def zeros(cls, p: int, n: int, beta0: float = 0.0) -> "LatentState":
        return cls(beta0, np.zeros(p), np.zeros(n), np.zeros(n))


class LikelihoodEval(NamedTuple):
    value: float
    grad: np.ndarray
    curv: np.ndarray


class PoissonLikelihood:
    def __init__(self, counts: CountGrid):
        self.y = counts.counts.astype(float)
        self.area = counts.areas
        self.log_area = np.log(counts.areas)
        self.lgam = gammaln(self.y + 1.0)

    def __call__(self, eta) -> LikelihoodEval:
        eta = np.asarray(eta, dtype=float)
        if eta.max(initial=-np.inf) > ETA_MAX:
            raise NumericalError(f"log-intensity {eta.max():.3g} exceeds {ETA_MAX}")
        return LikelihoodEval(*poisson_terms(self.y, self.area, self.log_area, self.lgam, eta))


class GaussianLikelihood:
    """Identity-link Gaussian observations; used as a conjugate check of the Laplace machinery."""

    def __init__(self, y, prec: float):
        self.y = np.asarray(y, dtype=float)
        self.prec = float(prec)

    def __call__(self, eta) -> LikelihoodEval:
        r = self.y - eta
        value = float(np.sum(-0.5 * self.prec * r * r) + 0.5 * r.size * (math.log(self.prec) - LOG_2PI))
        return LikelihoodEval(value, self.prec * r, np.full(r.size, self.prec))


@dataclass(frozen=True)
class ModelSpec:
    counts: CountGrid
    covariates: CovariateStack
    prec: ScaledPrecision
    prec_prior: PcPrecPrior
    mix_prior: PcMixPrior
    beta_prec: float = 1e-3
    rsr: bool = False
    family: str = "poisson"
    gaussian_obs: np.ndarray | None = None
    gaussian_prec: float = 1.0

    def __post_init__(self):
        n = self.counts.n
        if self.covariates.n != n and self.covariates.p > 0:
            raise DataError(f"covariates have {self.covariates.n} cells, counts have {n}")
        if self.prec.n != n:
            raise DataError(f"structured field has {self.prec.n} cells, counts have {n}")
        w = self.counts.window
        if (w.nrow, w.ncol) != (self.prec.nrow, self.prec.ncol):
            raise DataError("lattice dimensions of counts and structured field differ")
        if not self.beta_prec > 0:
            raise DataError("beta_prec must be positive")
        if self.family not in ("poisson", "gaussian"):
            raise DataError(f"unknown family {self.family!r}")
        if self.family == "gaussian" and self.gaussian_obs is None:
            raise DataError("gaussian family needs gaussian_obs")

    @property
    def n(self) -> int:
        return self.counts.n

    @property
    def p(self) -> int:
        return self.covariates.p

    @property
    def p1(self) -> int:
        return self.p + 1

    @property
    def dim(self) -> int:
        return self.p1 + 2 * self.n

    @cached_property
    def design(self) -> np.ndarray:
        """Fixed-effect design with a leading intercept column."""
        Z = self.covariates.values if self.p else np.zeros((self.n, 0))
        return np.column_stack([np.ones(self.n), Z])

    @property
    def beta_names(self) -> tuple[str, ...]:
        return ("(Intercept)", *self.covariates.names)

    @cached_property
    def likelihood(self):
        if self.family == "gaussian":
            return GaussianLikelihood(self.gaussian_obs, self.gaussian_prec)
        return PoissonLikelihood(self.counts)

    def replace(self, **kw) -> "ModelSpec":
        fields = {f: getattr(self, f) for f in self.__dataclass_fields__}
        fields.update(kw)
        return ModelSpec(**fields)


def linear_predictor(state: LatentState, hyper: Hyperparameters, spec: ModelSpec) -> np.ndarray:
    n = spec.n
    if state.u_star.shape != (n,) or state.v.shape != (n,) or np.shape(state.beta) != (spec.p,):
        raise DataError("latent state dimensions do not match the model")
    a, b = hyper.weights
    fixed = state.beta0 + spec.design[:, 1:] @ np.asarray(state.beta, float)
    return fixed + a * state.u_star + b * state.v


def log_likelihood(eta, counts: CountGrid) -> LikelihoodEval:
    """Poisson cell log-likelihood with its gradient and curvature in eta."""
    return PoissonLikelihood(counts)(eta)


# ---------------------------------------------------------------------------
# constraints and the constrained Gaussian prior of the latent vector


def constraint_matrix(spec: ModelSpec, hyper: Hyperparameters) -> np.ndarray:
    """Rows of the linear constraints A x = 0 on the latent vector."""
    n, p1 = spec.n, spec.p1
    rows = []
    for c in spec.prec.constraints:
        r = np.zeros(spec.dim)
        r[p1 : p1 + n] = c
        rows.append(r)
    if spec.rsr:
        rows.extend(rsr_projection(spec, hyper).rows)
    return np.vstack(rows)


class RsrProjection:
    """Orthogonality of the random component a u* + b v to the fixed-effect span."""

    def __init__(self, spec: ModelSpec, hyper: Hyperparameters):
        X = spec.design
        if np.linalg.matrix_rank(X) < X.shape[1]:
            raise DataError("restricted spatial regression needs a full-rank design")
        a, b = hyper.weights
        if a == 0 and b == 0:
            raise DataError("restricted spatial regression needs a finite tau")
        n, p1 = spec.n, spec.p1
        self.design = X
        self.a, self.b = a, b
        self.rows = np.zeros((X.shape[1], spec.dim))
        self.rows[:, p1 : p1 + n] = a * X.T
        self.rows[:, p1 + n :] = b * X.T

    def __call__(self, u, v):
        """Euclidean projection of (u, v) onto the constraint set."""
        X, a, b = self.design, self.a, self.b
        psi = a * u + b * v
        coef = np.linalg.solve(X.T @ X, X.T @ psi) / (a * a + b * b)
        return u - a * (X @ coef), v - b * (X @ coef)


def rsr_projection(spec: ModelSpec, hyper: Hyperparameters) -> RsrProjection:
    return RsrProjection(spec, hyper)


def project_state(x, A) -> np.ndarray:
    """Euclidean projection of x onto {A x = 0}."""
    x = np.asarray(x, dtype=float)
    return x - A.T @ np.linalg.solve(A @ A.T, A @ x)


def prior_precision_apply(spec: ModelSpec, x) -> np.ndarray:
    """Sparse prior precision blockdiag(beta_prec I, R*, I) applied to x (without the KAPPA term)."""
    n, p1 = spec.n, spec.p1
    out = np.empty_like(x)
    out[:p1] = spec.beta_prec * x[:p1]
    out[p1 : p1 + n] = spec.prec.entries @ x[p1 : p1 + n]
    out[p1 + n :] = x[p1 + n :]
    return out


def prior_cov_apply(spec: ModelSpec, M) -> np.ndarray:
    """Covariance of the KAPPA-regularised latent prior applied to the columns of M (dim x k)."""
    n, p1 = spec.n, spec.p1
    M = np.asarray(M, dtype=float)
    out = np.empty_like(M)
    out[:p1] = M[:p1] / spec.beta_prec
    Mu = M[p1 : p1 + n]
    out[p1 : p1 + n] = spec.prec.pinv_apply(Mu.T).T + np.outer(np.ones(n), Mu.sum(axis=0)) / (n * KAPPA)
    out[p1 + n :] = M[p1 + n :]
    return out


def _logdet_spd(M) -> float:
    sign, ld = np.linalg.slogdet(np.atleast_2d(M))
    if sign <= 0:
        raise NumericalError("expected a positive definite matrix")
    return float(ld)


def latent_log_prior(x, spec: ModelSpec, A) -> float:
    """Log density of the Gaussian latent prior restricted to {A x = 0}.

    Dropped: the -1/2 log|A A^T| surface-measure term, which cancels against the
    same term of the Gaussian approximation in the Laplace evidence.  It is added
    back here so that the value is the density in orthonormal coordinates of the
    constraint set.
    """
    n, p1, N = spec.n, spec.p1, spec.dim
    k = A.shape[0]
    quad = float(x @ prior_precision_apply(spec, x))
    u = x[p1 : p1 + n]
    quad += KAPPA * u.sum() ** 2 / n
    logdet_q = p1 * math.log(spec.beta_prec) + spec.prec.logdet_plus + spec.prec.rank_deficiency * math.log(KAPPA)
    val = -0.5 * N * LOG_2PI + 0.5 * logdet_q - 0.5 * quad
    S = A @ prior_cov_apply(spec, A.T)
    val += 0.5 * k * LOG_2PI + 0.5 * _logdet_spd(S) - 0.5 * _logdet_spd(A @ A.T)
    return val


def hyper_log_prior(hyper: Hyperparameters, spec: ModelSpec) -> float:
    """Log prior density of (log tau, logit phi)."""
    theta = hyper.internal
    return float(spec.prec_prior.log_density_log_tau(theta[0]) + spec.mix_prior.log_density_logit(theta[1]))


def latent_design_apply(spec: ModelSpec, hyper: Hyperparameters, x) -> np.ndarray:
    """eta = L x for the latent vector (or columns of a matrix)."""
    n, p1 = spec.n, spec.p1
    a, b = hyper.weights
    return spec.design @ x[:p1] + a * x[p1 : p1 + n] + b * x[p1 + n :]


def latent_design_rapply(spec: ModelSpec, hyper: Hyperparameters, r) -> np.ndarray:
    """L^T r."""
    a, b = hyper.weights
    return np.concatenate([spec.design.T @ r, a * r, b * r])


def log_posterior(state: LatentState, hyper: Hyperparameters, spec: ModelSpec, include_hyper: bool = True):
    """Unnormalised log posterior and its gradient in the latent vector.

    Terms: likelihood, constrained Gaussian prior of the latent vector, and (when
    ``include_hyper``) the priors of log tau and logit phi.
    """
    x = state.to_vector()
    eta = latent_design_apply(spec, hyper, x)
    ll = spec.likelihood(eta)
    A = constraint_matrix(spec, hyper)
    n, p1 = spec.n, spec.p1
    value = ll.value + latent_log_prior(x, spec, A)
    # the KAPPA term vanishes on the constraint set; keep the value off it as R*-energy only
    u = x[p1 : p1 + n]
    value += 0.5 * KAPPA * u.sum() ** 2 / n
    if include_hyper:
        value += hyper_log_prior(hyper, spec)
    grad = latent_design_rapply(spec, hyper, ll.grad) - prior_precision_apply(spec, x)
    return float(value), grad


# ---------------------------------------------------------------------------
# simulation


def simulate(spec: ModelSpec, hyper: Hyperparameters, beta_true, seed: int):
    """Draw latent fields and Poisson cell counts from the model.

    ``beta_true`` holds the intercept followed by the covariate coefficients.
    """
    beta_true = np.asarray(beta_true, dtype=float)
    if beta_true.shape != (spec.p1,):
        raise DataError(f"beta_true needs {spec.p1} entries (intercept first)")
    rng = np.random.default_rng(seed)
    u = spec.prec.sample(rng)
    v = rng.standard_normal(spec.n)
    state = LatentState(float(beta_true[0]), beta_true[1:].copy(), u, v)
    eta = linear_predictor(state, hyper, spec)
    if eta.max() > ETA_MAX:
        raise NumericalError("simulated log-intensity out of range")
    y = rng.poisson(spec.counts.areas * np.exp(eta))
    grid = CountGrid(y, spec.counts.areas, spec.counts.window)
    return grid, state


def scatter_points(counts: CountGrid, seed: int, label: str = "simulated") -> PointPattern:
    """Place each cell's count uniformly at random inside the cell."""
    rng = np.random.default_rng(seed)
    w = counts.window
    dx = (w.xmax - w.xmin) / w.ncol
    dy = (w.ymax - w.ymin) / w.nrow
    cells = np.repeat(np.arange(w.n), counts.counts)
    row, col = np.divmod(cells, w.ncol)
    x = w.xmin + dx * (col + rng.random(cells.size))
    y = w.ymin + dy * (row + rng.random(cells.size))
    return PointPattern(np.column_stack([x, y]), label)

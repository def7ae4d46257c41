"""Penalised-complexity priors for the marginal precision and the mixing weight."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import expit, logit

from .errors import DataError, NumericalError
from .igmrf import NULL_TOL, ScaledPrecision

# Rule of thumb for the marginal sd of w ~ N(0, 1/tau) with tau integrated out,
# as a fraction of U_sigma: sqrt(E[sigma^2]) = sqrt(2) / lambda = sqrt(2) U / ln(100)
# when alpha = 0.01.
SIGMA_RULE_OF_THUMB = 0.31


@dataclass(frozen=True)
class DistanceMeasure:
    kld: float
    d: float


@dataclass(frozen=True)
class PcPrecPrior:
    """Exponential prior with rate ``lam`` on sigma = tau^(-1/2) (type-2 Gumbel on tau)."""

    U_sigma: float
    alpha_sigma: float
    lam: float

    def log_density_tau(self, tau):
        tau = np.asarray(tau, dtype=float)
        return np.log(self.lam / 2.0) - 1.5 * np.log(tau) - self.lam / np.sqrt(tau)

    def density_tau(self, tau):
        return np.exp(self.log_density_tau(tau))

    def log_density_log_tau(self, log_tau):
        """Density of log(tau), including the Jacobian."""
        log_tau = np.asarray(log_tau, dtype=float)
        return np.log(self.lam / 2.0) - 0.5 * log_tau - self.lam * np.exp(-0.5 * log_tau)

    def density_sigma(self, sigma):
        sigma = np.asarray(sigma, dtype=float)
        return np.where(sigma >= 0, self.lam * np.exp(-self.lam * np.maximum(sigma, 0.0)), 0.0)

    def quantile_sigma(self, q):
        return -np.log1p(-np.asarray(q, dtype=float)) / self.lam


def pc_prec_prior(U_sigma: float = 1.0, alpha_sigma: float = 0.01) -> PcPrecPrior:
    if not U_sigma > 0:
        raise DataError(f"U_sigma must be positive, got {U_sigma}")
    if not 0 < alpha_sigma < 1:
        raise DataError(f"alpha_sigma must lie in (0, 1), got {alpha_sigma}")
    return PcPrecPrior(float(U_sigma), float(alpha_sigma), -math.log(alpha_sigma) / U_sigma)


def prec_prior_mass_above(prior: PcPrecPrior, u: float) -> float:
    """P(sigma > u)."""
    if not u > 0:
        raise DataError("u must be positive")
    return math.exp(-prior.lam * u)


def expected_sigma_fraction(prior: PcPrecPrior) -> float:
    """E[sigma] / U_sigma = 1 / (-ln alpha_sigma)."""
    return 1.0 / (prior.lam * prior.U_sigma)


def marginal_sd_fraction(prior: PcPrecPrior) -> float:
    """sd of w ~ N(0, 1/tau) with tau integrated out, over U_sigma: sqrt(2) / (-ln alpha_sigma).

    Equals 0.307 for alpha_sigma = 0.01, the source of the usual ``0.31 U`` rule.
    """
    return math.sqrt(2.0) / (prior.lam * prior.U_sigma)


# ---------------------------------------------------------------------------
# mixing parameter


def _dist_sq(phi, gam, mult):
    phi = np.asarray(phi, dtype=float)
    x = np.multiply.outer(phi, gam - 1.0)
    return mult * np.sum(x - np.log1p(x), axis=-1)


def phi_distance(phi, prec: ScaledPrecision, method: str = "exact"):
    """Distance from N(0, phi R^- + (1 - phi) I) to N(0, I) over the non-null eigenspace.

    Accepts a scalar or an array of phi values in [0, 1].
    """
    phi_arr = np.asarray(phi, dtype=float)
    if np.any((phi_arr < 0) | (phi_arr > 1)):
        raise DataError("phi must lie in [0, 1]")
    gam, mult = prec.inverse_spectrum(method)
    d2 = _dist_sq(phi_arr, gam, mult)
    scale = max(1.0, float(np.max(np.abs(d2))))
    if np.any(d2 < -1e-10 * scale):
        raise NumericalError(f"negative squared distance {d2.min():.3g}")
    if np.any(d2 < 0):
        warnings.warn("squared distance clamped at zero", RuntimeWarning, stacklevel=2)
    d = np.sqrt(np.maximum(d2, 0.0))
    return float(d) if d.ndim == 0 else d


def _truncexp_cdf(theta, d, d1):
    return math.expm1(-theta * d) / math.expm1(-theta * d1)


def _solve_rate(dU: float, d1: float, alpha: float) -> float:
    """Rate of the exponential on d, truncated to [0, d1], with P(d < dU) = alpha (bisection)."""
    f = lambda t: _truncexp_cdf(t, dU, d1) - alpha
    lo, hi = 1e-12 / d1, 1.0 / d1
    if f(lo) >= 0:
        raise NumericalError("rate bisection is not bracketed at the lower end")
    while f(hi) < 0:
        hi *= 2.0
        if hi > 1e12:
            raise NumericalError("rate bisection is not bracketed at the upper end")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * hi:
            break
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class PcMixPrior:
    U_phi: float
    alpha_phi: float
    theta: float
    d_table: np.ndarray  # (m, 2): phi, d(phi)
    logit_density_table: np.ndarray  # (m, 2): logit(phi), density
    d1: float
    method: str

    @property
    def logit_knots(self) -> np.ndarray:
        return self.logit_density_table[:, 0]

    @property
    def log_density_knots(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.logit_density_table[:, 1])

    def log_density_logit(self, l):
        """Log density of logit(phi), linear interpolation in the log density with linear extrapolation."""
        x = self.logit_knots
        y = self.log_density_knots
        l = np.asarray(l, dtype=float)
        out = np.interp(l, x, y)
        lo_slope = (y[1] - y[0]) / (x[1] - x[0])
        hi_slope = (y[-1] - y[-2]) / (x[-1] - x[-2])
        out = np.where(l < x[0], y[0] + lo_slope * (l - x[0]), out)
        out = np.where(l > x[-1], y[-1] + hi_slope * (l - x[-1]), out)
        return float(out) if out.ndim == 0 else out

    def cdf(self, phi) -> float:
        """P(phi' < phi) by trapezoid quadrature of the logit-density table."""
        l, dens = self.logit_density_table.T
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(l))])
        return float(np.interp(logit(phi), l, cum))

    def exact_cdf(self, phi) -> float:
        """P(phi' < phi) from the truncated exponential on d (uses the tabulated d)."""
        d = np.interp(phi, self.d_table[:, 0], self.d_table[:, 1])
        return _truncexp_cdf(self.theta, float(d), self.d1)

    def density_phi(self, phi):
        phi = np.asarray(phi, dtype=float)
        return np.exp(self.log_density_logit(logit(phi))) / (phi * (1.0 - phi))


def min_alpha_phi(U_phi: float, prec: ScaledPrecision, method: str = "exact") -> float:
    d = phi_distance(np.array([U_phi, 1.0]), prec, method)
    return float(d[0] / d[1])


def pc_mix_prior(
    U_phi: float = 0.5,
    alpha_phi: float | None = None,
    prec: ScaledPrecision | None = None,
    grid_size: int = 512,
    method: str = "exact",
    logit_range: float = 30.0,
) -> PcMixPrior:
    """PC prior for the mixing weight, tabulated on a logit-spaced grid.

    ``alpha_phi=None`` picks a value just above the smallest feasible one,
    ``d(U_phi) / d(1)``.
    """
    if prec is None:
        raise DataError("pc_mix_prior needs the scaled precision of the structured field")
    if not 0 < U_phi < 1:
        raise DataError(f"U_phi must lie in (0, 1), got {U_phi}")
    if grid_size < 64:
        raise DataError("grid_size must be at least 64")
    amin = min_alpha_phi(U_phi, prec, method)
    if alpha_phi is None:
        alpha_phi = amin + 0.01 * (1.0 - amin)
    if not (amin < alpha_phi < 1):
        raise DataError(f"infeasible alpha_phi={alpha_phi}: must exceed d(U_phi)/d(1) = {amin:.6f} and be below 1")

    l = np.linspace(-logit_range, logit_range, grid_size)
    phi = expit(l)
    d = phi_distance(phi, prec, method)
    d1 = float(phi_distance(1.0, prec, method))
    dU = float(phi_distance(U_phi, prec, method))
    theta = _solve_rate(dU, d1, alpha_phi)

    dd_dl = np.gradient(d, l)
    dens = theta * np.exp(-theta * d) / (-math.expm1(-theta * d1)) * dd_dl
    dens = np.maximum(dens, 0.0)
    dens /= trapezoid(dens, l)

    phi_knots = np.concatenate([[0.0], phi, [1.0]])
    d_knots = np.concatenate([[0.0], d, [d1]])
    return PcMixPrior(
        U_phi=float(U_phi),
        alpha_phi=float(alpha_phi),
        theta=float(theta),
        d_table=np.column_stack([phi_knots, d_knots]),
        logit_density_table=np.column_stack([l, dens]),
        d1=d1,
        method=method,
    )


# ---------------------------------------------------------------------------
# generic Gaussian KLD


def _support(cov: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (cov + cov.T))
    keep = w > NULL_TOL * max(w.max(), 0.0)
    return V[:, keep]


def kld_gaussian(cov1, cov0) -> DistanceMeasure:
    """KLD(N(0, cov1) || N(0, cov0)) on the common non-null subspace, with d = sqrt(2 KLD)."""
    cov1 = np.atleast_2d(np.asarray(cov1, dtype=float))
    cov0 = np.atleast_2d(np.asarray(cov0, dtype=float))
    if cov1.shape != cov0.shape:
        raise DataError("covariances must have the same shape")
    B0 = _support(cov0)
    B1 = _support(cov1)
    if B0.shape[1] != B1.shape[1] or not np.allclose(B0 @ (B0.T @ B1), B1, atol=1e-8):
        raise DataError("covariances do not share a common support")
    c1 = B0.T @ cov1 @ B0
    c0 = B0.T @ cov0 @ B0
    k = c0.shape[0]
    L0 = np.linalg.cholesky(c0)
    M = np.linalg.solve(L0, np.linalg.solve(L0, c1).T)
    _, ld1 = np.linalg.slogdet(c1)
    _, ld0 = np.linalg.slogdet(c0)
    kld = 0.5 * (np.trace(M) - k + ld0 - ld1)
    kld = max(kld, 0.0)
    return DistanceMeasure(float(kld), float(math.sqrt(2.0 * kld)))

"""Metropolis-within-Gibbs sampler used as an independent check of the grid/Laplace posterior.

Desk-scale only (at most 100 cells): the latent block is handled with dense
matrices in whitened coordinates of the constraint subspace.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky, null_space, solve_triangular
from scipy.special import expit, gammaln

from .errors import DataError, NumericalError
from .inference import FitOptions, find_hyper_mode, laplace_fit
from .kernels import mcmc_block
from .model import Hyperparameters, ModelSpec, constraint_matrix

MAX_CELLS = 100
LATENT_TARGET = 0.574
HYPER_TARGET = 0.30


@dataclass
class McmcResult:
    theta: np.ndarray  # (S, 2): log tau, logit phi
    beta: np.ndarray  # (S, p + 1)
    names: tuple
    accept_latent: float
    accept_hyper: float
    accept_centred: float
    step_latent: float
    step_hyper: float
    ess: dict

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(-0.5 * self.theta[:, 0])

    @property
    def phi(self) -> np.ndarray:
        return expit(self.theta[:, 1])

    def beta_mean(self) -> np.ndarray:
        return self.beta.mean(axis=0)


def effective_sample_size(x) -> float:
    """ESS from FFT autocorrelations truncated by Geyer's initial positive sequence."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 4 or np.var(x) == 0:
        return float(n)
    xc = x - x.mean()
    f = np.fft.rfft(xc, 2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n]
    acf /= acf[0]
    tau = -1.0
    for k in range(0, n - 1, 2):
        pair = acf[k] + acf[k + 1]
        if pair <= 0:
            break
        tau += 2.0 * pair
    return float(n / max(tau, 1e-12))


def _dense_parts(spec: ModelSpec):
    n, p1 = spec.n, spec.p1
    Q = np.zeros((spec.dim, spec.dim))
    Q[:p1, :p1] = spec.beta_prec * np.eye(p1)
    Q[p1 : p1 + n, p1 : p1 + n] = spec.prec.entries.toarray()
    Q[p1 + n :, p1 + n :] = np.eye(n)
    return Q


def _reference(spec: ModelSpec, include_data: bool, theta_ref):
    """Reference hyperparameters, latent Hessian and theta covariance for preconditioning."""
    Q = _dense_parts(spec)
    if not include_data:
        theta = np.zeros(2) if theta_ref is None else np.asarray(theta_ref, float)
        return theta, Q, np.diag([4.0, 4.0]), np.zeros(spec.dim)
    if theta_ref is None:
        theta, H, _, _ = find_hyper_mode(spec, FitOptions())
    else:
        theta = np.asarray(theta_ref, float)
        H = None
    res = laplace_fit(spec, Hyperparameters.from_internal(theta))
    Hlat = res.gaussian_precision.dense()
    if H is None:
        cov = np.eye(2)
    else:
        ev, V = np.linalg.eigh(H)
        cov = (V / np.maximum(ev, 0.05)) @ V.T
    return theta, Hlat, cov, res.x


def mcmc_oracle(
    spec: ModelSpec,
    iterations: int,
    seed: int,
    burn_in: int | None = None,
    thin: int = 1,
    include_data: bool = True,
    theta_ref=None,
    chains: int = 1,
    workers: int = 1,
    step_latent: float | None = None,
) -> McmcResult:
    """Posterior samples of (log tau, logit phi) and the fixed effects.

    Preconditioned MALA moves the latent field inside the constraint subspace;
    a random walk moves theta given the latent field (whose prior does not depend
    on theta).  Step sizes adapt during burn-in only; ``step_latent`` overrides
    the initial MALA step.
    """
    if spec.n > MAX_CELLS:
        raise DataError(f"the MCMC oracle is limited to {MAX_CELLS} cells")
    if spec.rsr:
        raise DataError("the MCMC oracle does not support restricted spatial regression")
    if spec.family != "poisson":
        raise DataError("the MCMC oracle supports the Poisson family only")
    if iterations < 1 or thin < 1:
        raise DataError("iterations and thin must be positive")
    burn_in = iterations // 5 if burn_in is None else burn_in

    theta0, Href, theta_cov, x0 = _reference(spec, include_data, theta_ref)

    A = constraint_matrix(spec, Hyperparameters.from_internal(theta0))
    B = null_space(A)
    C = cholesky(B.T @ Href @ B, lower=True)
    T = solve_triangular(C, B.T, lower=True).T  # x = T w, T = B C^{-T}
    n, p1 = spec.n, spec.p1
    X = spec.design
    F0 = np.ascontiguousarray(X @ T[:p1])
    Fu = np.ascontiguousarray(T[p1 : p1 + n])
    Fv = np.ascontiguousarray(T[p1 + n :])
    P = np.ascontiguousarray(T.T @ _dense_parts(spec) @ T)
    Tb = np.ascontiguousarray(T[:p1])
    Tinv = C.T @ B.T  # w = Tinv x on the constraint subspace
    w0 = Tinv @ x0
    nu_free = n - int(np.sum(np.any(A[:, p1 : p1 + n] != 0, axis=1)))
    theta_chol = np.linalg.cholesky(theta_cov)

    cg = spec.counts
    y = cg.counts.astype(float)
    static = dict(
        F0=F0, Fu=Fu, Fv=Fv, P=P, Tb=Tb, y=y, area=cg.areas, log_area=np.log(cg.areas), lgam=gammaln(y + 1.0),
        include_data=int(include_data),
    )
    centred = (
        np.ascontiguousarray(Tinv[:, :p1]), np.ascontiguousarray(Tinv[:, p1 : p1 + n]),
        np.ascontiguousarray(Tinv[:, p1 + n :]), float(nu_free),
    )
    mp = spec.mix_prior
    knots = np.ascontiguousarray(mp.logit_knots)
    logdens = np.ascontiguousarray(mp.log_density_knots)
    slopes = ((logdens[1] - logdens[0]) / (knots[1] - knots[0]), (logdens[-1] - logdens[-2]) / (knots[-1] - knots[-2]))
    prior_args = (spec.prec_prior.lam, knots, logdens, slopes[0], slopes[1], *centred)

    seeds = np.random.SeedSequence(seed).spawn(chains)

    def run_chain(ss):
        return _run_chain(np.random.default_rng(ss), w0, theta0, static, prior_args, theta_chol,
                          iterations, burn_in, thin, m=T.shape[1], p1=p1, eps=step_latent)

    if workers > 1 and chains > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            outs = list(ex.map(run_chain, seeds))
    else:
        outs = [run_chain(ss) for ss in seeds]

    theta = np.vstack([o[0] for o in outs])
    beta = np.vstack([o[1] for o in outs])
    acc_lat = float(np.mean([o[2] for o in outs]))
    acc_hyp = float(np.mean([o[3] for o in outs]))
    acc_cen = float(np.mean([o[6] for o in outs]))
    checks = [("latent", acc_lat), ("hyperparameter", acc_hyp)]
    if include_data:  # without data the centred move is redundant and its rate uninformative
        checks.append(("centred", acc_cen))
    for label, rate in checks:
        if not 0.1 <= rate <= 0.9:
            warnings.warn(f"{label} acceptance rate {rate:.3f} outside [0.1, 0.9]", RuntimeWarning, stacklevel=2)
    ess = {"log_tau": sum(effective_sample_size(o[0][:, 0]) for o in outs),
           "logit_phi": sum(effective_sample_size(o[0][:, 1]) for o in outs)}
    for j, name in enumerate(spec.beta_names):
        ess[name] = sum(effective_sample_size(o[1][:, j]) for o in outs)
    return McmcResult(theta, beta, spec.beta_names, acc_lat, acc_hyp, acc_cen, outs[0][4], outs[0][5], ess)


def _run_chain(rng, w0, theta0, static, prior_args, theta_chol, iterations, burn_in, thin, m, p1, eps=None):
    w = np.array(w0, dtype=float)
    theta = np.array(theta0, dtype=float)
    eps = 1.0 / m ** (1.0 / 6.0) if eps is None else float(eps)
    eps_theta = 2.38 / math.sqrt(2.0)
    s = static
    common = (s["F0"], s["Fu"], s["Fv"], s["P"], s["Tb"], s["y"], s["area"], s["log_area"], s["lgam"],
              s["include_data"], *prior_args)
    dummy_t = np.zeros((0, 2))
    dummy_b = np.zeros((0, p1))

    # burn-in: Robbins-Monro adaptation of the step sizes on the log scale
    block = 100
    done, k = 0, 0
    while done < burn_in:
        nb = min(block, burn_in - done)
        w, al, ah, ac, _ = mcmc_block(w, theta, *common, eps, eps_theta, theta_chol,
                                      *_draws(rng, nb, m), 0, dummy_t, dummy_b, 0)
        k += 1
        gain = 1.0 / math.sqrt(k)
        eps *= math.exp(gain * (al / nb - LATENT_TARGET))
        eps_theta *= math.exp(gain * ((ah + ac) / (2 * nb) - HYPER_TARGET))
        done += nb

    nkeep = iterations // thin
    out_t = np.zeros((nkeep, 2))
    out_b = np.zeros((nkeep, p1))
    acc = np.zeros(3)
    done, row = 0, 0
    chunk = max(thin, (20000 // thin) * thin)
    while done < iterations:
        nb = min(chunk, iterations - done)
        w, al, ah, ac, row = mcmc_block(w, theta, *common, eps, eps_theta, theta_chol,
                                        *_draws(rng, nb, m), thin, out_t, out_b, row)
        acc += (al, ah, ac)
        done += nb
    if row != nkeep:
        raise NumericalError("sample buffer was not filled")
    acc /= iterations
    return out_t, out_b, acc[0], acc[1], eps, eps_theta, acc[2]


def _draws(rng, nb, m):
    z_lat = rng.standard_normal((nb, m))
    u_lat = 1.0 - rng.random(nb)
    z_hyp = rng.standard_normal((nb, 2))
    u_hyp = 1.0 - rng.random(nb)
    z_cen = rng.standard_normal((nb, 2))
    u_cen = 1.0 - rng.random(nb)
    return z_lat, u_lat, z_hyp, u_hyp, z_cen, u_cen

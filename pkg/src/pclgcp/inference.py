"""Posterior computation over a (log tau, logit phi) grid with Gaussian latent approximations."""

from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.optimize import brentq, minimize
from scipy.special import expit, gammaln
from scipy.stats import norm

from .errors import DataError, NumericalError
from .lattice import CountGrid, CovariateStack
from .linalg import LOG_2PI, ConstrainedSystem, LatentSystem, logdet_spd
from .model import (
    Hyperparameters,
    LatentState,
    ModelSpec,
    constraint_matrix,
    hyper_log_prior,
    latent_design_apply,
    latent_design_rapply,
    latent_log_prior,
    prior_precision_apply,
    project_state,
)

# ---------------------------------------------------------------------------
# Laplace approximation at fixed hyperparameters


@dataclass
class LaplaceResult:
    hyper: Hyperparameters
    mode: LatentState
    x: np.ndarray
    system: ConstrainedSystem
    log_marginal: float
    log_joint: float
    log_lik: float
    iterations: int

    @property
    def gaussian_precision(self) -> LatentSystem:
        return self.system.system


def _initial_latent(spec: ModelSpec) -> np.ndarray:
    x = np.zeros(spec.dim)
    if spec.family == "poisson":
        tot = spec.counts.total
        x[0] = math.log(max(tot, 0.5) / spec.counts.areas.sum())
    else:
        x[0] = float(np.mean(spec.gaussian_obs))
    return x


def _objective(spec, hyper, x):
    eta = latent_design_apply(spec, hyper, x)
    ll = spec.likelihood(eta)
    qx = prior_precision_apply(spec, x)
    val = ll.value - 0.5 * float(x @ qx)
    grad = latent_design_rapply(spec, hyper, ll.grad) - qx
    return val, grad, ll


def laplace_fit(
    spec: ModelSpec,
    hyper: Hyperparameters,
    x0=None,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> LaplaceResult:
    """Gaussian approximation of the latent field at fixed hyperparameters.

    Constrained Newton iterations (each step conditioned on ``A x = 0``) with
    step halving.  ``log_marginal`` is the Laplace estimate of ``log p(y | theta)``.
    """
    A = constraint_matrix(spec, hyper)
    AAt = A @ A.T
    x = project_state(_initial_latent(spec) if x0 is None else np.asarray(x0, float), A)
    try:
        val, g, ll = _objective(spec, hyper, x)
    except NumericalError:
        x = project_state(_initial_latent(spec), A)
        val, g, ll = _objective(spec, hyper, x)

    it = 0
    for it in range(1, max_iter + 1):
        cs = ConstrainedSystem(LatentSystem(spec, hyper, ll.curv), A)
        gp = g - A.T @ np.linalg.solve(AAt, A @ g)
        if np.max(np.abs(gp)) < tol * (1.0 + abs(val)):
            break
        d = cs.solve(g)
        step, accepted = 1.0, False
        for _ in range(40):
            xn = x + step * d
            try:
                vn, gn, lln = _objective(spec, hyper, xn)
            except NumericalError:
                step *= 0.5
                continue
            if vn >= val - 1e-12 * (1.0 + abs(val)):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            raise NumericalError(f"line search failed at theta={hyper.internal.tolist()}")
        decrement = vn - val
        x, val, g, ll = xn, vn, gn, lln
        if step == 1.0 and 0 <= decrement < 1e-13 * (1.0 + abs(val)):
            cs = ConstrainedSystem(LatentSystem(spec, hyper, ll.curv), A)
            break
    else:
        raise NumericalError(f"Newton iterations did not converge in {max_iter} steps")

    k = A.shape[0]
    N = spec.dim
    log_post_gauss = -0.5 * N * LOG_2PI + 0.5 * cs.system.logdet + 0.5 * k * LOG_2PI + 0.5 * cs.logdet_C
    log_post_gauss -= 0.5 * logdet_spd(AAt)
    log_marginal = ll.value + latent_log_prior(x, spec, A) - log_post_gauss
    log_joint = log_marginal + hyper_log_prior(hyper, spec)
    mode = LatentState.from_vector(x, spec.p, spec.n)
    return LaplaceResult(hyper, mode, x, cs, float(log_marginal), float(log_joint), float(ll.value), it)


# ---------------------------------------------------------------------------
# hyperparameter grid


@dataclass
class HyperGrid:
    nodes: np.ndarray  # (m, 2) internal coordinates
    z: np.ndarray  # (m, 2) standardised coordinates
    quad_weights: np.ndarray
    log_joint: np.ndarray
    normalized_weights: np.ndarray
    boundary: np.ndarray  # bool mask
    z_max: float

    @property
    def max_boundary_weight(self) -> float:
        w = self.normalized_weights[self.boundary]
        return float(w.max()) if w.size else 0.0


def _trapezoid_1d(m: int) -> np.ndarray:
    w = np.ones(m)
    w[0] = w[-1] = 0.5
    return w


def _fd_hessian(f, theta, h):
    f0 = f(theta)
    H = np.zeros((2, 2))
    e = np.eye(2) * h
    for i in range(2):
        H[i, i] = (f(theta + e[i]) - 2 * f0 + f(theta - e[i])) / h**2
    H[0, 1] = H[1, 0] = (
        f(theta + e[0] + e[1]) - f(theta + e[0] - e[1]) - f(theta - e[0] + e[1]) + f(theta - e[0] - e[1])
    ) / (4 * h**2)
    return H


def _weighted_quantile_mixture(means, sds, weights, q):
    cdf = lambda t: float(np.sum(weights * norm.cdf((t - means) / sds)))
    lo = float(np.min(means - 12 * sds))
    hi = float(np.max(means + 12 * sds))
    return brentq(lambda t: cdf(t) - q, lo, hi, xtol=1e-12)


def _kde_marginal(values, weights, transform, log_jac, ngrid: int = 401):
    """Weighted Gaussian KDE on the internal scale, shrunk to preserve the variance.

    ``transform`` maps internal values to the reported scale; ``log_jac`` is
    log |d internal / d reported| at a reported value.
    """
    w = weights / weights.sum()
    m = float(np.sum(w * values))
    s2 = float(np.sum(w * (values - m) ** 2))
    neff = 1.0 / float(np.sum(w**2))
    s = math.sqrt(max(s2, 1e-12))
    h = 1.06 * s * neff ** (-0.2)
    h = min(h, 0.9 * s)
    shrink = math.sqrt(max(1.0 - h * h / (s * s), 0.0))
    centres = m + (values - m) * shrink
    t = np.linspace(m - 6 * s, m + 6 * s, ngrid)
    dens = np.sum(w[:, None] * norm.pdf((t[None, :] - centres[:, None]) / h), axis=0) / h
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(t))])
    cdf /= cdf[-1]
    qs = {q: float(np.interp(q, cdf, t)) for q in (0.025, 0.5, 0.975)}
    r = transform(t)
    rdens = dens * np.exp(log_jac(r))
    order = np.argsort(r)
    return qs, np.column_stack([r[order], rdens[order]])


def _summary_on_scale(values, weights, transform, log_jac, decreasing: bool):
    qs, table = _kde_marginal(values, weights, transform, log_jac)
    vals = transform(values)
    mean = float(np.sum(weights * vals))
    sd = float(math.sqrt(max(np.sum(weights * (vals - mean) ** 2), 0.0)))
    lo, mid, hi = (transform(np.array(qs[q])) for q in (0.025, 0.5, 0.975))
    if decreasing:
        lo, hi = hi, lo
    return {
        "mean": mean,
        "sd": sd,
        "q025": float(lo),
        "q50": float(mid),
        "q975": float(hi),
        "table": table.tolist(),
    }


# ---------------------------------------------------------------------------
# results


@dataclass
class FitResult:
    beta_marginals: list
    sigma_marginal: dict
    phi_marginal: dict
    fields: dict
    dic: float
    p_d: float
    mean_deviance: float
    log_mlik: float
    hypergrid: dict
    diagnostics: dict
    config: dict = field(default_factory=dict)

    def beta(self, name: str) -> dict:
        for b in self.beta_marginals:
            if b["name"] == name:
                return b
        raise KeyError(name)

    @property
    def beta_names(self) -> list[str]:
        return [b["name"] for b in self.beta_marginals]

    def field(self, name: str) -> np.ndarray:
        return np.asarray(self.fields[name], dtype=float)

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False)

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    @classmethod
    def from_json(cls, text: str) -> "FitResult":
        return cls.from_dict(json.loads(text))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if not math.isfinite(v):
            return None
        return v
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# ---------------------------------------------------------------------------
# deviance


def _expected_deviance(spec: ModelSpec, mean, var) -> float:
    if spec.family == "gaussian":
        y, w = spec.gaussian_obs, spec.gaussian_prec
        return float(np.sum(w * ((y - mean) ** 2 + var) - np.log(w) + LOG_2PI))
    c = spec.counts
    y = c.counts.astype(float)
    return float(-2.0 * np.sum(y * (np.log(c.areas) + mean) - c.areas * np.exp(mean + 0.5 * var) - gammaln(y + 1.0)))


def dic(spec: ModelSpec, weights, eta_means, eta_vars):
    """DIC from a mixture of Gaussian approximations of eta.

    Returns (dic, p_d, mean deviance).
    """
    weights = np.asarray(weights, dtype=float)
    weights = weights / weights.sum()
    dbar = float(sum(w * _expected_deviance(spec, m, v) for w, m, v in zip(weights, eta_means, eta_vars)))
    eta_bar = np.tensordot(weights, np.asarray(eta_means), axes=1)
    dhat = _expected_deviance(spec, eta_bar, np.zeros_like(eta_bar))
    return 2.0 * dbar - dhat, dbar - dhat, dbar


# ---------------------------------------------------------------------------
# full fit


@dataclass
class FitOptions:
    grid_points: int = 9
    z_max: float = 3.0
    max_expansions: int = 3
    boundary_mass: float = 0.01
    expansion_factor: float = 1.5
    fd_step: float = 0.1
    newton_tol: float = 1e-8
    workers: int = 1
    theta_start: tuple = (0.0, 0.0)
    min_weight: float = 0.0
    mean_correction: bool = True


class _ModeSearch:
    """Log joint of theta with warm-started latent modes."""

    def __init__(self, spec: ModelSpec, tol: float):
        self.spec = spec
        self.tol = tol
        self.x = None
        self.cache: dict = {}
        self.evaluations = 0

    def result(self, theta) -> LaplaceResult | None:
        key = tuple(np.round(np.asarray(theta, float), 12))
        if key in self.cache:
            return self.cache[key]
        self.evaluations += 1
        hyper = Hyperparameters.from_internal(theta)
        try:
            res = laplace_fit(self.spec, hyper, self.x, tol=self.tol)
        except NumericalError:
            try:
                res = laplace_fit(self.spec, hyper, None, tol=self.tol)
            except NumericalError:
                res = None
        if res is not None:
            self.x = res.x
        self.cache[key] = res
        return res

    def __call__(self, theta) -> float:
        res = self.result(theta)
        return -np.inf if res is None else res.log_joint


def _skew_shift(res: LaplaceResult, spec: ModelSpec, var_eta) -> np.ndarray:
    """First-order mean shift of the latent vector from the cubic term of the log-likelihood.

    E[x] - x_hat ~ 1/2 Sigma L^T (f3 * var(eta)), with third derivative f3 = -mu for Poisson cells.
    """
    if spec.family != "poisson":
        return np.zeros(spec.dim)
    mu = spec.counts.areas * np.exp(latent_design_apply(spec, res.hyper, res.x))
    return res.system.solve(latent_design_rapply(spec, res.hyper, -0.5 * mu * var_eta))


def _node_summary(res: LaplaceResult, spec: ModelSpec, mean_correction: bool = True) -> dict:
    var_eta, var_u, var_v, cov_beta = res.system.variances()
    a, b = res.hyper.weights
    mode = res.mode
    fixed = spec.design[:, 1:] @ mode.beta
    beta_mode = np.concatenate([[mode.beta0], mode.beta])
    shift = _skew_shift(res, spec, var_eta)[: spec.p1] if mean_correction else 0.0
    return {
        "beta_mode": beta_mode,
        "beta_mean": beta_mode + shift,
        "beta_sd": np.sqrt(np.maximum(np.diag(cov_beta), 0.0)),
        "fixed": fixed,
        "structured": a * mode.u_star,
        "error": b * mode.v,
        "eta_mean": mode.beta0 + fixed + a * mode.u_star + b * mode.v,
        "eta_var": var_eta,
        "structured_var": a * a * var_u,
        "error_var": b * b * var_v,
    }


def _evaluate_grid(spec, theta_star, V, z_max, opts, x_start):
    m = opts.grid_points
    zs = np.linspace(-z_max, z_max, m)
    Z = np.array([(z1, z2) for z1 in zs for z2 in zs])
    qw = np.outer(_trapezoid_1d(m), _trapezoid_1d(m)).ravel()
    boundary = np.array([abs(z1) == z_max or abs(z2) == z_max for z1, z2 in Z])
    nodes = theta_star + Z @ V.T

    def run(theta):
        hyper = Hyperparameters.from_internal(theta)
        try:
            res = laplace_fit(spec, hyper, x_start, tol=opts.newton_tol)
        except NumericalError:
            try:
                res = laplace_fit(spec, hyper, None, tol=opts.newton_tol)
            except NumericalError:
                return None
        return res, _node_summary(res, spec, opts.mean_correction)

    if opts.workers > 1:
        with ThreadPoolExecutor(max_workers=opts.workers) as ex:
            out = list(ex.map(run, nodes))
    else:
        out = [run(t) for t in nodes]
    log_joint = np.array([-np.inf if o is None else o[0].log_joint for o in out])
    if not np.isfinite(log_joint).any():
        raise NumericalError("every hyper-grid node failed")
    lw = log_joint + np.log(qw)
    w = np.exp(lw - lw.max())
    w /= w.sum()
    grid = HyperGrid(nodes, Z, qw, log_joint, w, boundary, z_max)
    return grid, out


def find_hyper_mode(spec: ModelSpec, opts: FitOptions | None = None):
    """Mode of the hyperparameter log joint (Nelder-Mead) and the negative Hessian there."""
    opts = opts or FitOptions()
    search = _ModeSearch(spec, opts.newton_tol)
    neg = lambda t: -search(t) if np.isfinite(search(t)) else 1e300
    start = np.asarray(opts.theta_start, dtype=float)
    simplex = np.array([start, start + [1.0, 0.0], start + [0.0, 1.0]])
    opt = minimize(
        neg, start, method="Nelder-Mead",
        options={"xatol": 1e-4, "fatol": 1e-7, "initial_simplex": simplex, "maxiter": 400},
    )
    theta_star = np.asarray(opt.x, dtype=float)
    if not np.isfinite(search(theta_star)):
        raise NumericalError("hyperparameter mode search failed")
    H = -_fd_hessian(search, theta_star, opts.fd_step)
    if not np.all(np.isfinite(H)):
        raise NumericalError("non-finite curvature at the hyperparameter mode")
    return theta_star, 0.5 * (H + H.T), search, opt


def fit(spec: ModelSpec, options: FitOptions | None = None, **kw) -> FitResult:
    """Posterior summaries by Gaussian latent approximations integrated over a hyper-grid."""
    opts = replace(options or FitOptions(), **kw)

    theta_star, H, search, opt = find_hyper_mode(spec, opts)
    x_star = search.result(theta_star).x
    ev, evec = np.linalg.eigh(H)
    floor = max(1e-3, 1e-3 * float(ev.max(initial=0.0)))
    floored = bool(np.any(ev < floor))
    ev = np.maximum(ev, floor)
    V = evec * (1.0 / np.sqrt(ev))  # theta = theta* + V z

    z_max = opts.z_max
    expansions = 0
    while True:
        grid, out = _evaluate_grid(spec, theta_star, V, z_max, opts, x_star)
        if grid.max_boundary_weight <= opts.boundary_mass:
            break
        if expansions >= opts.max_expansions:
            raise NumericalError(
                f"hyper-grid boundary weight {grid.max_boundary_weight:.3g} after {expansions} expansions"
            )
        expansions += 1
        z_max *= opts.expansion_factor

    return _assemble(spec, grid, out, theta_star, H, V, opts, expansions, floored, search.evaluations, opt)


def _assemble(spec, grid, out, theta_star, H, V, opts, expansions, floored, n_search, opt) -> FitResult:
    keep = [i for i, o in enumerate(out) if o is not None and grid.normalized_weights[i] > opts.min_weight]
    w = grid.normalized_weights[keep]
    w = w / w.sum()
    summ = [out[i][1] for i in keep]
    nodes = grid.nodes[keep]

    def avg(key):
        return np.tensordot(w, np.array([s[key] for s in summ]), axes=1)

    bm = np.array([s["beta_mean"] for s in summ])
    bs = np.array([s["beta_sd"] for s in summ])
    beta_marginals = []
    for j, name in enumerate(spec.beta_names):
        mean = float(w @ bm[:, j])
        var = float(w @ (bs[:, j] ** 2 + bm[:, j] ** 2)) - mean**2
        sds = np.maximum(bs[:, j], 1e-300)
        beta_marginals.append(
            {
                "name": name,
                "mean": mean,
                "sd": math.sqrt(max(var, 0.0)),
                "q025": _weighted_quantile_mixture(bm[:, j], sds, w, 0.025),
                "q50": _weighted_quantile_mixture(bm[:, j], sds, w, 0.5),
                "q975": _weighted_quantile_mixture(bm[:, j], sds, w, 0.975),
            }
        )

    sigma = _summary_on_scale(
        nodes[:, 0], w, lambda t: np.exp(-0.5 * t), lambda s: np.log(2.0 / s), decreasing=True
    )
    phi = _summary_on_scale(
        nodes[:, 1], w, expit, lambda p: -np.log(p * (1.0 - p)), decreasing=False
    )

    eta_means = [s["eta_mean"] for s in summ]
    eta_vars = [s["eta_var"] for s in summ]
    eta_mean = avg("eta_mean")
    eta_var = np.maximum(avg("eta_var") + avg_sq(w, eta_means) - eta_mean**2, 0.0)
    intensity = np.tensordot(w, np.exp(np.array(eta_means) + 0.5 * np.array(eta_vars)), axes=1)
    d, p_d, dbar = dic(spec, w, eta_means, eta_vars)

    intercept = float(w @ np.array([s["beta_mode"][0] for s in summ]))
    fields = {
        "intercept": intercept,
        "fixed": avg("fixed"),
        "structured": avg("structured"),
        "error": avg("error"),
        "eta": eta_mean,
        "eta_sd": np.sqrt(eta_var),
        "intensity": intensity,
        "structured_sd": np.sqrt(np.maximum(avg("structured_var"), 0.0)),
        "error_sd": np.sqrt(np.maximum(avg("error_var"), 0.0)),
    }

    # log p(y) by quadrature over the rotated grid
    lj = grid.log_joint
    fin = np.isfinite(lj)
    step = (2.0 * grid.z_max / (opts.grid_points - 1)) ** 2
    log_mlik = float(
        lj[fin].max()
        + math.log(np.sum(grid.quad_weights[fin] * np.exp(lj[fin] - lj[fin].max())) * step)
        + math.log(abs(np.linalg.det(V)))
    )

    w_all = grid.normalized_weights
    diagnostics = {
        "theta_mode": theta_star.tolist(),
        "hessian": H.tolist(),
        "hessian_floored": floored,
        "mode_search_evaluations": int(n_search),
        "mode_search_converged": bool(opt.success),
        "grid_points": opts.grid_points,
        "grid_z_max": grid.z_max,
        "grid_expansions": expansions,
        "max_boundary_weight": grid.max_boundary_weight,
        "failed_nodes": int(sum(o is None for o in out)),
        "newton_iterations": [int(o[0].iterations) if o is not None else -1 for o in out],
        "log_tau_range": [float(grid.nodes[:, 0].min()), float(grid.nodes[:, 0].max())],
        "logit_phi_range": [float(grid.nodes[:, 1].min()), float(grid.nodes[:, 1].max())],
        "rsr": bool(spec.rsr),
        "family": spec.family,
        "phi_prior_method": spec.mix_prior.method,
        "scaling_method": spec.prec.method,
        "nrow": spec.prec.nrow,
        "ncol": spec.prec.ncol,
    }
    hypergrid = {
        "nodes": grid.nodes.tolist(),
        "log_joint": [float(v) if np.isfinite(v) else None for v in grid.log_joint],
        "normalized_weights": w_all.tolist(),
    }
    return FitResult(
        beta_marginals=beta_marginals,
        sigma_marginal=sigma,
        phi_marginal=phi,
        fields=_jsonable(fields),
        dic=float(d),
        p_d=float(p_d),
        mean_deviance=float(dbar),
        log_mlik=log_mlik,
        hypergrid=hypergrid,
        diagnostics=diagnostics,
    )


def avg_sq(w, arrays):
    return np.tensordot(w, np.array(arrays) ** 2, axes=1)


# ---------------------------------------------------------------------------
# decomposition


@dataclass
class Decomposition:
    intercept: float
    fixed: np.ndarray
    structured: np.ndarray
    error: np.ndarray
    eta: np.ndarray

    def residual(self) -> float:
        return float(np.max(np.abs(self.intercept + self.fixed + self.structured + self.error - self.eta)))


def decompose(result: FitResult) -> Decomposition:
    """Posterior-mean surfaces: fixed effects without intercept, weighted structured and error fields, eta."""
    f = result.fields
    return Decomposition(
        float(f["intercept"]),
        np.asarray(f["fixed"], float),
        np.asarray(f["structured"], float),
        np.asarray(f["error"], float),
        np.asarray(f["eta"], float),
    )


# ---------------------------------------------------------------------------
# Poisson GLM


@dataclass
class GlmResult:
    names: tuple
    coef: np.ndarray
    se: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    cov: np.ndarray
    deviance: float
    log_lik: float
    dic: float
    iterations: int
    level: float = 0.95

    @property
    def beta_marginals(self) -> list:
        return [
            {"name": n, "mean": float(c), "sd": float(s), "q025": float(lo), "q975": float(hi)}
            for n, c, s, lo, hi in zip(self.names, self.coef, self.se, self.lower, self.upper)
        ]

    def p_values(self) -> np.ndarray:
        return 2.0 * norm.sf(np.abs(self.coef / self.se))

    def to_dict(self) -> dict:
        return _jsonable(
            {
                "beta_marginals": self.beta_marginals,
                "p_values": self.p_values(),
                "deviance": self.deviance,
                "log_lik": self.log_lik,
                "dic": self.dic,
                "iterations": self.iterations,
                "level": self.level,
            }
        )


def glm_fit(counts: CountGrid, covariates: CovariateStack | None = None, level: float = 0.95, max_iter: int = 50) -> GlmResult:
    """Poisson regression with offset log(area) by Newton (IRLS) iterations."""
    n = counts.n
    cov = covariates if covariates is not None else CovariateStack.empty(n)
    if cov.p and cov.n != n:
        raise DataError("covariates and counts have different cell counts")
    X = np.column_stack([np.ones(n), cov.values]) if cov.p else np.ones((n, 1))
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise NumericalError("GLM design is rank deficient")
    y = counts.counts.astype(float)
    if y.sum() == 0:
        raise DataError("GLM needs at least one event")
    off = np.log(counts.areas)
    beta = np.zeros(X.shape[1])
    beta[0] = math.log(y.sum() / counts.areas.sum())
    for it in range(1, max_iter + 1):
        mu = np.exp(off + X @ beta)
        info = X.T @ (mu[:, None] * X)
        try:
            step = np.linalg.solve(info, X.T @ (y - mu))
        except np.linalg.LinAlgError as exc:
            raise NumericalError("singular GLM information matrix") from exc
        beta = beta + step
        if np.max(np.abs(beta)) > 50:
            raise NumericalError("GLM coefficients diverge (separation)")
        if np.max(np.abs(step)) < 1e-10:
            break
    else:
        raise NumericalError("GLM did not converge")
    eta = off + X @ beta
    mu = np.exp(eta)
    covm = np.linalg.inv(X.T @ (mu[:, None] * X))
    se = np.sqrt(np.diag(covm))
    zq = norm.ppf(0.5 + level / 2.0)
    ll = float(np.sum(y * eta - mu - gammaln(y + 1.0)))
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(y > 0, y * np.log(y / mu), 0.0)
    deviance = float(2.0 * np.sum(term - (y - mu)))
    var_eta = np.einsum("ij,jk,ik->i", X, covm, X)
    dbar = float(-2.0 * np.sum(y * eta - mu * np.exp(0.5 * var_eta) - gammaln(y + 1.0)))
    d_glm = 2.0 * dbar - (-2.0 * ll)
    names = ("(Intercept)", *cov.names)
    return GlmResult(names, beta, se, beta - zq * se, beta + zq * se, covm, deviance, ll, d_glm, it, level)


def glm_prescreen(counts: CountGrid, covariates: CovariateStack, alpha: float = 0.05):
    """Drop covariates whose GLM Wald p-value exceeds ``alpha`` (one pass)."""
    res = glm_fit(counts, covariates)
    p = res.p_values()[1:]
    keep = [nm for nm, pv in zip(covariates.names, p) if pv <= alpha]
    report = {nm: float(pv) for nm, pv in zip(covariates.names, p)}
    if len(keep) < covariates.p:
        warnings.warn(f"GLM prescreen removed {covariates.p - len(keep)} covariate(s)", stacklevel=2)
    return covariates.select(keep), report

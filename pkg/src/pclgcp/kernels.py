"""Hot numeric kernels.

Each kernel has a pure-numpy implementation (``*_numpy``) and, when numba is
importable, a compiled loop implementation (``*_numba``).  The public name
dispatches on the module flag ``USE_NUMBA`` at call time; it is false when
``PCLGCP_DISABLE_NUMBA`` is set.
"""

import math

import numpy as np

from ._accel import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# point binning


def bin_points_numpy(xs, ys, xmin, xmax, ymin, ymax, nrow, ncol):
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    inside = (xs >= xmin) & (xs <= xmax) & (ys >= ymin) & (ys <= ymax)
    xi, yi = xs[inside], ys[inside]
    # multiply before dividing so that a 2x refinement doubles t exactly
    col = np.floor((xi - xmin) * ncol / (xmax - xmin)).astype(np.int64)
    row = np.floor((yi - ymin) * nrow / (ymax - ymin)).astype(np.int64)
    np.minimum(col, ncol - 1, out=col)
    np.minimum(row, nrow - 1, out=row)
    counts = np.bincount(row * ncol + col, minlength=nrow * ncol).astype(np.int64)
    return counts, int(xs.size - xi.size)


def _bin_points_loop(xs, ys, xmin, xmax, ymin, ymax, nrow, ncol):
    counts = np.zeros(nrow * ncol, dtype=np.int64)
    dropped = 0
    for k in range(xs.shape[0]):
        x = xs[k]
        y = ys[k]
        if not (x >= xmin and x <= xmax and y >= ymin and y <= ymax):
            dropped += 1
            continue
        col = int(math.floor((x - xmin) * ncol / (xmax - xmin)))
        row = int(math.floor((y - ymin) * nrow / (ymax - ymin)))
        if col > ncol - 1:
            col = ncol - 1
        if row > nrow - 1:
            row = nrow - 1
        counts[row * ncol + col] += 1
    return counts, dropped


bin_points_numba = njit(_bin_points_loop)


def bin_points(xs, ys, xmin, xmax, ymin, ymax, nrow, ncol):
    """Cell counts under the half-open convention plus the number of dropped points."""
    if USE_NUMBA:
        counts, dropped = bin_points_numba(
            np.ascontiguousarray(xs, dtype=np.float64),
            np.ascontiguousarray(ys, dtype=np.float64),
            float(xmin), float(xmax), float(ymin), float(ymax), int(nrow), int(ncol),
        )
        return counts, int(dropped)
    return bin_points_numpy(xs, ys, xmin, xmax, ymin, ymax, nrow, ncol)


# ---------------------------------------------------------------------------
# Poisson cell likelihood


def poisson_terms_numpy(y, area, log_area, lgam, eta):
    mu = area * np.exp(eta)
    value = float(np.sum(y * (log_area + eta) - mu - lgam))
    return value, y - mu, mu


def _poisson_terms_loop(y, area, log_area, lgam, eta):
    n = eta.shape[0]
    grad = np.empty(n)
    curv = np.empty(n)
    value = 0.0
    for i in range(n):
        mu = area[i] * math.exp(eta[i])
        value += y[i] * (log_area[i] + eta[i]) - mu - lgam[i]
        grad[i] = y[i] - mu
        curv[i] = mu
    return value, grad, curv


poisson_terms_numba = njit(_poisson_terms_loop)


def poisson_terms(y, area, log_area, lgam, eta):
    """Log-likelihood, score and curvature of independent Poisson cells."""
    if USE_NUMBA:
        value, grad, curv = poisson_terms_numba(y, area, log_area, lgam, np.ascontiguousarray(eta))
        return float(value), grad, curv
    return poisson_terms_numpy(y, area, log_area, lgam, eta)


# ---------------------------------------------------------------------------
# selected inverse of a banded SPD matrix from its lower Cholesky factor
#
# Storage follows scipy.linalg.cholesky_banded(lower=True): L[d, j] = L_{j+d, j}.
# The output uses the same layout for the covariance band.


def banded_selinv_numpy(L):
    w1, n = L.shape
    w = w1 - 1
    S = np.zeros_like(L)
    win = np.zeros((max(w, 1), max(w, 1)))
    for i in range(n - 1, -1, -1):
        lii = L[0, i]
        m = min(w, n - 1 - i)
        if m > 0:
            lcol = L[1 : m + 1, i]
            s = win[:m, :m] @ lcol
            row = -s / lii
            S[1 : m + 1, i] = row
            sii = (1.0 / lii - lcol @ row) / lii
        else:
            row = np.zeros(0)
            sii = 1.0 / (lii * lii)
        S[0, i] = sii
        if w == 0:
            continue
        m_new = min(w, m + 1)
        nxt = np.zeros_like(win)
        nxt[0, 0] = sii
        nxt[0, 1:m_new] = row[: m_new - 1]
        nxt[1:m_new, 0] = row[: m_new - 1]
        nxt[1:m_new, 1:m_new] = win[: m_new - 1, : m_new - 1]
        win = nxt
    return S


def _banded_selinv_loop(L):
    w1, n = L.shape
    w = w1 - 1
    S = np.zeros_like(L)
    for i in range(n - 1, -1, -1):
        lii = L[0, i]
        kmax = min(n - 1, i + w)
        for j in range(kmax, i - 1, -1):
            s = 0.0
            for k in range(i + 1, kmax + 1):
                if k >= j:
                    skj = S[k - j, j]
                else:
                    skj = S[j - k, k]
                s += L[k - i, i] * skj
            if j == i:
                S[0, i] = (1.0 / lii - s) / lii
            else:
                S[j - i, i] = -s / lii
    return S


banded_selinv_numba = njit(_banded_selinv_loop)


def banded_selinv(L):
    """Band of the inverse of ``L L^T`` (Takahashi recursions)."""
    L = np.ascontiguousarray(L, dtype=np.float64)
    if USE_NUMBA:
        return banded_selinv_numba(L)
    return banded_selinv_numpy(L)


# ---------------------------------------------------------------------------
# MCMC oracle: preconditioned MALA on the latent block, random walk on theta
#
# The latent vector lives in whitened constraint-subspace coordinates w with
# x = T w.  eta = s0 + a su + b sv where s0 = F0 w, su = Fu w, sv = Fv w.
# Random numbers are drawn outside the kernel so both backends see the same stream.


def _loglik(eta, y, area, log_area, lgam, include_data, grad):
    n = eta.shape[0]
    if include_data == 0:
        for i in range(n):
            grad[i] = 0.0
        return 0.0
    val = 0.0
    for i in range(n):
        if eta[i] > 40.0:
            return -np.inf
        mu = area[i] * math.exp(eta[i])
        val += y[i] * (log_area[i] + eta[i]) - mu - lgam[i]
        grad[i] = y[i] - mu
    return val


def _log_hyper(t0, t1, lam, knots, logdens, lo_slope, hi_slope):
    # log tau: PC prior with Jacobian; logit phi: tabulated, linear extrapolation
    val = math.log(lam / 2.0) - 0.5 * t0 - lam * math.exp(-0.5 * t0)
    m = knots.shape[0]
    if t1 <= knots[0]:
        val += logdens[0] + lo_slope * (t1 - knots[0])
    elif t1 >= knots[m - 1]:
        val += logdens[m - 1] + hi_slope * (t1 - knots[m - 1])
    else:
        h = knots[1] - knots[0]
        k = int((t1 - knots[0]) / h)
        if k > m - 2:
            k = m - 2
        f = (t1 - knots[k]) / h
        val += (1.0 - f) * logdens[k] + f * logdens[k + 1]
    return val


def _weights(t0, t1):
    tau_inv = math.exp(-t0)
    phi = 1.0 / (1.0 + math.exp(-t1))
    return math.sqrt(phi * tau_inv), math.sqrt((1.0 - phi) * tau_inv)


def _make_mcmc_block(loglik, log_hyper, weights):
    def block(w, theta, F0, Fu, Fv, P, Tb, y, area, log_area, lgam, include_data,
              lam, knots, logdens, lo_slope, hi_slope, Ib, Iu, Iv, nu_free,
              eps, eps_theta, theta_chol, z_lat, u_lat, z_hyp, u_hyp, z_cen, u_cen,
              thin, out_theta, out_beta, out_start):
        n = y.shape[0]
        niter = z_lat.shape[0]
        grad_eta = np.empty(n)
        grad_eta_p = np.empty(n)
        s0 = F0 @ w
        su = Fu @ w
        sv = Fv @ w
        a, b = weights(theta[0], theta[1])
        eta = s0 + a * su + b * sv
        ll = loglik(eta, y, area, log_area, lgam, include_data, grad_eta)
        Pw = P @ w
        g = F0.T @ grad_eta + a * (Fu.T @ grad_eta) + b * (Fv.T @ grad_eta) - Pw
        lp = ll - 0.5 * (w @ Pw)
        lh = log_hyper(theta[0], theta[1], lam, knots, logdens, lo_slope, hi_slope)
        acc_lat = 0
        acc_hyp = 0
        acc_cen = 0
        half = 0.5 * eps * eps
        k_out = out_start
        for it in range(niter):
            # latent MALA step
            wp = w + half * g + eps * z_lat[it]
            s0p = F0 @ wp
            sup = Fu @ wp
            svp = Fv @ wp
            etap = s0p + a * sup + b * svp
            llp = loglik(etap, y, area, log_area, lgam, include_data, grad_eta_p)
            if llp > -np.inf:
                Pwp = P @ wp
                gp = F0.T @ grad_eta_p + a * (Fu.T @ grad_eta_p) + b * (Fv.T @ grad_eta_p) - Pwp
                lpp = llp - 0.5 * (wp @ Pwp)
                fwd = wp - w - half * g
                bwd = w - wp - half * gp
                log_r = lpp - lp - (bwd @ bwd - fwd @ fwd) / (4.0 * half)
                if math.log(u_lat[it]) < log_r:
                    w = wp
                    s0, su, sv = s0p, sup, svp
                    ll, lp, g, Pw = llp, lpp, gp, Pwp
                    grad_eta, grad_eta_p = grad_eta_p, grad_eta
                    acc_lat += 1
            # hyperparameter random walk given the latent
            t0 = theta[0] + eps_theta * (theta_chol[0, 0] * z_hyp[it, 0])
            t1 = theta[1] + eps_theta * (theta_chol[1, 0] * z_hyp[it, 0] + theta_chol[1, 1] * z_hyp[it, 1])
            ap, bp = weights(t0, t1)
            etap = s0 + ap * su + bp * sv
            llp = loglik(etap, y, area, log_area, lgam, include_data, grad_eta_p)
            if llp > -np.inf:
                lhp = log_hyper(t0, t1, lam, knots, logdens, lo_slope, hi_slope)
                if math.log(u_hyp[it]) < llp + lhp - ll - lh:
                    theta[0] = t0
                    theta[1] = t1
                    a, b = ap, bp
                    ll, lh = llp, lhp
                    lp = ll - 0.5 * (w @ Pw)
                    g = F0.T @ grad_eta_p + a * (Fu.T @ grad_eta_p) + b * (Fv.T @ grad_eta_p) - Pw
                    grad_eta, grad_eta_p = grad_eta_p, grad_eta
                    acc_hyp += 1
            # centred move: rescale u*, v so that a u* and b v stay fixed (eta unchanged)
            t0 = theta[0] + eps_theta * (theta_chol[0, 0] * z_cen[it, 0])
            t1 = theta[1] + eps_theta * (theta_chol[1, 0] * z_cen[it, 0] + theta_chol[1, 1] * z_cen[it, 1])
            ap, bp = weights(t0, t1)
            ru = a / ap
            rv = b / bp
            wp = Ib @ (Tb @ w) + ru * (Iu @ su) + rv * (Iv @ sv)
            Pwp = P @ wp
            lhp = log_hyper(t0, t1, lam, knots, logdens, lo_slope, hi_slope)
            log_r = lhp - lh - 0.5 * (wp @ Pwp) + 0.5 * (w @ Pw) + nu_free * math.log(ru) + n * math.log(rv)
            if math.log(u_cen[it]) < log_r:
                theta[0] = t0
                theta[1] = t1
                a, b = ap, bp
                w = wp
                Pw = Pwp
                su = ru * su
                sv = rv * sv
                lh = lhp
                lp = ll - 0.5 * (w @ Pw)
                g = F0.T @ grad_eta + a * (Fu.T @ grad_eta) + b * (Fv.T @ grad_eta) - Pw
                acc_cen += 1
            if thin > 0 and (it + 1) % thin == 0 and k_out < out_theta.shape[0]:
                out_theta[k_out, 0] = theta[0]
                out_theta[k_out, 1] = theta[1]
                out_beta[k_out] = Tb @ w
                k_out += 1
        return w, acc_lat, acc_hyp, acc_cen, k_out

    return block


mcmc_block_numpy = _make_mcmc_block(_loglik, _log_hyper, _weights)
if njit(_loglik) is not None:
    mcmc_block_numba = njit(_make_mcmc_block(njit(_loglik), njit(_log_hyper), njit(_weights)))
else:
    mcmc_block_numba = None


def mcmc_block(*args):
    """Run one block of the chain; returns (w, accepted latent, accepted theta, accepted centred, rows written)."""
    if USE_NUMBA:
        return mcmc_block_numba(*args)
    return mcmc_block_numpy(*args)

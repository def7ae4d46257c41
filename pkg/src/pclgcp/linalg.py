"""Solves, determinants and selected inverses for the latent Gaussian approximation.

The Hessian of the negative log posterior in ``x = (beta, u*, v)`` is

    H = blockdiag(bp I, R*, I) + L^T W L,    eta = L x = X beta + a u* + b v

with ``W`` diagonal.  The ``v`` block is diagonal and is eliminated first, leaving
a banded ``u*`` block (bandwidth ``2 min(nrow, ncol)`` in a suitable ordering)
bordered by the ``beta`` block.
"""

from __future__ import annotations

import math

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve, cho_solve_banded, cholesky_banded, LinAlgError

from .errors import NumericalError
from .kernels import banded_selinv


def band_order(nrow: int, ncol: int) -> np.ndarray | None:
    """Cell permutation giving the narrower band (None = keep row-major)."""
    if ncol <= nrow:
        return None
    return np.arange(nrow * ncol).reshape(nrow, ncol).T.ravel()


def to_lower_band(K: sp.spmatrix, width: int) -> np.ndarray:
    K = K.tocoo()
    keep = K.row >= K.col
    r, c, v = K.row[keep], K.col[keep], K.data[keep]
    if np.any(r - c > width):
        raise NumericalError("matrix is wider than the declared band")
    ab = np.zeros((width + 1, K.shape[0]))
    np.add.at(ab, (r - c, c), v)
    return ab


class LatentSystem:
    """Factorisation of H for one (hyperparameter, curvature) pair."""

    def __init__(self, spec, hyper, curv):
        self.spec = spec
        a, b = hyper.weights
        self.a, self.b = a, b
        W = np.asarray(curv, dtype=float)
        n, p1 = spec.n, spec.p1
        self.n, self.p1 = n, p1
        self.W = W
        self.Dv = 1.0 + b * b * W
        self.Wt = W / self.Dv
        X = spec.design
        self.X = X

        prec = spec.prec
        self.perm = band_order(prec.nrow, prec.ncol)
        self.width = 2 * min(prec.nrow, prec.ncol)
        Kuu = prec.entries + sp.diags(a * a * self.Wt)
        if self.perm is not None:
            Kuu = Kuu[self.perm][:, self.perm]
        try:
            self.Lband = cholesky_banded(to_lower_band(Kuu, self.width), lower=True)
        except LinAlgError as exc:
            raise NumericalError("structured block of the Hessian is not positive definite") from exc

        self.Kub = a * self.Wt[:, None] * X
        self.G = self._kuu_solve(self.Kub)
        S = spec.beta_prec * np.eye(p1) + X.T @ (self.Wt[:, None] * X) - self.Kub.T @ self.G
        try:
            self.S_chol = cho_factor(S, lower=True)
        except LinAlgError as exc:
            raise NumericalError("fixed-effect Schur complement is not positive definite") from exc
        self.logdet = float(
            np.sum(np.log(self.Dv))
            + 2.0 * np.sum(np.log(self.Lband[0]))
            + 2.0 * np.sum(np.log(np.diag(self.S_chol[0])))
        )

    # -- u-block solves in the caller's (row-major) order
    def _kuu_solve(self, r):
        r = np.asarray(r, dtype=float)
        if self.perm is None:
            return cho_solve_banded((self.Lband, True), r)
        out = np.empty_like(r)
        out[self.perm] = cho_solve_banded((self.Lband, True), r[self.perm])
        return out

    def solve(self, r) -> np.ndarray:
        """H^{-1} r for a vector or the columns of a matrix."""
        r = np.asarray(r, dtype=float)
        vec = r.ndim == 1
        if vec:
            r = r[:, None]
        n, p1 = self.n, self.p1
        rb, ru, rv = r[:p1], r[p1 : p1 + n], r[p1 + n :]
        a, b, W, Dv, X = self.a, self.b, self.W, self.Dv, self.X
        wv = (b * W / Dv)[:, None] * rv
        ru_t = ru - a * wv
        rb_t = rb - X.T @ wv
        z = self._kuu_solve(ru_t)
        beta = cho_solve(self.S_chol, rb_t - self.Kub.T @ z)
        u = z - self.G @ beta
        v = (rv - (b * W)[:, None] * (a * u + X @ beta)) / Dv[:, None]
        out = np.vstack([beta, u, v])
        return out[:, 0] if vec else out

    def selected_variances(self):
        """Unconstrained marginal variances of eta, u* and v, and the beta covariance."""
        a, b, W, Dv, X, G = self.a, self.b, self.W, self.Dv, self.X, self.G
        Sb = banded_selinv(self.Lband)[0]
        kdiag = np.empty(self.n)
        if self.perm is None:
            kdiag[:] = Sb
        else:
            kdiag[self.perm] = Sb
        Sinv = cho_solve(self.S_chol, np.eye(self.p1))
        R = a * G - X
        q = a * a * kdiag + np.einsum("ij,jk,ik->i", R, Sinv, R)
        var_eta = q / Dv**2 + b * b / Dv
        var_u = kdiag + np.einsum("ij,jk,ik->i", G, Sinv, G)
        var_v = (b * W / Dv) ** 2 * q + 1.0 / Dv
        return var_eta, var_u, var_v, Sinv

    def dense(self) -> np.ndarray:
        """Dense H (small problems and tests)."""
        spec = self.spec
        n, p1 = self.n, self.p1
        L = np.hstack([self.X, self.a * np.eye(n), self.b * np.eye(n)])
        Q = np.zeros((p1 + 2 * n, p1 + 2 * n))
        Q[:p1, :p1] = spec.beta_prec * np.eye(p1)
        Q[p1 : p1 + n, p1 : p1 + n] = spec.prec.entries.toarray()
        Q[p1 + n :, p1 + n :] = np.eye(n)
        return Q + L.T @ (self.W[:, None] * L)


class ConstrainedSystem:
    """Conditioning of the Gaussian N(., H^{-1}) on A x = 0 (kriging correction)."""

    def __init__(self, system: LatentSystem, A):
        self.system = system
        self.A = np.asarray(A, dtype=float)
        self.M = system.solve(self.A.T)
        C = self.A @ self.M
        try:
            self.C_chol = cho_factor(0.5 * (C + C.T), lower=True)
        except LinAlgError as exc:
            raise NumericalError("constraints are degenerate under the Gaussian approximation") from exc
        self.logdet_C = 2.0 * float(np.sum(np.log(np.diag(self.C_chol[0]))))

    def correct(self, d) -> np.ndarray:
        """Remove from d = H^{-1} r the component violating the constraints."""
        return d - self.M @ cho_solve(self.C_chol, self.A @ d)

    def solve(self, r) -> np.ndarray:
        return self.correct(self.system.solve(r))

    def variances(self):
        """Constrained marginal variances of eta, u*, v and the covariance of beta."""
        s = self.system
        n, p1 = s.n, s.p1
        var_eta, var_u, var_v, cov_beta = s.selected_variances()
        M = self.M
        E = s.X @ M[:p1] + s.a * M[p1 : p1 + n] + s.b * M[p1 + n :]
        Ci = cho_solve(self.C_chol, np.eye(M.shape[1]))

        def quad(B):
            return np.einsum("ij,jk,ik->i", B, Ci, B)

        var_eta = var_eta - quad(E)
        var_u = var_u - quad(M[p1 : p1 + n])
        var_v = var_v - quad(M[p1 + n :])
        Mb = M[:p1]
        cov_beta = cov_beta - Mb @ Ci @ Mb.T
        floor = lambda z: np.maximum(z, 0.0)
        return floor(var_eta), floor(var_u), floor(var_v), 0.5 * (cov_beta + cov_beta.T)


def logdet_spd(M) -> float:
    sign, ld = np.linalg.slogdet(np.atleast_2d(M))
    if sign <= 0:
        raise NumericalError("expected a positive definite matrix")
    return float(ld)


LOG_2PI = math.log(2.0 * math.pi)

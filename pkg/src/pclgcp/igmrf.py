"""Second-order intrinsic GMRF on a regular lattice.

The structure matrix is ``R = D^T D`` with ``D`` the free-boundary five-point
Laplacian.  ``D`` is the Kronecker sum of two path-graph Laplacians, so ``R`` is
diagonalised by the separable orthonormal DCT-II basis with eigenvalues
``(a_i + b_j)^2``, ``a_i = 2 - 2 cos(pi i / nrow)``, ``b_j = 2 - 2 cos(pi j / ncol)``.
Everything "exact" below (generalized inverse, generalized determinant, sampling)
is computed in that basis.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
import scipy.sparse as sp
from scipy import fft

from .errors import DataError, NumericalError

NULL_TOL = 1e-10
DENSE_LIMIT = 6000


def _check_dims(nrow: int, ncol: int) -> None:
    if nrow < 3 or ncol < 3:
        raise DataError(f"RW2D needs at least 3x3 cells, got {nrow}x{ncol}")


def _path_laplacian(n: int) -> sp.spmatrix:
    main = np.full(n, 2.0)
    main[0] = main[-1] = 1.0
    off = -np.ones(n - 1)
    return sp.diags([off, main, off], [-1, 0, 1])


def laplacian(nrow: int, ncol: int) -> sp.csr_matrix:
    """Free-boundary five-point Laplacian, row-major cell order."""
    return (
        sp.kron(_path_laplacian(nrow), sp.identity(ncol)) + sp.kron(sp.identity(nrow), _path_laplacian(ncol))
    ).tocsr()


def _path_eigenvalues(n: int) -> np.ndarray:
    return 2.0 - 2.0 * np.cos(np.pi * np.arange(n) / n)


@lru_cache(maxsize=32)
def _dct_basis_sq(n: int) -> np.ndarray:
    # E[i, k]^2 where column k is the k-th orthonormal DCT-II vector
    e = fft.dct(np.eye(n), type=2, norm="ortho", axis=0).T
    return e * e


def rw2d_spectrum(nrow: int, ncol: int) -> np.ndarray:
    """Eigenvalues of the unit-weight RW2D structure matrix, shape (nrow, ncol)."""
    return (_path_eigenvalues(nrow)[:, None] + _path_eigenvalues(ncol)[None, :]) ** 2


def torus_spectrum(nrow: int, ncol: int) -> np.ndarray:
    """Eigenvalues of the RW2D operator on an nrow-by-ncol torus, row-major in (i, j)."""
    _check_dims(nrow, ncol)
    ci = 2.0 * np.cos(2.0 * np.pi * np.arange(nrow) / nrow)
    cj = 2.0 * np.cos(2.0 * np.pi * np.arange(ncol) / ncol)
    lam = (4.0 - ci[:, None] - cj[None, :]) ** 2
    lam[0, 0] = 0.0
    return lam.ravel()


def trend_vectors(nrow: int, ncol: int) -> np.ndarray:
    """Centred column- and row-index vectors (the linear trends of the lattice)."""
    r, c = np.meshgrid(np.arange(nrow, dtype=float), np.arange(ncol, dtype=float), indexing="ij")
    return np.vstack([(c - c.mean()).ravel(), (r - r.mean()).ravel()])


@dataclass(frozen=True)
class StructureMatrix:
    nrow: int
    ncol: int
    entries: sp.csr_matrix
    rank_deficiency: int
    constraints: np.ndarray  # (k, n); row 0 is the sum-to-zero constraint
    weight: float = 1.0

    @property
    def n(self) -> int:
        return self.nrow * self.ncol

    @property
    def has_trend_constraints(self) -> bool:
        return self.constraints.shape[0] > 1

    @cached_property
    def spectrum(self) -> np.ndarray:
        return self.weight * rw2d_spectrum(self.nrow, self.ncol)

    @cached_property
    def null_mask(self) -> np.ndarray:
        lam = self.spectrum
        return lam <= NULL_TOL * lam.max()

    @cached_property
    def logdet_plus(self) -> float:
        """Log generalized determinant (product of non-null eigenvalues)."""
        return float(np.sum(np.log(self.spectrum[~self.null_mask])))

    def reweighted(self, factor: float) -> "StructureMatrix":
        return StructureMatrix(
            self.nrow, self.ncol, (self.entries * factor).tocsr(), self.rank_deficiency, self.constraints, self.weight * factor
        )

    def _spectral_apply(self, b, power: float) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        shape = b.shape
        mats = b.reshape(-1, self.nrow, self.ncol)
        coef = fft.dctn(mats, type=2, norm="ortho", axes=(1, 2))
        scale = np.zeros_like(self.spectrum)
        scale[~self.null_mask] = self.spectrum[~self.null_mask] ** power
        coef *= scale
        return fft.idctn(coef, type=2, norm="ortho", axes=(1, 2)).reshape(shape)

    def pinv_apply(self, b) -> np.ndarray:
        """Moore-Penrose pseudo-inverse of R applied to ``b`` (last axis = cells)."""
        return self._spectral_apply(b, -1.0)

    def sqrt_pinv_apply(self, b) -> np.ndarray:
        return self._spectral_apply(b, -0.5)

    def dense(self) -> np.ndarray:
        return self.entries.toarray()


def build_rw2d(nrow: int, ncol: int, trend_constraints: bool = False) -> StructureMatrix:
    """RW2D structure matrix ``D^T D`` on an nrow-by-ncol lattice (row-major cells)."""
    _check_dims(nrow, ncol)
    D = laplacian(nrow, ncol)
    R = (D.T @ D).tocsr()
    R.eliminate_zeros()
    lam = rw2d_spectrum(nrow, ncol)
    rank_def = int(np.sum(lam <= NULL_TOL * lam.max()))
    rows = [np.ones(nrow * ncol)]
    if trend_constraints:
        rows.extend(trend_vectors(nrow, ncol))
    return StructureMatrix(nrow, ncol, R, rank_def, np.vstack(rows))


def _as_structure(R) -> StructureMatrix:
    return R.structure if isinstance(R, ScaledPrecision) else R


def _trend_correction(R: StructureMatrix):
    """Pieces for projecting the extra (non-null-space) constraints out of ``R^+``."""
    T = R.constraints[1:]
    RT = R.pinv_apply(T)  # (k, n)
    C = T @ RT.T
    return RT, np.linalg.inv(C)


def constrained_ginv_diag(R: StructureMatrix) -> np.ndarray:
    """Marginal variances of the constrained generalized inverse of ``R``."""
    R = _as_structure(R)
    inv = np.zeros_like(R.spectrum)
    inv[~R.null_mask] = 1.0 / R.spectrum[~R.null_mask]
    diag = (_dct_basis_sq(R.nrow) @ inv @ _dct_basis_sq(R.ncol).T).ravel()
    if R.has_trend_constraints:
        RT, Cinv = _trend_correction(R)
        diag = diag - np.einsum("ai,ab,bi->i", RT, Cinv, RT)
    return diag


def generalized_variance(R, method: str = "exact"):
    """Generalized variance (geometric mean of marginal variances) and the marginal variances.

    ``method="exact"`` uses the constrained generalized inverse of ``R``;
    ``method="torus"`` embeds the lattice on a 2*nrow by 2*ncol torus, where every
    cell has the same variance.
    """
    R = _as_structure(R)
    if method == "exact":
        diag = constrained_ginv_diag(R)
    elif method == "torus":
        lam = R.weight * torus_spectrum(2 * R.nrow, 2 * R.ncol)
        nz = lam > NULL_TOL * lam.max()
        if not nz.any():
            raise NumericalError("torus spectrum is identically zero")
        diag = np.full(R.n, np.sum(1.0 / lam[nz]) / lam.size)
    else:
        raise ValueError(f"unknown method {method!r}")
    if not np.all(diag > 0):
        raise NumericalError("non-positive marginal variance in the generalized inverse")
    return float(np.exp(np.mean(np.log(diag)))), diag


@dataclass(frozen=True)
class ScaledPrecision:
    base: StructureMatrix
    scale_factor: float
    gv_before: float
    ginv_diag: np.ndarray
    torus_spectrum: np.ndarray
    method: str

    @cached_property
    def structure(self) -> StructureMatrix:
        return self.base.reweighted(self.scale_factor)

    @property
    def entries(self) -> sp.csr_matrix:
        return self.structure.entries

    @property
    def nrow(self) -> int:
        return self.base.nrow

    @property
    def ncol(self) -> int:
        return self.base.ncol

    @property
    def n(self) -> int:
        return self.base.n

    @property
    def constraints(self) -> np.ndarray:
        return self.base.constraints

    @property
    def rank_deficiency(self) -> int:
        return self.base.rank_deficiency

    @property
    def logdet_plus(self) -> float:
        return self.structure.logdet_plus

    def pinv_apply(self, b) -> np.ndarray:
        return self.structure.pinv_apply(b)

    def inverse_spectrum(self, method: str = "exact", dense_limit: int = DENSE_LIMIT):
        """Non-null eigenvalues of the scaled generalized inverse and a per-mode weight.

        For ``torus`` the eigenvalues come from the 2x embedding rescaled to unit
        generalized variance on the torus; the weight ``n / n_torus`` converts sums
        over torus modes to the lattice size.
        """
        S = self.structure
        if method == "exact":
            if not S.has_trend_constraints:
                return 1.0 / S.spectrum[~S.null_mask], 1.0
            if S.n > dense_limit:
                raise NumericalError(f"exact spectrum with trend constraints limited to {dense_limit} cells")
            cov = self.dense_ginv()
            ev = np.linalg.eigvalsh(cov)
            return ev[ev > NULL_TOL * ev.max()], 1.0
        if method == "torus":
            lam = torus_spectrum(2 * self.nrow, 2 * self.ncol)
            nz = lam > NULL_TOL * lam.max()
            gam = 1.0 / lam[nz]
            gam /= gam.sum() / lam.size
            return gam, self.n / lam.size
        raise ValueError(f"unknown method {method!r}")

    def dense_ginv(self) -> np.ndarray:
        """Dense constrained generalized inverse (small lattices only)."""
        S = self.structure
        cov = S.pinv_apply(np.eye(S.n))
        if S.has_trend_constraints:
            RT, Cinv = _trend_correction(S)
            cov = cov - RT.T @ Cinv @ RT
        return 0.5 * (cov + cov.T)

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        """Draw from the constrained scaled IGMRF with unit precision."""
        S = self.structure
        m = 1 if size is None else size
        z = rng.standard_normal((m, S.n))
        u = S.sqrt_pinv_apply(z)
        if S.has_trend_constraints:
            RT, Cinv = _trend_correction(S)
            u = u - (u @ S.constraints[1:].T) @ Cinv @ RT
        return u[0] if size is None else u

    def diagnostics(self) -> dict:
        return {
            "nrow": self.nrow,
            "ncol": self.ncol,
            "scale_factor": self.scale_factor,
            "gv_before": self.gv_before,
            "rank_deficiency": self.rank_deficiency,
            "method": self.method,
        }


def scale_to_unit_gv(R, method: str = "exact") -> ScaledPrecision:
    """Scale ``R`` so that its generalized variance is one."""
    S = _as_structure(R)
    gv, diag = generalized_variance(S, method)
    return ScaledPrecision(
        base=S,
        scale_factor=gv,
        gv_before=gv,
        ginv_diag=diag / gv,
        torus_spectrum=torus_spectrum(2 * S.nrow, 2 * S.ncol),
        method=method,
    )


@lru_cache(maxsize=16)
def scaled_rw2d(nrow: int, ncol: int, trend_constraints: bool = False, method: str = "exact") -> ScaledPrecision:
    return scale_to_unit_gv(build_rw2d(nrow, ncol, trend_constraints), method)

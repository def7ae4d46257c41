import numpy as np
import pytest

from pclgcp.kernels import banded_selinv_numpy, banded_selinv
from pclgcp.linalg import ConstrainedSystem, LatentSystem, band_order, to_lower_band
from pclgcp.model import Hyperparameters, constraint_matrix
from scipy.linalg import cholesky_banded

from conftest import make_spec, smooth_covariates


@pytest.fixture(params=[(5, 7), (8, 4)])
def system(request):
    nr, nc = request.param
    spec = make_spec(nr, nc, smooth_covariates(nr, nc))
    rng = np.random.default_rng(nr * nc)
    curv = rng.uniform(0.1, 5.0, spec.n)
    hyper = Hyperparameters(2.0, 0.6)
    return spec, hyper, LatentSystem(spec, hyper, curv)


def test_solve_matches_dense(system):
    spec, _, s = system
    H = s.dense()
    r = np.random.default_rng(0).standard_normal((spec.dim, 3))
    assert np.allclose(s.solve(r), np.linalg.solve(H, r), rtol=1e-8, atol=1e-10)
    assert np.allclose(s.solve(r[:, 0]), np.linalg.solve(H, r[:, 0]))
    assert np.isclose(s.logdet, np.linalg.slogdet(H)[1])


def test_selected_variances_match_dense(system):
    spec, _, s = system
    Hi = np.linalg.inv(s.dense())
    n, p1 = spec.n, spec.p1
    L = np.hstack([spec.design, s.a * np.eye(n), s.b * np.eye(n)])
    var_eta, var_u, var_v, Sb = s.selected_variances()
    assert np.allclose(var_eta, np.einsum("ij,jk,ik->i", L, Hi, L), rtol=1e-7)
    assert np.allclose(var_u, np.diag(Hi)[p1 : p1 + n], rtol=1e-7)
    assert np.allclose(var_v, np.diag(Hi)[p1 + n :], rtol=1e-7)
    assert np.allclose(Sb, Hi[:p1, :p1], rtol=1e-7)


def test_constrained_variances_match_dense(system):
    spec, hyper, s = system
    A = constraint_matrix(spec.replace(rsr=True), hyper)
    cs = ConstrainedSystem(s, A)
    Hi = np.linalg.inv(s.dense())
    Sc = Hi - Hi @ A.T @ np.linalg.solve(A @ Hi @ A.T, A @ Hi)
    n, p1 = spec.n, spec.p1
    var_eta, var_u, var_v, cov_b = cs.variances()
    assert np.allclose(var_u, np.diag(Sc)[p1 : p1 + n], atol=1e-9)
    assert np.allclose(var_v, np.diag(Sc)[p1 + n :], atol=1e-9)
    assert np.allclose(cov_b, Sc[:p1, :p1], atol=1e-9)
    d = cs.solve(np.ones(spec.dim))
    assert np.allclose(A @ d, 0, atol=1e-9)
    assert np.allclose(d, Sc @ np.ones(spec.dim), atol=1e-8)


def test_band_order_limits_bandwidth():
    spec = make_spec(4, 9)
    perm = band_order(4, 9)
    K = spec.prec.entries[perm][:, perm].tocoo()
    assert np.max(np.abs(K.row - K.col)) <= 2 * 4
    assert band_order(9, 4) is None


def test_banded_selinv_backends_match():
    rng = np.random.default_rng(3)
    n, w = 40, 5
    M = rng.standard_normal((n, n))
    K = M @ M.T + n * np.eye(n)
    K = np.where(np.abs(np.subtract.outer(np.arange(n), np.arange(n))) <= w, K, 0.0)
    K += n * np.eye(n)
    import scipy.sparse as sp

    Lb = cholesky_banded(to_lower_band(sp.csr_matrix(K), w), lower=True)
    d1 = banded_selinv_numpy(Lb)[0]
    d2 = banded_selinv(Lb)[0]
    assert np.allclose(d1, np.diag(np.linalg.inv(K)), rtol=1e-10)
    assert np.allclose(d1, d2, rtol=1e-12)

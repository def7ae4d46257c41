import numpy as np
import pytest

from pclgcp.errors import DataError
from pclgcp.igmrf import (
    build_rw2d,
    generalized_variance,
    laplacian,
    scale_to_unit_gv,
    scaled_rw2d,
    torus_spectrum,
)


def dense_laplacian(nrow, ncol):
    """Free-boundary five-point Laplacian built cell by cell."""
    n = nrow * ncol
    D = np.zeros((n, n))
    for r in range(nrow):
        for c in range(ncol):
            i = r * ncol + c
            for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < nrow and 0 <= cc < ncol:
                    D[i, i] += 1
                    D[i, rr * ncol + cc] -= 1
    return D


def dense_gv(R):
    """Generalized variance from the dense pseudo-inverse (constant null space)."""
    w, V = np.linalg.eigh(R)
    keep = w > 1e-10 * w.max()
    ginv = (V[:, keep] / w[keep]) @ V[:, keep].T
    return float(np.exp(np.mean(np.log(np.diag(ginv))))), ginv


@pytest.mark.parametrize("shape", [(3, 3), (4, 7), (6, 5)])
def test_null_space_and_row_sums(shape):
    R = build_rw2d(*shape)
    assert np.allclose(R.entries @ np.ones(R.n), 0, atol=1e-10)
    assert R.rank_deficiency == 1


def test_matches_dense_product_4x4():
    D = dense_laplacian(4, 4)
    assert np.allclose(laplacian(4, 4).toarray(), D)
    assert np.max(np.abs(build_rw2d(4, 4).dense() - D.T @ D)) < 1e-12


def test_interior_stencil_5x5():
    row = build_rw2d(5, 5).dense()[12].reshape(5, 5)
    expected = np.array(
        [[0, 0, 1, 0, 0], [0, 2, -8, 2, 0], [1, -8, 20, -8, 1], [0, 2, -8, 2, 0], [0, 0, 1, 0, 0]], dtype=float
    )
    assert np.array_equal(row, expected)


def test_psd_up_to_12x12():
    for nr, nc in [(3, 12), (7, 9), (12, 12)]:
        R = build_rw2d(nr, nc).dense()
        w = np.linalg.eigvalsh(R)
        assert w.min() >= -1e-10 * np.abs(R).max()


def test_quadratic_form_is_squared_laplacian():
    rng = np.random.default_rng(0)
    u = rng.standard_normal(30)
    R = build_rw2d(5, 6)
    Du = dense_laplacian(5, 6) @ u
    assert np.isclose(u @ (R.entries @ u), Du @ Du)


def test_dims_rejected():
    with pytest.raises(DataError):
        build_rw2d(2, 5)


def test_exact_gv_matches_dense_6x6():
    R = build_rw2d(6, 6)
    gv, diag = generalized_variance(R)
    gv_dense, ginv = dense_gv(R.dense())
    assert abs(gv - gv_dense) < 1e-8 * gv_dense
    assert np.allclose(diag, np.diag(ginv), rtol=1e-8)


def test_trend_constraints_gv_matches_dense():
    R = build_rw2d(5, 6, trend_constraints=True)
    gv, diag = generalized_variance(R)
    # conditional covariance given the trend constraints, from the dense pseudo-inverse
    _, G = dense_gv(R.dense())
    T = R.constraints[1:]
    G = G - G @ T.T @ np.linalg.solve(T @ G @ T.T, T @ G)
    assert np.allclose(diag, np.diag(G), rtol=1e-8)


@pytest.mark.parametrize("shape", [(16, 16), (32, 32), (20, 40)])
def test_scaled_gv_is_one(shape):
    s = scaled_rw2d(*shape)
    gv, _ = generalized_variance(s.structure)
    assert abs(gv - 1) < 1e-8
    assert abs(np.exp(np.mean(np.log(s.ginv_diag))) - 1) < 1e-8


def test_scaling_idempotent():
    s = scaled_rw2d(8, 9)
    again = scale_to_unit_gv(s.structure)
    assert abs(again.scale_factor - 1) < 1e-8


def test_gv_grows_like_k_squared():
    g16, _ = generalized_variance(build_rw2d(16, 16))
    g32, _ = generalized_variance(build_rw2d(32, 32))
    assert 4 * 0.85 <= g32 / g16 <= 4 * 1.15


def test_torus_gv_constant_across_cells():
    _, diag = generalized_variance(build_rw2d(6, 8), "torus")
    assert np.ptp(diag) == 0


def test_torus_gv_near_exact_at_20x40():
    # the gap narrows as the lattice grows; documented in the decision log
    ex, _ = generalized_variance(build_rw2d(20, 40))
    to, _ = generalized_variance(build_rw2d(20, 40), "torus")
    assert 0.5 < to / ex < 1.0


@pytest.mark.xfail(strict=True, reason="2x torus embedding underestimates the exact scale factor by about 32% at 20x20")
def test_torus_scale_factor_within_ten_percent_20x20():
    ex, _ = generalized_variance(build_rw2d(20, 20))
    to, _ = generalized_variance(build_rw2d(20, 20), "torus")
    assert abs(to / ex - 1) < 0.10


def test_torus_spectrum_closed_form():
    lam = torus_spectrum(4, 4).reshape(4, 4)
    assert lam[0, 0] == 0 and np.count_nonzero(lam == 0) == 1
    assert lam[2, 2] == 64.0
    lam = torus_spectrum(5, 7).reshape(5, 7)
    flipped = lam[(-np.arange(5)) % 5][:, (-np.arange(7)) % 7]
    assert np.allclose(lam, flipped)


def test_torus_spectrum_matches_circulant():
    # eigenvalues of the squared periodic Laplacian
    nr, nc = 4, 5
    n = nr * nc
    L = np.zeros((n, n))
    for r in range(nr):
        for c in range(nc):
            i = r * nc + c
            L[i, i] = 4
            for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                L[i, ((r + dr) % nr) * nc + (c + dc) % nc] -= 1
    assert np.allclose(np.sort(np.linalg.eigvalsh(L @ L)), np.sort(torus_spectrum(nr, nc)), atol=1e-9)


def test_refinement_gv_invariant_after_scaling():
    for shape in [(6, 8), (12, 16)]:
        s = scaled_rw2d(*shape)
        assert abs(np.exp(np.mean(np.log(s.ginv_diag))) - 1) < 1e-8


def test_sampling_covariance():
    s = scaled_rw2d(4, 5)
    u = s.sample(np.random.default_rng(0), size=40000)
    assert np.allclose(u.sum(axis=1), 0, atol=1e-9)
    emp = np.cov(u.T)
    assert np.max(np.abs(emp - s.dense_ginv())) < 0.05 * np.max(np.diag(s.dense_ginv()))


def test_diagnostics_keys():
    d = scaled_rw2d(5, 5).diagnostics()
    assert {"nrow", "ncol", "scale_factor", "gv_before", "rank_deficiency"} <= set(d)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pclgcp.errors import DataError
from pclgcp.kernels import bin_points_numpy
from pclgcp.lattice import (
    CovariateStack,
    PointPattern,
    Window,
    aggregate_counts,
    block_mean,
    grid_counts,
    preprocess_covariates,
    read_covariate_table,
    read_pattern_csv,
    read_raster,
    variance_inflation,
    vif_filter,
    write_covariate_table,
    write_pattern_csv,
    write_raster,
)


def test_count_conservation_small():
    pts = PointPattern([[0.1, 0.2], [0.7, 0.9], [0.5, 0.5]])
    cg = grid_counts(pts, Window(0, 1, 0, 1, 2, 2), min_cells_per_axis=2)
    assert cg.total == 3


def test_window_centre_point_counted_once():
    cg = grid_counts(PointPattern([[1.0, 1.0]]), Window(0, 2, 0, 2, 2, 2), min_cells_per_axis=2)
    assert cg.total == 1 and cg.counts.tolist() == [0, 0, 0, 1]


def test_shared_edge_goes_to_larger_index():
    # window centre of [0, 3]^2 on a 3x3 grid lies on no edge; use an interior edge instead
    w = Window(0, 3, 0, 3, 3, 3)
    cg = grid_counts(PointPattern([[1.0, 1.0]]), w)
    assert cg.total == 1
    assert cg.as_raster()[1, 1] == 1


def test_outer_max_edge_kept_and_outside_dropped():
    w = Window(0, 3, 0, 3, 3, 3)
    with pytest.warns(UserWarning, match="dropped"):
        cg = grid_counts(PointPattern([[3.0, 3.0], [3.5, 1.0], [-0.1, 0.0]]), w)
    assert cg.total == 1 and cg.dropped == 2
    assert cg.as_raster()[2, 2] == 1


def test_row_zero_is_at_ymin():
    w = Window(0, 3, 0, 3, 3, 3)
    cg = grid_counts(PointPattern([[0.5, 0.1]]), w)
    assert cg.counts[0] == 1


def test_rejects_small_grid_and_zero_area():
    with pytest.raises(DataError):
        grid_counts(PointPattern([[0.5, 0.5]]), Window(0, 1, 0, 1, 2, 2))
    with pytest.raises(DataError):
        Window(0, 0, 0, 1, 3, 3)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 200), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_refinement_consistency(m, k1, k2, seed):
    rng = np.random.default_rng(seed)
    pts = PointPattern(rng.uniform([0, 0], [4, 2], size=(m, 2)))
    coarse = Window(0, 4, 0, 2, 3 * k1, 3 * k2)
    fine = coarse.refine(2)
    a = grid_counts(pts, coarse)
    b = aggregate_counts(grid_counts(pts, fine), 2)
    assert np.array_equal(a.counts, b.counts)
    assert a.total == m
    assert np.allclose(a.areas, b.areas)


def test_numpy_binning_matches_dispatch():
    rng = np.random.default_rng(1)
    xs, ys = rng.uniform(-0.1, 1.1, 500), rng.uniform(-0.1, 1.1, 500)
    xs[:5] = [0.25, 0.5, 1.0, 0.0, 0.75]
    from pclgcp.kernels import bin_points

    c1, d1 = bin_points_numpy(xs, ys, 0.0, 1.0, 0.0, 1.0, 4, 4)
    c2, d2 = bin_points(xs, ys, 0.0, 1.0, 0.0, 1.0, 4, 4)
    assert np.array_equal(c1, c2) and d1 == d2


def test_block_mean():
    v = np.arange(16.0)
    assert np.allclose(block_mean(v, 4, 4, 2), [2.5, 4.5, 10.5, 12.5])


def test_standardise_hand_values():
    s = preprocess_covariates(CovariateStack(("a",), np.array([1.0, 2, 3, 4])))
    assert np.allclose(s.values[:, 0], [-1.1619, -0.3873, 0.3873, 1.1619], atol=1e-4)
    assert s.means == (2.5,)


def test_log_then_standardise():
    s = preprocess_covariates(CovariateStack(("a",), np.exp([0.0, 1.0, 2.0])), [True])
    assert abs(s.values.mean()) < 1e-12 and abs(s.values.std(ddof=1) - 1) < 1e-12
    assert np.allclose(s.back_transform()[:, 0], [0.0, 1.0, 2.0])


def test_standardise_idempotent():
    rng = np.random.default_rng(0)
    once = preprocess_covariates(CovariateStack(("a", "b"), rng.gamma(2.0, size=(50, 2))))
    twice = preprocess_covariates(CovariateStack(once.names, once.values))
    assert np.allclose(once.values, twice.values, atol=1e-12)


def test_preprocess_errors():
    with pytest.raises(DataError, match="'a'"):
        preprocess_covariates(CovariateStack(("a",), np.array([1.0, 0.0, 2.0])), [True])
    with pytest.raises(DataError, match="constant"):
        preprocess_covariates(CovariateStack(("a",), np.ones(5)))


def _ols_vif(X, j):
    # independent regression oracle via the normal equations
    y = X[:, j]
    Z = np.column_stack([np.ones(len(y)), np.delete(X, j, axis=1)])
    beta = np.linalg.solve(Z.T @ Z, Z.T @ y)
    r = y - Z @ beta
    return 1.0 / (r @ r / np.sum((y - y.mean()) ** 2))


def test_vif_orthogonal_columns():
    X = np.array([[1.0, 1], [1, -1], [-1, 1], [-1, -1]])
    kept, vif = vif_filter(CovariateStack(("a", "b"), X), 5.0)
    assert kept == ["a", "b"]
    assert np.allclose([vif["a"], vif["b"]], 1.0)


def test_vif_near_duplicate_removed():
    rng = np.random.default_rng(2)
    z = rng.standard_normal(400)
    X = np.column_stack([z, 0.999 * z + 0.045 * rng.standard_normal(400)])
    assert np.corrcoef(X.T)[0, 1] > 0.998
    assert _ols_vif(X, 0) > 5
    kept, _ = vif_filter(CovariateStack(("a", "b"), X), 5.0)
    assert len(kept) == 1


def test_vif_equicorrelated_kept():
    rng = np.random.default_rng(3)
    C = np.full((3, 3), 0.5) + 0.5 * np.eye(3)
    X = rng.standard_normal((2000, 3)) @ np.linalg.cholesky(C).T
    expected = [_ols_vif(X, j) for j in range(3)]
    assert np.allclose(variance_inflation(X), expected)
    # equicorrelation r with two regressors: R^2 = 2r^2/(1+r) = 1/3, so VIF = 1.5
    assert np.allclose(expected, 1.5, atol=0.1)
    kept, _ = vif_filter(CovariateStack(("a", "b", "c"), X), 5.0)
    assert kept == ["a", "b", "c"]


def test_vif_order_independent():
    rng = np.random.default_rng(4)
    z = rng.standard_normal(300)
    X = np.column_stack([z, z + 0.05 * rng.standard_normal(300), rng.standard_normal(300)])
    k1, _ = vif_filter(CovariateStack(("a", "b", "c"), X))
    k2, _ = vif_filter(CovariateStack(("c", "b", "a"), X[:, ::-1]))
    assert sorted(k1) == sorted(k2)


def test_vif_exact_collinearity():
    rng = np.random.default_rng(5)
    a, b = rng.standard_normal((2, 100))
    X = np.column_stack([a, b, a + b])
    kept, vif = vif_filter(CovariateStack(("a", "b", "c"), X))
    assert len(kept) == 2 and np.isinf(max(vif.values()))


def test_file_round_trips(tmp_path):
    w = Window(0, 4, 0, 2, 3, 6)
    vals = np.arange(w.n, dtype=float) / 7
    write_raster(tmp_path / "r.csv", w, vals)
    w2, v2 = read_raster(tmp_path / "r.csv")
    assert w2 == w and np.array_equal(vals, v2)
    pts = PointPattern([[0.1, 0.2], [3.3, 1.9]])
    write_pattern_csv(tmp_path / "p.csv", pts)
    assert np.array_equal(read_pattern_csv(tmp_path / "p.csv").points, pts.points)
    st_ = CovariateStack(("a", "b"), np.arange(12.0).reshape(6, 2))
    write_covariate_table(tmp_path / "c.csv", st_)
    back = read_covariate_table(tmp_path / "c.csv")
    assert back.names == st_.names and np.array_equal(back.values, st_.values)


def test_missing_pattern_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_pattern_csv(tmp_path / "nope.csv")

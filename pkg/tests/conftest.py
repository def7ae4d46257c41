import numpy as np
import pytest

from pclgcp.igmrf import scaled_rw2d
from pclgcp.lattice import CountGrid, CovariateStack, Window
from pclgcp.model import Hyperparameters, ModelSpec, simulate
from pclgcp.priors import pc_mix_prior, pc_prec_prior


def smooth_covariates(nrow, ncol, seed=0, noise=0.3):
    """Two standardised, spatially smooth covariates (confounded with any smooth field)."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(nrow), np.arange(ncol), indexing="ij")
    sx, sy = ncol / 40.0, nrow / 20.0
    z1 = np.sin(xx / (6.0 * sx)) + noise * rng.standard_normal((nrow, ncol))
    z2 = np.cos(yy / (4.0 * sy) + xx / (9.0 * sx)) + noise * rng.standard_normal((nrow, ncol))
    Z = np.column_stack([z1.ravel(), z2.ravel()])
    Z = (Z - Z.mean(0)) / Z.std(0, ddof=1)
    return CovariateStack(("z1", "z2"), Z)


def make_spec(nrow, ncol, covariates=None, U_sigma=1.0, **kw):
    w = Window(0.0, float(ncol), 0.0, float(nrow), nrow, ncol)
    prec = scaled_rw2d(nrow, ncol)
    cov = covariates if covariates is not None else CovariateStack.empty(w.n)
    counts = CountGrid(np.zeros(w.n, int), np.ones(w.n), w)
    return ModelSpec(counts, cov, prec, pc_prec_prior(U_sigma), pc_mix_prior(prec=prec), **kw)


def simulated_spec(nrow, ncol, beta, tau=4.0, phi=0.7, seed=3, cov_seed=0, U_sigma=1.0, **kw):
    """Spec whose counts are drawn from the model itself."""
    cov = smooth_covariates(nrow, ncol, cov_seed) if len(beta) > 1 else None
    if cov is not None and cov.p != len(beta) - 1:
        cov = cov.select(cov.names[: len(beta) - 1])
    spec = make_spec(nrow, ncol, cov, U_sigma=U_sigma, **kw)
    counts, state = simulate(spec, Hyperparameters(tau, phi), beta, seed=seed)
    return spec.replace(counts=counts), state


@pytest.fixture(scope="session")
def sim_small():
    """10x20 simulated data with two covariates."""
    return simulated_spec(10, 20, [0.5, 0.5, -0.5])


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)

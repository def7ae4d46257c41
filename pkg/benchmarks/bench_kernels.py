"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints one row per kernel with the best wall time of each backend.  JIT
compilation is triggered once before timing.
"""

import argparse
import timeit
import warnings

import numpy as np
from scipy.linalg import cholesky_banded
from scipy.special import gammaln

from pclgcp import _accel, kernels
from pclgcp.igmrf import scaled_rw2d
from pclgcp.lattice import CountGrid, CovariateStack, Window
from pclgcp.mcmc import mcmc_oracle
from pclgcp.model import Hyperparameters, ModelSpec, simulate
from pclgcp.priors import pc_mix_prior, pc_prec_prior


def cases():
    rng = np.random.default_rng(0)

    xs, ys = rng.uniform(0, 100, 200_000), rng.uniform(0, 50, 200_000)
    yield "bin_points (2e5 points, 50x100)", lambda: kernels.bin_points(xs, ys, 0.0, 100.0, 0.0, 50.0, 50, 100)

    n = 5000
    y = rng.poisson(3.0, n).astype(float)
    area = np.ones(n)
    args = (y, area, np.log(area), gammaln(y + 1), rng.normal(0, 1, n))
    yield "poisson_terms (5000 cells)", lambda: kernels.poisson_terms(*args)

    m, w = 2000, 40
    band = np.vstack([np.full(m, 4.0 * w), rng.uniform(-1, 1, (w, m))])
    band[1:, -w:] = 0.0
    L = cholesky_banded(band, lower=True)
    yield f"banded_selinv (n={m}, bandwidth {w})", lambda: kernels.banded_selinv(L)

    win = Window(0.0, 5.0, 0.0, 5.0, 5, 5)
    prec = scaled_rw2d(5, 5)
    cov = CovariateStack(("z",), rng.standard_normal((25, 1)))
    spec = ModelSpec(CountGrid(np.zeros(25, int), np.ones(25), win), cov, prec, pc_prec_prior(1.0), pc_mix_prior(prec=prec))
    counts, _ = simulate(spec, Hyperparameters(4.0, 0.7), [1.0, 0.5], seed=1)
    spec = spec.replace(counts=counts)

    def chain():
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            mcmc_oracle(spec, 5000, seed=1, burn_in=1000)

    yield "mcmc_block (5x5, 6000 iterations)", chain


def best_time(fn, repeat):
    fn()  # warm-up (JIT compilation, caches)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    print(f"{'kernel':42s} {'numba [ms]':>11s} {'numpy [ms]':>11s} {'speed-up':>9s}")
    for name, fn in cases():
        kernels.USE_NUMBA = True
        fast = best_time(fn, args.repeat)
        kernels.USE_NUMBA = False
        slow = best_time(fn, args.repeat)
        print(f"{name:42s} {1e3 * fast:11.2f} {1e3 * slow:11.2f} {slow / fast:8.1f}x")
    kernels.USE_NUMBA = _accel.USE_NUMBA


if __name__ == "__main__":
    main()

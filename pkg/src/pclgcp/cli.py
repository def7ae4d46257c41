"""Command-line front end: ``pclgcp {fit,glm,rsr,simulate,prior,scale-check}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import __version__
from .config import MODES, RunConfig, dump_config, load_config
from .errors import DataError, NumericalError
from .igmrf import build_rw2d, generalized_variance, scale_to_unit_gv, scaled_rw2d
from .inference import FitOptions, _jsonable, decompose, fit, glm_fit, glm_prescreen
from .lattice import (
    CountGrid,
    CovariateStack,
    Window,
    grid_counts,
    load_covariate_rasters,
    preprocess_covariates,
    read_pattern_csv,
    read_raster,
    vif_filter,
    write_pattern_csv,
    write_raster,
)
from .model import Hyperparameters, ModelSpec, scatter_points, simulate
from .priors import pc_mix_prior, pc_prec_prior, phi_distance

log = logging.getLogger("pclgcp")

EXIT_OK, EXIT_NUMERICAL, EXIT_INPUT = 0, 1, 2


# ---------------------------------------------------------------------------
# output helpers


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def write_rows(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def read_rows(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def _bundle(cfg: RunConfig) -> dict:
    return {"version": __version__, "config": cfg.echo()}


def _tag(u: float) -> str:
    return f"U{u:g}"


# ---------------------------------------------------------------------------
# data assembly


def _window(cfg: RunConfig, pattern) -> Window:
    g = cfg.grid
    bounds = (g.xmin, g.xmax, g.ymin, g.ymax)
    if all(b is not None for b in bounds):
        return Window(g.xmin, g.xmax, g.ymin, g.ymax, g.nrow, g.ncol)
    if cfg.paths.covariates:
        rwin, _ = read_raster(cfg.paths.covariates[0])
        return Window(rwin.xmin, rwin.xmax, rwin.ymin, rwin.ymax, g.nrow, g.ncol)
    if pattern is None or len(pattern) == 0:
        raise DataError("window bounds are needed: set grid.xmin..ymax or supply covariate rasters")
    lo = pattern.points.min(axis=0)
    hi = pattern.points.max(axis=0)
    return Window(float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1]), g.nrow, g.ncol)


def load_data(cfg: RunConfig, report: dict):
    """Counts and preprocessed covariates as configured (VIF filter, optional GLM prescreen)."""
    pattern = read_pattern_csv(cfg.paths.pattern)
    window = _window(cfg, pattern)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        counts = grid_counts(pattern, window, cfg.grid.min_cells_per_axis)
    report["dropped_points"] = counts.dropped
    report["warnings"] = [str(w.message) for w in caught]
    if cfg.grid.exposure == "unit":
        counts = counts.with_unit_exposure()
    raw = load_covariate_rasters(cfg.paths.covariates, window)
    if raw.p:
        unknown = set(cfg.preprocessing.log) - set(raw.names)
        if unknown:
            raise DataError(f"log flags for unknown covariates: {sorted(unknown)}")
        cov = preprocess_covariates(raw, {nm: True for nm in cfg.preprocessing.log})
        if cfg.preprocessing.vif_threshold is not None and cov.p >= 2:
            kept, vif = vif_filter(cov, cfg.preprocessing.vif_threshold)
            report["vif"] = vif
            cov = cov.select(kept)
        if cfg.preprocessing.glm_prescreen and cov.p:
            cov, pvals = glm_prescreen(counts, cov, cfg.preprocessing.glm_alpha)
            report["glm_prescreen_p_values"] = pvals
    else:
        cov = CovariateStack.empty(window.n)
    report["covariates"] = list(cov.names)
    return counts, cov


def build_spec(cfg: RunConfig, counts: CountGrid, cov: CovariateStack, U_sigma: float, rsr: bool = False) -> ModelSpec:
    w = counts.window
    pr = cfg.priors
    prec = scaled_rw2d(w.nrow, w.ncol, pr.trend_constraints, pr.scaling_method)
    return ModelSpec(
        counts=counts,
        covariates=cov,
        prec=prec,
        prec_prior=pc_prec_prior(U_sigma, pr.alpha_sigma),
        mix_prior=pc_mix_prior(pr.U_phi, pr.alpha_phi, prec=prec, method=pr.phi_method),
        beta_prec=cfg.inference.beta_prec,
        rsr=rsr,
    )


def fit_options(cfg: RunConfig) -> FitOptions:
    i = cfg.inference
    return FitOptions(
        grid_points=i.grid_points,
        z_max=i.z_max,
        max_expansions=i.max_expansions,
        newton_tol=i.newton_tol,
        fd_step=i.fd_step,
        mean_correction=i.mean_correction,
        workers=1,
    )


# ---------------------------------------------------------------------------
# commands


def cmd_fit(cfg: RunConfig, rsr: bool = False) -> list[str]:
    out = Path(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    report: dict = {}
    counts, cov = load_data(cfg, report)
    opts = fit_options(cfg)
    prefix = "rsr_" if rsr else "fit_"

    def run(u):
        return u, fit(build_spec(cfg, counts, cov, u, rsr), opts)

    us = list(cfg.priors.U_sigma)
    if cfg.workers > 1 and len(us) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as ex:
            results = list(ex.map(run, us))
    else:
        results = [run(u) for u in us]

    from . import plots

    written = []
    ci_rows, hyper_rows = [], []
    window = counts.window
    for u, res in results:
        res.config = _bundle(cfg)
        name = f"{prefix}{_tag(u)}"
        (out / f"{name}.json").write_text(res.to_json() + "\n")
        written.append(f"{name}.json")
        dec = decompose(res)
        surfaces = {"fixed": dec.fixed, "structured": dec.structured, "error": dec.error, "eta": dec.eta}
        for sname, vals in surfaces.items():
            fname = f"{name}_{sname}.csv"
            write_raster(out / fname, window, vals)
            written.append(fname)
        plots.heatmaps(out / f"{name}_decomposition.png", window, surfaces, title=f"U_sigma = {u:g}")
        written.append(f"{name}_decomposition.png")
        for b in res.beta_marginals:
            ci_rows.append({"U_sigma": u, **{k: b[k] for k in ("name", "mean", "sd", "q025", "q975")}})
        s, p = res.sigma_marginal, res.phi_marginal
        hyper_rows.append(
            [u, s["mean"], s["q025"], s["q975"], p["mean"], p["q025"], p["q975"], res.dic, res.p_d]
        )

    write_rows(
        out / f"{prefix}intervals.csv",
        ["U_sigma", "name", "mean", "sd", "q025", "q975"],
        [[r["U_sigma"], r["name"], r["mean"], r["sd"], r["q025"], r["q975"]] for r in ci_rows],
    )
    plots.interval_plot(out / f"{prefix}intervals.png", ci_rows)
    write_rows(
        out / f"{prefix}hyper_summary.csv",
        ["U_sigma", "sigma_mean", "sigma_q025", "sigma_q975", "phi_mean", "phi_q025", "phi_q975", "dic", "p_d"],
        hyper_rows,
    )
    written += [f"{prefix}intervals.csv", f"{prefix}intervals.png", f"{prefix}hyper_summary.csv"]
    write_json(out / f"{prefix}manifest.json", {**_bundle(cfg), "data": report, "outputs": sorted(written)})
    return written


def cmd_glm(cfg: RunConfig) -> list[str]:
    out = Path(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    report: dict = {}
    counts, cov = load_data(cfg, report)
    res = glm_fit(counts, cov)
    write_json(out / "glm.json", {**_bundle(cfg), "data": report, "result": res.to_dict()})
    write_rows(
        out / "glm_coefficients.csv",
        ["name", "estimate", "se", "lower", "upper", "p_value"],
        [[n, c, s, lo, hi, pv] for n, c, s, lo, hi, pv in zip(res.names, res.coef, res.se, res.lower, res.upper, res.p_values())],
    )
    return ["glm.json", "glm_coefficients.csv"]


def _synthetic_covariates(window: Window, k: int, rng, cycles: float) -> list[np.ndarray]:
    """Smooth random surfaces: sums of four random plane waves with about ``cycles`` periods across the window."""
    xc, yc = window.cell_centres()
    span = max(window.xmax - window.xmin, window.ymax - window.ymin)
    out = []
    for _ in range(k):
        z = np.zeros(window.n)
        for _ in range(4):
            freq = rng.normal(size=2) * 2 * np.pi * cycles / span
            z += np.cos(freq[0] * xc + freq[1] * yc + rng.uniform(0, 2 * np.pi))
        out.append(z)
    return out


def cmd_simulate(cfg: RunConfig) -> list[str]:
    out = Path(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    g, sc = cfg.grid, cfg.simulate
    bounds = [b if b is not None else d for b, d in zip((g.xmin, g.xmax, g.ymin, g.ymax), (0.0, float(g.ncol), 0.0, float(g.nrow)))]
    window = Window(*bounds, g.nrow, g.ncol)
    rng = np.random.default_rng(cfg.seed)
    written = []
    if cfg.paths.covariates:
        raw = load_covariate_rasters(cfg.paths.covariates, window)
    else:
        cols = _synthetic_covariates(window, len(sc.beta), rng, sc.covariate_cycles)
        names = tuple(f"z{j + 1}" for j in range(len(cols)))
        raw = CovariateStack(names, np.column_stack(cols) if cols else np.zeros((window.n, 0)))
        for nm, col in zip(names, cols):
            write_raster(out / f"{nm}.csv", window, col)
            written.append(f"{nm}.csv")
    if raw.p != len(sc.beta):
        raise DataError(f"{len(sc.beta)} coefficients for {raw.p} covariates")
    cov = preprocess_covariates(raw) if raw.p else raw
    areas = np.full(window.n, window.cell_area if g.exposure == "area" else 1.0)
    counts = CountGrid(np.zeros(window.n, dtype=int), areas, window)
    spec = build_spec(cfg, counts, cov, cfg.priors.U_sigma[0])
    hyper = Hyperparameters(sc.tau, sc.phi)
    grid, state = simulate(spec, hyper, [sc.intercept, *sc.beta], cfg.seed)
    pattern = scatter_points(grid, cfg.seed + 1)
    write_pattern_csv(out / "pattern.csv", pattern)
    write_raster(out / "counts.csv", window, grid.counts)
    a, b = hyper.weights
    truth = {
        **_bundle(cfg),
        "intercept": sc.intercept,
        "beta": dict(zip(cov.names, sc.beta)),
        "tau": sc.tau,
        "sigma": hyper.sigma,
        "phi": sc.phi,
        "window": [window.xmin, window.xmax, window.ymin, window.ymax, window.nrow, window.ncol],
        "u_star": state.u_star,
        "v": state.v,
        "structured": a * state.u_star,
        "error": b * state.v,
        "eta": spec.design @ np.array([sc.intercept, *sc.beta]) + a * state.u_star + b * state.v,
        "n_points": len(pattern),
    }
    write_json(out / "truth.json", truth)
    (out / "config.ini").write_text(dump_config(cfg))
    return written + ["pattern.csv", "counts.csv", "truth.json", "config.ini"]


def cmd_prior(cfg: RunConfig) -> list[str]:
    out = Path(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    from . import plots

    g, pr = cfg.grid, cfg.priors
    prec = scaled_rw2d(g.nrow, g.ncol, pr.trend_constraints, pr.scaling_method)
    mix = pc_mix_prior(pr.U_phi, pr.alpha_phi, prec=prec, method=pr.phi_method)
    written = []
    summary = {**_bundle(cfg), "sigma": [], "phi": {}}
    for u in pr.U_sigma:
        pp = pc_prec_prior(u, pr.alpha_sigma)
        sig = np.linspace(0.0, pp.quantile_sigma(0.999), 400)
        dens = pp.density_sigma(sig)
        fname = f"prior_sigma_{_tag(u)}.csv"
        write_rows(out / fname, ["sigma", "density"], zip(sig, dens))
        plots.density_plot(out / f"prior_sigma_{_tag(u)}.png", sig, dens, "sigma")
        written += [fname, f"prior_sigma_{_tag(u)}.png"]
        summary["sigma"].append({"U_sigma": u, "alpha_sigma": pr.alpha_sigma, "lambda": pp.lam,
                                 "median": float(pp.quantile_sigma(0.5))})
    l, dl = mix.logit_density_table.T
    phi = expit(l)
    write_rows(out / "prior_phi_logit.csv", ["logit_phi", "density"], zip(l, dl))
    inner = (phi > 1e-6) & (phi < 1 - 1e-6)
    dphi = mix.density_phi(phi[inner])
    write_rows(out / "prior_phi.csv", ["phi", "density"], zip(phi[inner], dphi))
    plots.density_plot(out / "prior_phi.png", phi[inner], dphi, "phi")
    written += ["prior_phi_logit.csv", "prior_phi.csv", "prior_phi.png"]
    summary["phi"] = {
        "U_phi": mix.U_phi, "alpha_phi": mix.alpha_phi, "theta": mix.theta, "d1": mix.d1, "method": mix.method,
        "cdf_at_U": mix.cdf(mix.U_phi), "distance_table": mix.d_table,
    }
    write_json(out / "prior_summary.json", summary)
    return written + ["prior_summary.json"]


def scale_report(nrow: int, ncol: int, trend: bool = False) -> dict:
    rows = {}
    for label, (nr, nc) in (("base", (nrow, ncol)), ("refined", (2 * nrow, 2 * ncol))):
        R = build_rw2d(nr, nc, trend)
        entry = {"nrow": nr, "ncol": nc}
        for method in ("exact", "torus"):
            sp_ = scale_to_unit_gv(R, method)
            entry[f"gv_{method}"] = sp_.gv_before
            entry[f"gv_scaled_{method}"] = generalized_variance(sp_.structure, method)[0]
        rows[label] = entry
    ratio = rows["refined"]["gv_exact"] / rows["base"]["gv_exact"]
    return {
        **rows,
        "ratio_exact": ratio,
        "ratio_torus": rows["refined"]["gv_torus"] / rows["base"]["gv_torus"],
        "k_squared": 4.0,
        "scaled_unit_exact": all(abs(rows[k]["gv_scaled_exact"] - 1.0) < 1e-8 for k in rows),
        "torus_vs_exact_base": rows["base"]["gv_torus"] / rows["base"]["gv_exact"],
    }


def cmd_scale_check(cfg: RunConfig) -> list[str]:
    out = Path(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    rep = scale_report(cfg.grid.nrow, cfg.grid.ncol, cfg.priors.trend_constraints)
    prec = scaled_rw2d(cfg.grid.nrow, cfg.grid.ncol, cfg.priors.trend_constraints)
    rep["phi_distance_half"] = {m: float(phi_distance(0.5, prec, m)) for m in ("exact", "torus")}
    write_json(out / "scale_check.json", {**_bundle(cfg), "report": rep})
    return ["scale_check.json"]


COMMANDS = {
    "fit": cmd_fit,
    "rsr": lambda cfg: cmd_fit(cfg, rsr=True),
    "glm": cmd_glm,
    "simulate": cmd_simulate,
    "prior": cmd_prior,
    "scale-check": cmd_scale_check,
}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pclgcp", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in MODES:
        s = sub.add_parser(name)
        s.add_argument("--config", help="INI configuration file")
        s.add_argument("--seed", type=int)
        s.add_argument("--workers", type=int)
        s.add_argument("--out", help="output directory")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def _error_payload(kind: str, exc: BaseException, path=None) -> dict:
    d = {"error": kind, "type": type(exc).__name__, "message": str(exc), "version": __version__}
    if path is not None:
        d["path"] = str(path)
    return d


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out_dir = None
    try:
        cfg = load_config(args.config, {"seed": args.seed, "workers": args.workers, "out": args.out})
        cfg.mode = args.command
        out_dir = Path(cfg.paths.out)
        cfg.validate()
        written = COMMANDS[args.command](cfg)
        print(json.dumps({"status": "ok", "command": args.command, "outputs": sorted(written)}))
        return EXIT_OK
    except FileNotFoundError as exc:
        payload = _error_payload("input", exc, exc.filename or (exc.args[0] if exc.args else None))
        code = EXIT_INPUT
    except DataError as exc:
        payload = _error_payload("input", exc)
        code = EXIT_INPUT
    except NumericalError as exc:
        payload = _error_payload("numerical", exc)
        code = EXIT_NUMERICAL
    if out_dir is not None:
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            write_json(out_dir / "error.json", payload)
        except OSError:
            pass
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

import json
import math
from pathlib import Path

import numpy as np
import pytest

from pclgcp.cli import main, read_json, read_rows
from pclgcp.config import RunConfig, dump_config, load_config
from pclgcp.errors import DataError
from pclgcp.lattice import read_raster
from pclgcp import plots


def write_ini(path: Path, text: str) -> Path:
    path.write_text(text)
    return path


# ---------------------------------------------------------------------------
# configuration


def test_dump_load_round_trip(tmp_path):
    cfg = RunConfig(seed=7)
    cfg.priors.U_sigma = (0.3, 1.5)
    cfg.priors.alpha_phi = 0.7
    cfg.preprocessing.log = ("elev",)
    cfg.preprocessing.vif_threshold = None
    cfg.inference.mean_correction = False
    cfg.paths.out = str(tmp_path / "o")
    back = load_config(write_ini(tmp_path / "c.ini", dump_config(cfg)))
    assert back == cfg


@pytest.mark.parametrize(
    "text, needle",
    [("[nonsense]\na = 1\n", "section"), ("[grid]\nnrows = 3\n", "nrows"), ("[grid]\nnrow = three\n", "grid.nrow")],
)
def test_bad_config_is_rejected(tmp_path, text, needle):
    with pytest.raises(DataError, match=needle):
        load_config(write_ini(tmp_path / "c.ini", text))


def test_paths_resolve_against_config_dir(tmp_path):
    (tmp_path / "sub").mkdir()
    ini = write_ini(tmp_path / "sub" / "c.ini", "[paths]\npattern = pts.csv\ncovariates = a.csv, /abs/b.csv\n")
    cfg = load_config(ini)
    assert cfg.paths.pattern == str(tmp_path / "sub" / "pts.csv")
    assert cfg.paths.covariates == (str(tmp_path / "sub" / "a.csv"), "/abs/b.csv")


def test_inline_comments(tmp_path):
    cfg = load_config(write_ini(tmp_path / "c.ini", "[priors]\nalpha_phi = auto   ; floor + 1%\nU_phi = 0.4 ; upper\n"))
    assert cfg.priors.alpha_phi is None and cfg.priors.U_phi == 0.4


def test_workers_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("PCLGCP_WORKERS", "3")
    assert load_config(None, {"workers": 1}).workers == 3
    monkeypatch.setenv("PCLGCP_WORKERS", "many")
    with pytest.raises(DataError):
        load_config()


def test_echo_ignores_workers():
    a, b = RunConfig(workers=1), RunConfig(workers=4)
    assert a.echo() == b.echo() and "workers" not in a.echo()


# ---------------------------------------------------------------------------
# end to end


SIM_INI = """\
[run]
seed = 4
[grid]
nrow = 8
ncol = 12
[simulate]
intercept = 1.0
beta = 0.5, -0.5
tau = 4
phi = 0.7
"""


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    root = tmp_path_factory.mktemp("sim")
    ini = write_ini(root / "sim.ini", SIM_INI)
    assert main(["simulate", "--config", str(ini), "--out", str(root / "data")]) == 0
    return root / "data"


def fit_ini(root: Path, data: Path, us: str = "0.5, 1", extra: str = "") -> Path:
    text = (
        f"[paths]\npattern = {data / 'pattern.csv'}\ncovariates = {data / 'z1.csv'}, {data / 'z2.csv'}\n"
        f"[grid]\nnrow = 8\nncol = 12\n[priors]\nU_sigma = {us}\n[inference]\ngrid_points = 5\n{extra}"
    )
    return write_ini(root / "fit.ini", text)


def test_simulate_outputs(simulated):
    truth = read_json(simulated / "truth.json")
    assert truth["beta"] == {"z1": 0.5, "z2": -0.5}
    window, counts = read_raster(simulated / "counts.csv")
    assert (window.nrow, window.ncol) == (8, 12)
    assert counts.sum() == truth["n_points"] == len(read_rows(simulated / "pattern.csv"))
    eta = np.asarray(truth["eta"])
    assert eta.size == 96 and np.all(np.isfinite(eta))


def test_fit_pipeline(simulated, tmp_path):
    out = tmp_path / "out"
    assert main(["fit", "--config", str(fit_ini(tmp_path, simulated)), "--out", str(out)]) == 0
    manifest = read_json(out / "fit_manifest.json")
    for u in ("U0.5", "U1"):
        for suffix in (".json", "_fixed.csv", "_structured.csv", "_error.csv", "_eta.csv", "_decomposition.png"):
            assert (out / f"fit_{u}{suffix}").exists()
    assert (out / "fit_intervals.csv").exists() and (out / "fit_intervals.png").exists()
    rows = read_rows(out / "fit_hyper_summary.csv")
    assert [float(r["U_sigma"]) for r in rows] == [0.5, 1.0]
    assert all(float(r["sigma_q025"]) < float(r["sigma_mean"]) < float(r["sigma_q975"]) for r in rows)
    res = read_json(out / "fit_U1.json")
    assert res["config"]["config"] == manifest["config"]
    names = [m["name"] for m in res["beta_marginals"]]
    assert names == ["(Intercept)", "z1", "z2"]
    # smoke test: the simulated coefficients sit inside the fitted intervals
    truth = read_json(simulated / "truth.json")["beta"]
    for m in res["beta_marginals"][1:]:
        assert m["q025"] < truth[m["name"]] < m["q975"]


def test_fit_rerun_is_byte_identical(simulated, tmp_path):
    ini = fit_ini(tmp_path, simulated, us="1")
    out = tmp_path / "out"
    assert main(["fit", "--config", str(ini), "--out", str(out)]) == 0
    first = {p.name: p.read_bytes() for p in out.iterdir() if p.suffix in (".json", ".csv")}
    assert main(["fit", "--config", str(ini), "--out", str(out), "--workers", "2"]) == 0
    second = {p.name: p.read_bytes() for p in out.iterdir() if p.suffix in (".json", ".csv")}
    assert first == second


def test_default_sweep_has_six_fits(simulated, tmp_path):
    ini = fit_ini(tmp_path, simulated, us="0.05, 0.1, 0.2, 0.5, 1, 2")
    default = load_config(ini)
    assert default.priors.U_sigma == RunConfig().priors.U_sigma
    out = tmp_path / "out"
    assert main(["fit", "--config", str(ini), "--out", str(out), "--workers", "2"]) == 0
    assert len(list(out.glob("fit_U*.json"))) == 6
    assert len(read_rows(out / "fit_hyper_summary.csv")) == 6


def test_glm_and_rsr_commands(simulated, tmp_path):
    ini = fit_ini(tmp_path, simulated, us="1")
    out = tmp_path / "out"
    assert main(["glm", "--config", str(ini), "--out", str(out)]) == 0
    assert main(["rsr", "--config", str(ini), "--out", str(out)]) == 0
    glm = read_json(out / "glm.json")
    rows = read_rows(out / "glm_coefficients.csv")
    assert len(rows) == 3
    rsr = read_json(out / "rsr_U1.json")
    assert rsr["diagnostics"]["rsr"] is True
    # the restricted fit keeps the fixed effects close to the regression fit
    z1 = next(m for m in rsr["beta_marginals"] if m["name"] == "z1")
    assert abs(z1["mean"] - glm["result"]["beta_marginals"][1]["mean"]) < 0.25


def test_missing_covariate_is_an_input_error(simulated, tmp_path):
    ini = write_ini(
        tmp_path / "bad.ini",
        f"[paths]\npattern = {simulated / 'pattern.csv'}\ncovariates = {simulated / 'z1.csv'}, nowhere.csv\n",
    )
    out = tmp_path / "out"
    assert main(["fit", "--config", str(ini), "--out", str(out)]) == 2
    err = json.loads((out / "error.json").read_text())
    assert err["error"] == "input" and err["path"].endswith("nowhere.csv")


def test_bad_mode_value_exits_two(tmp_path):
    ini = write_ini(tmp_path / "c.ini", "[priors]\nU_sigma = -1\n")
    assert main(["prior", "--config", str(ini), "--out", str(tmp_path / "o")]) == 2


# ---------------------------------------------------------------------------
# prior and scale reports


@pytest.fixture(scope="module")
def prior_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("prior")
    ini = write_ini(root / "p.ini", "[grid]\nnrow = 8\nncol = 12\n[priors]\nU_sigma = 0.5, 1\n")
    assert main(["prior", "--config", str(ini), "--out", str(root / "o")]) == 0
    return root / "o"


def test_phi_prior_table_integrates_to_one(prior_dir):
    t = np.array([(float(r["logit_phi"]), float(r["density"])) for r in read_rows(prior_dir / "prior_phi_logit.csv")])
    assert abs(np.trapezoid(t[:, 1], t[:, 0]) - 1) < 1e-4


def test_sigma_prior_table_peaks_at_zero(prior_dir):
    t = np.array([(float(r["sigma"]), float(r["density"])) for r in read_rows(prior_dir / "prior_sigma_U1.csv")])
    assert t[0, 0] == 0 and np.argmax(t[:, 1]) == 0
    assert np.all(np.diff(t[:, 1]) < 0)
    summary = read_json(prior_dir / "prior_summary.json")
    # the mixing prior reports its own calibration at the threshold
    assert math.isclose(summary["phi"]["cdf_at_U"], summary["phi"]["alpha_phi"], abs_tol=1e-3)
    assert [s["U_sigma"] for s in summary["sigma"]] == [0.5, 1.0]


def test_scale_check_report(tmp_path):
    ini = write_ini(tmp_path / "s.ini", "[grid]\nnrow = 16\nncol = 16\n")
    assert main(["scale-check", "--config", str(ini), "--out", str(tmp_path)]) == 0
    rep = read_json(tmp_path / "scale_check.json")["report"]
    assert 3.4 <= rep["ratio_exact"] <= 4.6
    assert rep["scaled_unit_exact"] is True
    assert abs(rep["base"]["gv_scaled_exact"] - 1) < 1e-8


# ---------------------------------------------------------------------------
# plots


def test_density_plot_is_deterministic(tmp_path):
    x = np.linspace(0, 3, 50)
    plots.density_plot(tmp_path / "a.png", x, np.exp(-x), "sigma")
    plots.density_plot(tmp_path / "b.png", x, np.exp(-x), "sigma")
    a, b = (tmp_path / "a.png").read_bytes(), (tmp_path / "b.png").read_bytes()
    assert a[:8] == b"\x89PNG\r\n\x1a\n" and a == b

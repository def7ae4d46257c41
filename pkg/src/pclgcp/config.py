"""Run configuration read from an INI file (``configparser``)."""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import DataError

MODES = ("fit", "glm", "rsr", "simulate", "prior", "scale-check")
DEFAULT_U_SIGMA = (0.05, 0.1, 0.2, 0.5, 1.0, 2.0)
WORKERS_ENV = "PCLGCP_WORKERS"


@dataclass
class PathsConfig:
    pattern: str = ""
    covariates: tuple = ()
    out: str = "out"


@dataclass
class GridConfig:
    nrow: int = 20
    ncol: int = 40
    xmin: float | None = None
    xmax: float | None = None
    ymin: float | None = None
    ymax: float | None = None
    exposure: str = "area"  # "area" or "unit"
    min_cells_per_axis: int = 3


@dataclass
class PriorConfig:
    U_sigma: tuple = DEFAULT_U_SIGMA
    alpha_sigma: float = 0.01
    U_phi: float = 0.5
    alpha_phi: float | None = None
    phi_method: str = "exact"
    scaling_method: str = "exact"
    trend_constraints: bool = False


@dataclass
class PreprocessConfig:
    log: tuple = ()
    vif_threshold: float | None = 5.0
    glm_prescreen: bool = False
    glm_alpha: float = 0.05


@dataclass
class InferenceConfig:
    grid_points: int = 9
    z_max: float = 3.0
    max_expansions: int = 3
    newton_tol: float = 1e-8
    fd_step: float = 0.1
    beta_prec: float = 1e-3
    mean_correction: bool = True


@dataclass
class SimulateConfig:
    intercept: float = 0.5
    beta: tuple = (0.5, -0.5)
    tau: float = 4.0
    phi: float = 0.7
    covariate_cycles: float = 1.5


@dataclass
class RunConfig:
    mode: str = "fit"
    seed: int = 1
    workers: int = 1
    paths: PathsConfig = field(default_factory=PathsConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    priors: PriorConfig = field(default_factory=PriorConfig)
    preprocessing: PreprocessConfig = field(default_factory=PreprocessConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)

    def validate(self) -> "RunConfig":
        if self.mode not in MODES:
            raise DataError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        if not self.priors.U_sigma or any(u <= 0 for u in self.priors.U_sigma):
            raise DataError("U_sigma list must be non-empty and positive")
        if self.grid.exposure not in ("area", "unit"):
            raise DataError("exposure must be 'area' or 'unit'")
        if self.workers < 1:
            raise DataError("workers must be at least 1")
        if self.mode in ("fit", "rsr", "glm"):
            if not self.paths.pattern:
                raise DataError("paths.pattern is required")
            for p in (self.paths.pattern, *self.paths.covariates):
                if not Path(p).exists():
                    raise FileNotFoundError(p)
        return self

    def echo(self) -> dict:
        """Resolved settings that can change results (the worker count cannot)."""
        d = asdict(self)
        d.pop("workers")
        return d


def _convert(raw: str, default, name: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if default and isinstance(default[0], float):
                return tuple(float(s) for s in items)
            return tuple(items)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float) or default is None:
            if raw.lower() in ("", "none", "auto"):
                return None
            return float(raw)
    except ValueError as exc:
        raise DataError(f"bad value for {name}: {raw!r}") from exc
    return raw


# fields whose default is None but which hold floats, or tuples that start empty
_FLOAT_TUPLES = {("priors", "U_sigma"), ("simulate", "beta")}


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read an INI file into a RunConfig.  Section ``[run]`` holds mode, seed and workers."""
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(str(path))
        parser = configparser.ConfigParser(inline_comment_prefixes=(";",))
        parser.optionxform = str
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise DataError(f"{path}: {exc}") from exc
        base = path.parent
        for section in parser.sections():
            target = cfg if section == "run" else getattr(cfg, section, None)
            if target is None or not hasattr(target, "__dataclass_fields__"):
                raise DataError(f"{path}: unknown section [{section}]")
            names = {f.name: f for f in fields(target) if not hasattr(getattr(target, f.name), "__dataclass_fields__")}
            for key, raw in parser.items(section):
                if key not in names:
                    raise DataError(f"{path}: unknown key {key!r} in [{section}]")
                default = getattr(target, key)
                if (section, key) in _FLOAT_TUPLES:
                    default = (0.0,)
                value = _convert(raw, default, f"{section}.{key}")
                if section == "paths" and key in ("pattern", "out") and value:
                    value = str(_resolve(base, value))
                if section == "paths" and key == "covariates":
                    value = tuple(str(_resolve(base, v)) for v in value)
                setattr(target, key, value)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "out":
            cfg.paths.out = str(value)
        else:
            setattr(cfg, key, value)
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            cfg.workers = int(env)
        except ValueError as exc:
            raise DataError(f"{WORKERS_ENV} must be an integer") from exc
    return cfg


def _resolve(base: Path, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


def dump_config(cfg: RunConfig) -> str:
    """INI text that load_config reads back to an equal RunConfig."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    parser["run"] = {"mode": cfg.mode, "seed": str(cfg.seed), "workers": str(cfg.workers)}
    for section in ("paths", "grid", "priors", "preprocessing", "inference", "simulate"):
        obj = getattr(cfg, section)
        out = {}
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                out[f.name] = ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            elif v is None:
                out[f.name] = "none"
            elif isinstance(v, float):
                out[f.name] = repr(v)
            else:
                out[f.name] = str(v)
        parser[section] = out
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()

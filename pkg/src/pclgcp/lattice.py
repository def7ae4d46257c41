"""Point patterns, count lattices and raster covariates."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .kernels import bin_points

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Window:
    xmin: float
    xmax: float
    ymin: float
    ymax: float
    nrow: int
    ncol: int

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise DataError(f"zero-area window: x=[{self.xmin}, {self.xmax}], y=[{self.ymin}, {self.ymax}]")
        if self.nrow < 1 or self.ncol < 1:
            raise DataError("grid dimensions must be positive")

    @property
    def n(self) -> int:
        return self.nrow * self.ncol

    @property
    def cell_area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin) / self.n

    def refine(self, k: int) -> "Window":
        return Window(self.xmin, self.xmax, self.ymin, self.ymax, self.nrow * k, self.ncol * k)

    def cell_centres(self) -> tuple[np.ndarray, np.ndarray]:
        """Centre coordinates of every cell in row-major order (row 0 at ymin)."""
        dx = (self.xmax - self.xmin) / self.ncol
        dy = (self.ymax - self.ymin) / self.nrow
        xc = self.xmin + dx * (np.arange(self.ncol) + 0.5)
        yc = self.ymin + dy * (np.arange(self.nrow) + 0.5)
        gx, gy = np.meshgrid(xc, yc)
        return gx.ravel(), gy.ravel()


@dataclass(frozen=True)
class PointPattern:
    points: np.ndarray  # (m, 2)
    label: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 2)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class CountGrid:
    counts: np.ndarray
    areas: np.ndarray
    window: Window
    dropped: int = 0

    def __post_init__(self):
        counts = np.asarray(self.counts)
        areas = np.asarray(self.areas, dtype=float)
        if counts.shape != (self.window.n,) or areas.shape != (self.window.n,):
            raise DataError("counts and areas must have one entry per cell")
        if np.any(counts < 0) or not np.all(np.equal(np.mod(counts, 1), 0)):
            raise DataError("counts must be non-negative integers")
        if np.any(areas <= 0):
            raise DataError("cell areas must be positive")
        object.__setattr__(self, "counts", counts.astype(np.int64))
        object.__setattr__(self, "areas", areas)

    @property
    def n(self) -> int:
        return self.window.n

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def with_unit_exposure(self) -> "CountGrid":
        return CountGrid(self.counts, np.ones(self.n), self.window, self.dropped)

    def as_raster(self) -> np.ndarray:
        return self.counts.reshape(self.window.nrow, self.window.ncol)


def grid_counts(pattern: PointPattern, window: Window, min_cells_per_axis: int = 3) -> CountGrid:
    """Bin a point pattern onto the lattice of ``window``.

    Cells are half-open: a point on an edge shared by two cells goes to the cell
    with the larger index along that axis; points on the outer max edges go to the
    last cell.  Points outside the window are dropped and counted.

    ``min_cells_per_axis`` defaults to 3, the smallest lattice on which the
    second-order stencil is defined.
    """
    if window.nrow < min_cells_per_axis or window.ncol < min_cells_per_axis:
        raise DataError(f"grid {window.nrow}x{window.ncol} is smaller than {min_cells_per_axis} cells per axis")
    pts = pattern.points
    counts, dropped = bin_points(
        pts[:, 0], pts[:, 1], window.xmin, window.xmax, window.ymin, window.ymax, window.nrow, window.ncol
    )
    if dropped:
        warnings.warn(f"{dropped} point(s) outside the window were dropped", stacklevel=2)
    return CountGrid(counts, np.full(window.n, window.cell_area), window, dropped)


def aggregate_counts(grid: CountGrid, k: int) -> CountGrid:
    """Sum counts over k-by-k blocks (fine grid to coarse grid)."""
    w = grid.window
    if w.nrow % k or w.ncol % k:
        raise DataError(f"grid {w.nrow}x{w.ncol} is not divisible by {k}")
    coarse = Window(w.xmin, w.xmax, w.ymin, w.ymax, w.nrow // k, w.ncol // k)
    c = grid.counts.reshape(coarse.nrow, k, coarse.ncol, k).sum(axis=(1, 3)).ravel()
    a = grid.areas.reshape(coarse.nrow, k, coarse.ncol, k).sum(axis=(1, 3)).ravel()
    return CountGrid(c, a, coarse, grid.dropped)


def block_mean(values: np.ndarray, nrow: int, ncol: int, k: int) -> np.ndarray:
    """Average a row-major raster over k-by-k blocks."""
    v = np.asarray(values, dtype=float).reshape(nrow, ncol)
    if nrow % k or ncol % k:
        raise DataError(f"raster {nrow}x{ncol} is not divisible by {k}")
    return v.reshape(nrow // k, k, ncol // k, k).mean(axis=(1, 3)).ravel()


# ---------------------------------------------------------------------------
# covariates


@dataclass(frozen=True)
class CovariateStack:
    names: tuple[str, ...]
    values: np.ndarray  # (n, p)
    transform_log: tuple[bool, ...] = ()
    means: tuple[float, ...] = ()
    sds: tuple[float, ...] = ()

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        names = tuple(self.names)
        if vals.shape[1] != len(names):
            raise DataError(f"{len(names)} names for {vals.shape[1]} covariate columns")
        if len(set(names)) != len(names):
            raise DataError("covariate names must be unique")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "names", names)
        if not self.transform_log:
            object.__setattr__(self, "transform_log", (False,) * len(names))

    @property
    def p(self) -> int:
        return len(self.names)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def select(self, names) -> "CovariateStack":
        idx = [self.names.index(nm) for nm in names]
        pick = lambda t: tuple(t[i] for i in idx) if t else ()
        return CovariateStack(
            tuple(names), self.values[:, idx], pick(self.transform_log), pick(self.means), pick(self.sds)
        )

    def back_transform(self) -> np.ndarray:
        """Undo standardisation (not the log transform)."""
        if not self.means:
            return self.values.copy()
        return self.values * np.asarray(self.sds) + np.asarray(self.means)

    @classmethod
    def empty(cls, n: int) -> "CovariateStack":
        return cls((), np.zeros((n, 0)))


def preprocess_covariates(raw: CovariateStack, log_flags=None) -> CovariateStack:
    """Log-transform flagged columns, then centre and scale every column.

    The standard deviation uses divisor n - 1.  Means and standard deviations are
    recorded (after any log transform) for back-transformation of effects.
    """
    if log_flags is None:
        log_flags = (False,) * raw.p
    if isinstance(log_flags, dict):
        log_flags = tuple(bool(log_flags.get(nm, False)) for nm in raw.names)
    log_flags = tuple(bool(f) for f in log_flags)
    if len(log_flags) != raw.p:
        raise DataError("one log flag per covariate required")
    vals = raw.values.copy()
    for j, (name, flag) in enumerate(zip(raw.names, log_flags)):
        if flag:
            if np.any(vals[:, j] <= 0):
                raise DataError(f"covariate {name!r} has non-positive values and cannot be log-transformed")
            vals[:, j] = np.log(vals[:, j])
    means = vals.mean(axis=0)
    sds = vals.std(axis=0, ddof=1)
    for name, sd, col in zip(raw.names, sds, vals.T):
        if not np.isfinite(sd) or sd <= 1e-12 * max(1.0, np.abs(col).max()):
            raise DataError(f"covariate {name!r} is constant")
    vals = (vals - means) / sds
    return CovariateStack(raw.names, vals, log_flags, tuple(float(m) for m in means), tuple(float(s) for s in sds))


def variance_inflation(values: np.ndarray) -> np.ndarray:
    """VIF of each column given all the others (with an intercept)."""
    values = np.asarray(values, dtype=float)
    n, p = values.shape
    out = np.empty(p)
    for j in range(p):
        y = values[:, j]
        others = np.column_stack([np.ones(n), np.delete(values, j, axis=1)])
        coef, *_ = np.linalg.lstsq(others, y, rcond=None)
        resid = y - others @ coef
        tss = np.sum((y - y.mean()) ** 2)
        r2 = 1.0 - resid @ resid / tss if tss > 0 else 1.0
        out[j] = np.inf if r2 >= 1.0 - 1e-12 else 1.0 / (1.0 - r2)
    return out


def vif_filter(stack: CovariateStack, threshold: float = 5.0):
    """Greedy removal of the covariate with the largest VIF until all are below ``threshold``.

    Returns ``(kept_names, vif)`` where ``vif`` maps each kept name to its final
    VIF and each removed name to the VIF it had when removed.  Ties go to the name
    that sorts first, so the result does not depend on column order.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    if stack.p < 2:
        raise DataError("vif_filter needs at least two covariates")
    if stack.n <= stack.p:
        raise DataError("vif_filter needs more cells than covariates")
    order = sorted(range(stack.p), key=lambda j: stack.names[j])
    names = [stack.names[j] for j in order]
    values = stack.values[:, order]
    report: dict[str, float] = {}
    while len(names) > 1:
        vifs = variance_inflation(values)
        top = np.max(vifs)
        if top < threshold:
            break
        if np.isinf(top):
            j = int(np.flatnonzero(np.isinf(vifs))[0])
            log.info("covariate %s is exactly collinear with the others; removed", names[j])
        else:
            j = int(np.flatnonzero(vifs >= top * (1 - 1e-9))[0])
        report[names[j]] = float(vifs[j])
        del names[j]
        values = np.delete(values, j, axis=1)
    if len(names) == 1:
        final = {names[0]: 1.0}
    else:
        final = dict(zip(names, (float(v) for v in variance_inflation(values))))
    kept = [nm for nm in stack.names if nm in final]
    report.update(final)
    return kept, report


# ---------------------------------------------------------------------------
# file formats


def read_pattern_csv(path, label: str | None = None) -> PointPattern:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"x", "y"} <= set(reader.fieldnames):
            raise DataError(f"{path}: expected a header with columns x,y")
        pts = [(float(r["x"]), float(r["y"])) for r in reader]
    return PointPattern(np.array(pts, dtype=float).reshape(-1, 2), label if label is not None else path.stem)


def write_pattern_csv(path, pattern: PointPattern) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y"])
        for x, y in pattern.points:
            w.writerow([repr(float(x)), repr(float(y))])


_RASTER_KEYS = ("nrow", "ncol", "xmin", "xmax", "ymin", "ymax")


def read_raster(path) -> tuple[Window, np.ndarray]:
    """Read a raster: six ``key value`` header lines, then row-major values (row 0 at ymin)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    header: dict[str, float] = {}
    values: list[float] = []
    with path.open() as fh:
        for line in fh:
            parts = line.replace(",", " ").split()
            if not parts:
                continue
            if len(header) < len(_RASTER_KEYS) and parts[0].lower() in _RASTER_KEYS:
                header[parts[0].lower()] = float(parts[1])
                continue
            values.extend(float(v) for v in parts)
    missing = [k for k in _RASTER_KEYS if k not in header]
    if missing:
        raise DataError(f"{path}: raster header missing {missing}")
    win = Window(header["xmin"], header["xmax"], header["ymin"], header["ymax"], int(header["nrow"]), int(header["ncol"]))
    if len(values) != win.n:
        raise DataError(f"{path}: expected {win.n} values, found {len(values)}")
    return win, np.array(values)


def write_raster(path, window: Window, values) -> None:
    vals = np.asarray(values, dtype=float).reshape(window.nrow, window.ncol)
    with Path(path).open("w") as fh:
        fh.write(f"nrow {window.nrow}\nncol {window.ncol}\n")
        fh.write(f"xmin {window.xmin!r}\nxmax {window.xmax!r}\nymin {window.ymin!r}\nymax {window.ymax!r}\n")
        for row in vals:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_covariate_table(path) -> CovariateStack:
    """Wide CSV keyed by cell index: header ``cell,<name1>,<name2>,...``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "cell":
            raise DataError(f"{path}: first column must be 'cell'")
        rows = [[float(v) for v in r] for r in reader if r]
    arr = np.array(rows)
    order = np.argsort(arr[:, 0])
    if not np.array_equal(arr[order, 0], np.arange(arr.shape[0])):
        raise DataError(f"{path}: cell indices must be 0..n-1")
    return CovariateStack(tuple(header[1:]), arr[order, 1:])


def write_covariate_table(path, stack: CovariateStack) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell", *stack.names])
        for i, row in enumerate(stack.values):
            w.writerow([i, *(repr(float(v)) for v in row)])


def load_covariate_rasters(paths, window: Window) -> CovariateStack:
    """Read one raster per covariate and bring each to ``window``'s grid by block means."""
    names, cols = [], []
    for p in paths:
        p = Path(p)
        rwin, vals = read_raster(p)
        if (rwin.xmin, rwin.xmax, rwin.ymin, rwin.ymax) != (window.xmin, window.xmax, window.ymin, window.ymax):
            raise DataError(f"{p}: raster extent does not match the window")
        if rwin.nrow == window.nrow and rwin.ncol == window.ncol:
            cols.append(vals)
        else:
            k = rwin.nrow // window.nrow
            if k < 1 or rwin.nrow != k * window.nrow or rwin.ncol != k * window.ncol:
                raise DataError(f"{p}: raster {rwin.nrow}x{rwin.ncol} is not a refinement of {window.nrow}x{window.ncol}")
            cols.append(block_mean(vals, rwin.nrow, rwin.ncol, k))
        names.append(p.stem)
    return CovariateStack(tuple(names), np.column_stack(cols) if cols else np.zeros((window.n, 0)))

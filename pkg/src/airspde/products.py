"""Gridded prediction maps and derived products.

Cells are numbered row-major from the north-west corner, the same order
in which ESRI ASCII grids store them: ``cell_id = row * n_cols + col`` with
row 0 the northernmost row.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np
import pandas as pd
import scipy.sparse as sp

from airspde.geometry import projector

log = logging.getLogger(__name__)

NODATA = -9999.0
DEFAULT_THRESHOLD = 50.0
ANNUAL_PERCENTILES = (90.4, 99.2)


@dataclass
class GridSpec:
    """Regular grid with lower-left corner ``(x0, y0)`` in km.

    ``mask`` is True for cells to predict (land). ``covariates`` holds
    cell_id, date and the raw predictor columns.
    """

    x0: float
    y0: float
    cell: float
    n_cols: int
    n_rows: int
    mask: np.ndarray | None = None
    covariates: pd.DataFrame | None = None

    def __post_init__(self):
        if not self.cell > 0 or self.n_cols < 1 or self.n_rows < 1:
            raise ValueError("grid needs a positive cell size and at least one row and column")
        if self.mask is None:
            self.mask = np.ones(self.n_rows * self.n_cols, dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool).ravel()
        if self.mask.size != self.n_cells:
            raise ValueError("mask size does not match the grid")

    @property
    def n_cells(self) -> int:
        return self.n_rows * self.n_cols

    def centers(self, cell_ids=None) -> np.ndarray:
        ids = np.arange(self.n_cells) if cell_ids is None else np.asarray(cell_ids, dtype=np.int64)
        r, c = np.divmod(ids, self.n_cols)
        return np.column_stack(
            [self.x0 + (c + 0.5) * self.cell, self.y0 + (self.n_rows - r - 0.5) * self.cell]
        )

    @property
    def active(self) -> np.ndarray:
        return np.flatnonzero(self.mask)


@dataclass
class ZoneMap:
    """cell_id, zone_id and population per populated cell."""

    table: pd.DataFrame

    def __post_init__(self):
        t = self.table
        if (t.population < 0).any():
            raise ValueError("population must be non-negative")
        if t.cell_id.duplicated().any():
            raise ValueError("a cell may belong to at most one zone")


@dataclass
class CellSamples:
    """Draws (n_samples, n_cells) in ug/m3 for ``cell_ids``; NaN columns are missing cells."""

    cell_ids: np.ndarray
    draws: np.ndarray


def _cell_covariates(grid: GridSpec, fit, date, cell_ids) -> np.ndarray:
    cols = list(fit.standardization.columns)
    out = np.full((len(cell_ids), len(cols)), np.nan)
    if grid.covariates is None:
        return out
    cov = grid.covariates
    day = cov[cov.date == pd.Timestamp(date)]
    if day.empty:
        return out
    day = day.drop_duplicates("cell_id").set_index("cell_id")
    idx = day.index.get_indexer(cell_ids)
    ok = idx >= 0
    out[ok] = day[cols].to_numpy(dtype=np.float64)[idx[ok]]
    return out


def predict_grid(fit, grid: GridSpec, date, cell_ids=None, batch: int = 20000) -> CellSamples:
    """Concentration draws exp(mu + x beta + u) at cell centres for one day.

    Only unmasked cells are returned. Cells with any missing covariate, or
    whose centre lies outside the mesh, are all-NaN columns.
    """
    t = fit.day_index(date)
    ids = grid.active if cell_ids is None else np.asarray(cell_ids, dtype=np.int64)
    ids = ids[grid.mask[ids]]
    X = _cell_covariates(grid, fit, date, ids)
    xy = grid.centers(ids)
    s = fit.samples
    u = np.asarray(s.u_day(t))  # (n_samples, n_mesh)
    fixed = np.asarray(s.fixed)  # (n_samples, 1 + p)
    out = np.full((s.n_samples, len(ids)), np.nan)
    for start in range(0, len(ids), batch):
        sl = slice(start, start + batch)
        P = projector(fit.mesh, xy[sl])
        Xb = X[sl]
        ok = np.all(np.isfinite(Xb), axis=1) & ~P.outside
        if not ok.any():
            continue
        Xs = np.column_stack([np.ones(ok.sum()), fit.standardization.apply(Xb[ok])])
        eta = (P.A[ok] @ u.T).T + fixed @ Xs.T
        block = out[:, sl]
        block[:, ok] = np.exp(eta)
        out[:, sl] = block
    n_missing = int(np.isnan(out[0]).sum()) if s.n_samples else 0
    if n_missing:
        log.info("%s: %d cell(s) without covariates or outside the mesh", pd.Timestamp(date).date(), n_missing)
    return CellSamples(ids, out)


def summarize_cells(draws: np.ndarray) -> pd.DataFrame:
    """mean, sd and quartiles per column; NaN columns stay NaN."""
    ok = ~np.isnan(draws).any(axis=0)
    res = {k: np.full(draws.shape[1], np.nan) for k in ("mean", "sd", "q1", "median", "q3")}
    if ok.any():
        d = draws[:, ok]
        res["mean"][ok] = d.mean(axis=0)
        res["sd"][ok] = d.std(axis=0, ddof=1) if d.shape[0] > 1 else 0.0
        q = np.quantile(d, [0.25, 0.5, 0.75], axis=0, method="inverted_cdf")
        res["q1"][ok], res["median"][ok], res["q3"][ok] = q
    return pd.DataFrame(res)


def rwpir(draws: np.ndarray) -> np.ndarray:
    """Relative width of the interquartile range, (Q3 - Q1) / Q2, per column."""
    draws = np.asarray(draws, dtype=np.float64)
    if draws.shape[0] < 2:
        raise ValueError("need at least two samples")
    q1, q2, q3 = np.quantile(draws, [0.25, 0.5, 0.75], axis=0, method="inverted_cdf")
    return (q3 - q1) / q2


def exceedance_probability(draws: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Fraction of draws strictly above ``threshold``; NaN columns stay NaN."""
    draws = np.asarray(draws, dtype=np.float64)
    p = np.mean(draws > threshold, axis=0)
    return np.where(np.isnan(draws).any(axis=0), np.nan, p)


def nearest_rank_percentile(values: np.ndarray, p: float, axis: int = 0) -> np.ndarray:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value along ``axis``."""
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[axis]
    rank = max(int(np.ceil(p / 100.0 * n - 1e-9)), 1)
    return np.take(np.sort(values, axis=axis), rank - 1, axis=axis)


def aggregate_days(daily, statistic="mean") -> np.ndarray:
    """Aggregate per sample index over days.

    ``daily`` is a sequence of (n_samples, n_cells) arrays or an array of
    shape (n_days, n_samples, n_cells). ``statistic`` is ``"mean"`` or a
    percentile such as ``90.4``/``"p90.4"`` (nearest rank over days).
    """
    if isinstance(daily, np.ndarray) and daily.ndim == 3:
        stack = daily
    else:
        daily = list(daily)
        shapes = {np.shape(d) for d in daily}
        if len(shapes) != 1:
            raise ValueError(f"daily sample matrices differ in shape: {sorted(shapes)}")
        stack = np.stack([np.asarray(d, dtype=np.float64) for d in daily])
    if statistic == "mean":
        return stack.mean(axis=0)
    p = float(str(statistic).lstrip("p"))
    return nearest_rank_percentile(stack, p, axis=0)


def population_exposure(concentration: pd.Series | np.ndarray, zones: ZoneMap, cell_ids=None) -> pd.DataFrame:
    """Population-weighted mean concentration per zone.

    ``concentration`` is indexed by cell_id (a Series, or an array aligned
    with ``cell_ids``). Zones with zero total population or with a populated
    cell lacking a concentration get NaN.
    """
    if not isinstance(concentration, pd.Series):
        concentration = pd.Series(np.asarray(concentration, dtype=np.float64), index=cell_ids)
    t = zones.table.copy()
    t["c"] = concentration.reindex(t.cell_id.to_numpy()).to_numpy()
    t["pc"] = t.population * t.c
    rows = []
    for zone, g in t.groupby("zone_id", sort=True):
        total = g.population.sum()
        populated = g.population > 0
        if total <= 0 or g.c[populated].isna().any():
            rows.append((zone, np.nan))
        else:
            rows.append((zone, float(g.pc[populated].sum() / total)))
    return pd.DataFrame(rows, columns=["zone_id", "exposure"])


def exposure_samples(draws: np.ndarray, cell_ids, zones: ZoneMap) -> pd.DataFrame:
    """Population-weighted exposure per draw; returns (n_samples, n_zones) indexed by zone.

    A zone is NaN in every draw if its total population is zero or one of
    its populated cells has no concentration.
    """
    draws = np.asarray(draws, dtype=np.float64)
    t = zones.table
    col = pd.Index(np.asarray(cell_ids, dtype=np.int64)).get_indexer(t.cell_id.to_numpy())
    zone_ids, zi = np.unique(t.zone_id.to_numpy(), return_inverse=True)
    pop = t.population.to_numpy(dtype=np.float64)
    total = np.bincount(zi, weights=pop, minlength=len(zone_ids))
    populated = pop > 0
    missing = populated & (col < 0)
    present = np.isnan(draws).any(axis=0)
    missing |= populated & (col >= 0) & present[np.maximum(col, 0)]
    bad = (total <= 0) | (np.bincount(zi, weights=missing, minlength=len(zone_ids)) > 0)
    use = populated & ~missing
    W = sp.csr_matrix(
        (pop[use] / total[zi[use]], (col[use], zi[use])), shape=(draws.shape[1], len(zone_ids))
    )
    out = np.asarray((W.T @ np.nan_to_num(draws).T).T)
    out[:, bad] = np.nan
    return pd.DataFrame(out, columns=zone_ids)


# ---------------------------------------------------------------------- writers


def write_asc(path, grid: GridSpec, cell_ids, values) -> None:
    """ESRI ASCII grid; masked or missing cells are NODATA (-9999)."""
    full = np.full(grid.n_cells, NODATA)
    v = np.asarray(values, dtype=np.float64)
    full[np.asarray(cell_ids, dtype=np.int64)] = np.where(np.isfinite(v), v, NODATA)
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(f"ncols {grid.n_cols}\nnrows {grid.n_rows}\n")
        fh.write(f"xllcorner {grid.x0:.17g}\nyllcorner {grid.y0:.17g}\n")
        fh.write(f"cellsize {grid.cell:.17g}\nNODATA_value {NODATA:.0f}\n")
        for r in range(grid.n_rows):
            row = full[r * grid.n_cols : (r + 1) * grid.n_cols]
            fh.write(" ".join(f"{x:.17g}" for x in row) + "\n")


def read_asc(path) -> tuple[dict, np.ndarray]:
    header = {}
    with open(path) as fh:
        for _ in range(6):
            k, v = fh.readline().split()
            header[k.lower()] = float(v)
        data = np.loadtxt(fh, ndmin=2)
    return header, data


def write_cells_csv(path, cell_ids, columns: dict) -> None:
    """Long-format CSV: cell_id then one column per statistic."""
    df = pd.DataFrame({"cell_id": np.asarray(cell_ids, dtype=np.int64), **columns})
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
    df.to_csv(path, index=False, float_format="%.17g")

"""Stratified cross-validation, back-transformed metrics and space-time variograms."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist

from airspde.data import STRATA, Dataset
from airspde.geometry import TriangularMesh

log = logging.getLogger(__name__)

DEFAULT_SPACE_BINS = np.arange(0.0, 425.0, 25.0)
DEFAULT_TIME_LAGS = tuple(range(8))


@dataclass
class SplitPlan:
    trial: int
    validation: dict[str, list[str]]
    training: list[str]

    @property
    def validation_ids(self) -> list[str]:
        return [s for stratum in STRATA for s in self.validation.get(stratum, [])]


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def stratified_split(
    stations: pd.DataFrame, fraction: float = 0.1, trial_seed: int = 0, counts: dict | None = None
) -> SplitPlan:
    """Sample round-half-up(fraction x size) validation stations uniformly within each stratum.

    ``counts`` overrides the per-stratum sample size.
    """
    if not 0 <= fraction <= 1:
        raise ValueError("fraction must lie in [0, 1]")
    rng = np.random.default_rng(trial_seed)
    validation = {}
    for stratum in STRATA:
        ids = sorted(stations.loc[stations.stratum == stratum, "station_id"])
        if not ids:
            log.warning("stratum %s has no stations; it contributes no validation sites", stratum)
            validation[stratum] = []
            continue
        k = counts[stratum] if counts and stratum in counts else round_half_up(fraction * len(ids))
        k = min(int(k), len(ids))
        validation[stratum] = sorted(rng.choice(ids, size=k, replace=False).tolist())
    held = {s for v in validation.values() for s in v}
    training = sorted(s for s in stations.station_id if s not in held)
    return SplitPlan(trial_seed, validation, training)


def quantile(draws: np.ndarray, q, axis: int = 0) -> np.ndarray:
    """Order-statistic quantile (inverse empirical CDF), so it commutes with monotone maps."""
    return np.quantile(draws, q, axis=axis, method="inverted_cdf")


@dataclass
class PredictiveSummary:
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    median: np.ndarray = field(default=None)


def backtransform_predictive(log_draws: np.ndarray, level: float = 0.95) -> PredictiveSummary:
    """Exponentiate draws (n_samples, n_cells) and summarize on the original scale."""
    draws = np.exp(np.asarray(log_draws, dtype=np.float64))
    tail = (1.0 - level) / 2.0
    lo, med, hi = quantile(draws, [tail, 0.5, 1.0 - tail])
    return PredictiveSummary(draws.mean(axis=0), lo, hi, med)


def compute_metrics(observed, pred_mean, lower=None, upper=None) -> dict[str, float]:
    """RMSE, bias (prediction minus observation), Pearson correlation and interval coverage (%)."""
    obs = np.asarray(observed, dtype=np.float64)
    pred = np.asarray(pred_mean, dtype=np.float64)
    n = len(obs)
    if n == 0:
        return {"n": 0, "rmse": np.nan, "correlation": np.nan, "bias": np.nan, "coverage95": np.nan}
    err = pred - obs
    if n < 2 or np.std(obs) == 0 or np.std(pred) == 0:
        corr = np.nan
    else:
        corr = float(np.corrcoef(obs, pred)[0, 1])
    cov = np.nan
    if lower is not None and upper is not None:
        inside = (np.asarray(lower) <= obs) & (obs <= np.asarray(upper))
        cov = 100.0 * float(inside.mean())
    return {
        "n": n,
        "rmse": float(np.sqrt(np.mean(err**2))),
        "correlation": corr,
        "bias": float(np.mean(err)),
        "coverage95": cov,
    }


def st_variogram(
    residuals: pd.DataFrame,
    coords: pd.DataFrame,
    space_bins=DEFAULT_SPACE_BINS,
    time_lags=DEFAULT_TIME_LAGS,
) -> pd.DataFrame:
    """Empirical space-time semivariogram.

    ``residuals`` has columns station_id, day, residual; ``coords`` has
    station_id, x_km, y_km. For each distance bin [lo, hi) and lag l,
    gamma = 0.5 * mean (r(s, t) - r(s', t + l))^2 over all such pairs;
    at lag 0 each unordered pair of distinct stations counts once. Empty
    bins give NaN.
    """
    edges = np.asarray(space_bins, dtype=np.float64)
    ids = sorted(residuals.station_id.unique())
    if len(ids) < 2 or residuals.day.nunique() < 2:
        raise ValueError("need at least two stations and two days")
    pos = {s: i for i, s in enumerate(ids)}
    days = residuals.day.to_numpy(dtype=np.int64)
    d0 = days.min()
    T = days.max() - d0 + 1
    R = np.full((T, len(ids)), np.nan)
    R[days - d0, residuals.station_id.map(pos).to_numpy()] = residuals.residual.to_numpy(dtype=np.float64)
    c = coords.set_index("station_id").loc[ids, ["x_km", "y_km"]].to_numpy(dtype=np.float64)
    D = cdist(c, c)
    bin_of = np.digitize(D, edges) - 1  # -1 below the first edge, len(edges)-1 beyond the last
    nb = len(edges) - 1

    rows = []
    valid = ~np.isnan(R)
    Rz = np.where(valid, R, 0.0)
    for lag in time_lags:
        if lag >= T:
            S = np.zeros((len(ids), len(ids)))
            N = np.zeros_like(S)
        else:
            a, b = Rz[: T - lag], Rz[lag:]
            va, vb = valid[: T - lag].astype(float), valid[lag:].astype(float)
            # sum over t of (a_i - b_j)^2 where both present
            S = (a**2).T @ vb + va.T @ (b**2) - 2.0 * a.T @ b
            N = va.T @ vb
        if lag == 0:
            keep = np.triu(np.ones_like(N, dtype=bool), k=1)
        else:
            keep = np.ones_like(N, dtype=bool)
        for k in range(nb):
            m = keep & (bin_of == k)
            n_pairs = int(round(N[m].sum()))
            gamma = 0.5 * S[m].sum() / n_pairs if n_pairs else np.nan
            rows.append((0.5 * (edges[k] + edges[k + 1]), edges[k], edges[k + 1], int(lag), gamma, n_pairs))
    return pd.DataFrame(rows, columns=["h_bin", "h_lo", "h_hi", "lag", "gamma", "n_pairs"])


def variogram_flatness(vg: pd.DataFrame, min_pairs: int = 30) -> float:
    """max/min gamma over bins with at least ``min_pairs`` pairs."""
    g = vg.loc[vg.n_pairs >= min_pairs, "gamma"].to_numpy()
    g = g[np.isfinite(g)]
    return float(g.max() / g.min()) if len(g) else np.nan


def model_residuals(fit) -> pd.DataFrame:
    """Observed log value minus the posterior mean of the linear predictor."""
    asm = fit.assembly
    eta = asm.design @ fit.samples.latent.mean(axis=0)
    return pd.DataFrame(
        {
            "station_id": asm.stations.station_id.to_numpy()[asm.station_index],
            "day": asm.day_index,
            "residual": asm.y - eta,
        }
    )


# ---------------------------------------------------------------------- cross-validation


def _observed_rows(dataset: Dataset, fit, station_ids) -> pd.DataFrame:
    obs = dataset.observations
    obs = obs[obs.station_id.isin(station_ids) & obs.pm10.notna()]
    obs = obs[obs.date.isin(fit.dates)]
    cols = list(fit.standardization.columns)
    rows = obs.merge(dataset.covariates[["station_id", "date", *cols]], on=["station_id", "date"], how="left")
    rows = rows.dropna(subset=cols)
    return rows.merge(dataset.stations[["station_id", "x_km", "y_km", "stratum"]], on="station_id")


def phase_metrics(fit, rows: pd.DataFrame, phase: str, station_index=None, new_keys=None) -> list[dict]:
    if rows.empty:
        return []
    pred = fit.predict_points(
        rows[["x_km", "y_km"]].to_numpy(),
        (rows.date - fit.dates[0]).dt.days.to_numpy(),
        rows[list(fit.standardization.columns)].to_numpy(),
        station_index=station_index,
        new_station_keys=new_keys,
    )
    with_eps = backtransform_predictive(pred.y)
    latent = backtransform_predictive(pred.eta)
    obs = rows.pm10.to_numpy()
    m = compute_metrics(obs, with_eps.mean, with_eps.lower, with_eps.upper)
    m["coverage95_latent"] = compute_metrics(obs, latent.mean, latent.lower, latent.upper)["coverage95"]
    m["phase"] = phase
    return [m]


def cross_validate(
    dataset: Dataset,
    mesh: TriangularMesh,
    month: int,
    fit_cfg=None,
    trials: int = 3,
    fraction: float = 0.1,
    counts: dict | None = None,
    seed: int = 0,
    year: int | None = None,
) -> pd.DataFrame:
    """Refit on training stations for each trial and score both phases.

    Validation predictions include a fresh station effect for each held-out
    site; training predictions use the fitted ones.
    """
    from airspde.inference.fit import FitConfig, fit_month

    fit_cfg = fit_cfg or FitConfig()
    records = []
    for trial in range(trials):
        plan = stratified_split(dataset.stations, fraction, trial_seed=seed + trial, counts=counts)
        fit = fit_month(dataset.subset(plan.training), mesh, month, fit_cfg, year=year)
        train_ids = list(fit.stations.station_id)
        train_rows = _observed_rows(dataset, fit, train_ids)
        sidx = train_rows.station_id.map({s: i for i, s in enumerate(train_ids)}).to_numpy()
        records += [dict(r, trial=trial) for r in phase_metrics(fit, train_rows, "training", station_index=sidx)]
        val_rows = _observed_rows(dataset, fit, plan.validation_ids)
        keys = val_rows.station_id.map({s: i for i, s in enumerate(plan.validation_ids)}).to_numpy()
        records += [dict(r, trial=trial) for r in phase_metrics(fit, val_rows, "validation", new_keys=keys)]
    out = pd.DataFrame(records)
    out.insert(0, "month", month)
    cols = ["month", "trial", "phase", "n", "rmse", "correlation", "bias", "coverage95", "coverage95_latent"]
    return out[cols]

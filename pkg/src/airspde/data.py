"""Station, observation and covariate tables and their CSV schemas."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import pandas as pd

PREDICTORS = (
    "pbl00",
    "pbl12",
    "ptp",
    "sp",
    "t2m",
    "tp",
    "aod550",
    "q_dem",
    "dust",
    "d_a1",
    "i_surface",
)
UNSTANDARDIZED = ("dust",)
STRATA = ("urban", "suburban", "rural")


class SchemaError(ValueError):
    """A CSV input violates its schema; ``line`` is the 1-based file line."""

    def __init__(self, path, line: int | None, message: str):
        self.path = str(path)
        self.line = line
        where = f"{self.path}" + (f", line {line}" if line is not None else "")
        super().__init__(f"{where}: {message}")


@dataclass
class Dataset:
    """Everything needed to fit one or more monthly models.

    ``stations``: station_id, x_km, y_km, stratum.
    ``observations``: station_id, date (datetime64), pm10 (NaN = missing).
    ``covariates``: station_id, date, then one column per predictor.
    """

    stations: pd.DataFrame
    observations: pd.DataFrame
    covariates: pd.DataFrame

    def subset(self, station_ids) -> "Dataset":
        keep = set(station_ids)
        return Dataset(
            self.stations[self.stations.station_id.isin(keep)].reset_index(drop=True),
            self.observations[self.observations.station_id.isin(keep)].reset_index(drop=True),
            self.covariates[self.covariates.station_id.isin(keep)].reset_index(drop=True),
        )

    @property
    def predictors(self) -> list[str]:
        return [c for c in self.covariates.columns if c not in ("station_id", "date")]


def _require_columns(df: pd.DataFrame, path, columns) -> None:
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise SchemaError(path, 1, f"missing column(s) {', '.join(missing)}")


def _read(path) -> pd.DataFrame:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return pd.read_csv(path, dtype={"station_id": str}, keep_default_na=True)


def _numeric(df: pd.DataFrame, path, column: str, allow_missing: bool) -> pd.Series:
    values = pd.to_numeric(df[column], errors="coerce")
    bad = values.isna() & (df[column].notna() if allow_missing else True)
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise SchemaError(path, row + 2, f"column {column!r} is not numeric: {df[column].iloc[row]!r}")
    return values.astype(np.float64)


def _dates(df: pd.DataFrame, path) -> pd.Series:
    dates = pd.to_datetime(df["date"], format="%Y-%m-%d", errors="coerce")
    if dates.isna().any():
        row = int(np.flatnonzero(dates.isna().to_numpy())[0])
        raise SchemaError(path, row + 2, f"bad ISO-8601 date {df['date'].iloc[row]!r}")
    return dates


def read_stations(path) -> pd.DataFrame:
    df = _read(path)
    _require_columns(df, path, ["station_id", "x_km", "y_km", "stratum"])
    df = df[["station_id", "x_km", "y_km", "stratum"]].copy()
    df["x_km"] = _numeric(df, path, "x_km", allow_missing=False)
    df["y_km"] = _numeric(df, path, "y_km", allow_missing=False)
    bad = ~df["stratum"].isin(STRATA)
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise SchemaError(path, row + 2, f"stratum must be one of {STRATA}, got {df['stratum'].iloc[row]!r}")
    dup = df["station_id"].duplicated()
    if dup.any():
        row = int(np.flatnonzero(dup.to_numpy())[0])
        raise SchemaError(path, row + 2, f"duplicate station_id {df['station_id'].iloc[row]!r}")
    return df


def read_observations(path) -> pd.DataFrame:
    df = _read(path)
    _require_columns(df, path, ["station_id", "date", "pm10"])
    out = pd.DataFrame({"station_id": df["station_id"], "date": _dates(df, path)})
    out["pm10"] = _numeric(df, path, "pm10", allow_missing=True)
    neg = out["pm10"] < 0
    if neg.any():
        row = int(np.flatnonzero(neg.to_numpy())[0])
        raise SchemaError(path, row + 2, "pm10 must be >= 0")
    dup = out.duplicated(["station_id", "date"])
    if dup.any():
        row = int(np.flatnonzero(dup.to_numpy())[0])
        raise SchemaError(path, row + 2, "duplicate (station_id, date)")
    return out


def read_covariates(path, predictors=None, key: str = "station_id") -> pd.DataFrame:
    """Read station-day (``key="station_id"``) or cell-day (``key="cell_id"``) covariates."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    df = pd.read_csv(path, dtype={key: str})
    if predictors is None:
        predictors = [c for c in df.columns if c not in (key, "date")]
    _require_columns(df, path, [key, "date", *predictors])
    out = pd.DataFrame({key: df[key], "date": _dates(df, path)})
    for name in predictors:
        out[name] = _numeric(df, path, name, allow_missing=True)
    return out


def read_dataset(stations, observations, covariates, predictors=None) -> Dataset:
    st = read_stations(stations)
    obs = read_observations(observations)
    cov = read_covariates(covariates, predictors)
    unknown = ~obs["station_id"].isin(st["station_id"])
    if unknown.any():
        row = int(np.flatnonzero(unknown.to_numpy())[0])
        raise SchemaError(observations, row + 2, f"unknown station_id {obs['station_id'].iloc[row]!r}")
    return Dataset(st, obs, cov)


def write_dataset(ds: Dataset, stations, observations, covariates) -> None:
    for path in (stations, observations, covariates):
        parent = os.path.dirname(os.fspath(path))
        if parent:
            os.makedirs(parent, exist_ok=True)
    ds.stations.to_csv(stations, index=False, float_format="%.17g")
    obs = ds.observations.copy()
    obs["date"] = obs["date"].dt.strftime("%Y-%m-%d")
    obs.to_csv(observations, index=False, float_format="%.17g")
    cov = ds.covariates.copy()
    cov["date"] = cov["date"].dt.strftime("%Y-%m-%d")
    cov.to_csv(covariates, index=False, float_format="%.17g")

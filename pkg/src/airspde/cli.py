"""Command-line entry point: ``airspde {simulate,fit,predict,cv,products}``.

Exit codes: 0 success, 2 missing input file, 3 schema or config error,
4 numerical failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np
import pandas as pd

from airspde.config import ConfigError, RunConfig, load_config, write_resolved
from airspde.data import Dataset, SchemaError, read_covariates, read_dataset, write_dataset
from airspde.geometry import MeshError, build_mesh, read_mesh, write_mesh
from airspde.inference.fit import FLOAT_FORMAT, FitConfig, MonthlyFit, fit_month
from airspde.inference.model import AssemblyError, InferenceError
from airspde.inference.optimize import OptimizerConfig
from airspde.priors import PcAr1Spec, PcMaternSpec, PcSdSpec, PriorSet, PriorSpecError
from airspde.products import (
    GridSpec,
    ZoneMap,
    aggregate_days,
    exceedance_probability,
    exposure_samples,
    predict_grid,
    rwpir,
    summarize_cells,
    write_asc,
    write_cells_csv,
)
from airspde.simulate import SimulationSpec, simulate_dataset
from airspde.validation import cross_validate

log = logging.getLogger("airspde")

EXIT_MISSING_FILE = 2
EXIT_SCHEMA = 3
EXIT_NUMERICAL = 4


# ---------------------------------------------------------------------- config -> objects


def priors_from(cfg: RunConfig) -> PriorSet:
    return PriorSet(
        sigma_epsilon=PcSdSpec(cfg.prior_sigma_epsilon_u, cfg.prior_sigma_epsilon_alpha),
        sigma_z=PcSdSpec(cfg.prior_sigma_z_u, cfg.prior_sigma_z_alpha),
        matern=PcMaternSpec(
            cfg.prior_range_u, cfg.prior_range_alpha, cfg.prior_sigma_omega_u, cfg.prior_sigma_omega_alpha
        ),
        ar1=PcAr1Spec(cfg.prior_a_u, cfg.prior_a_alpha),
        fixed_effect_precision=cfg.fixed_effect_precision,
    )


def fit_config_from(cfg: RunConfig) -> FitConfig:
    opt = OptimizerConfig(
        gtol=cfg.gtol,
        max_iter=cfg.max_iter,
        integration=cfg.integration,
        ccd_radius=cfg.ccd_radius,
        threads=cfg.threads,
        pilot_days=cfg.pilot_days,
    )
    return FitConfig(
        min_obs=cfg.min_obs,
        n_samples=cfg.n_samples,
        seed=cfg.seed,
        predictors=tuple(cfg.predictors),
        optimizer=opt,
        priors=priors_from(cfg),
    )


def load_dataset(cfg: RunConfig) -> Dataset:
    cfg.require_files("stations", "observations", "covariates")
    return read_dataset(cfg.stations, cfg.observations, cfg.covariates, cfg.predictors)


def mesh_for(cfg: RunConfig, stations: pd.DataFrame):
    """Read the cached mesh, or build one around the stations and cache it."""
    if cfg.mesh and os.path.isdir(cfg.mesh):
        return read_mesh(cfg.mesh)
    xy = stations[["x_km", "y_km"]].to_numpy()
    span = float(np.max(xy.max(axis=0) - xy.min(axis=0)))
    edge = cfg.mesh_edge or span / 18.0
    mesh = build_mesh(
        xy,
        edge,
        cfg.mesh_outer_edge or 3.0 * edge,
        cutoff=edge / 5.0 if cfg.mesh_cutoff is None else cfg.mesh_cutoff,
        extension=cfg.mesh_extension or span / 6.0,
    )
    if cfg.mesh:
        write_mesh(mesh, cfg.mesh)
    return mesh


def grid_from(cfg: RunConfig, predictors=None) -> GridSpec:
    cfg.require("grid_origin", "grid_cell", "grid_n_cols", "grid_n_rows")
    mask = None
    n = cfg.grid_n_cols * cfg.grid_n_rows
    if cfg.grid_mask:
        cfg.require_files("grid_mask")
        m = pd.read_csv(cfg.grid_mask)
        if not {"cell_id", "land"} <= set(m.columns):
            raise SchemaError(cfg.grid_mask, 1, "mask needs columns cell_id, land")
        bad = ~m.cell_id.between(0, n - 1)
        if bad.any():
            raise SchemaError(cfg.grid_mask, int(np.flatnonzero(bad.to_numpy())[0]) + 2, "cell_id outside the grid")
        mask = np.zeros(n, dtype=bool)
        mask[m.cell_id.to_numpy()] = m.land.to_numpy().astype(bool)
    covariates = None
    if cfg.grid_covariates:
        cfg.require_files("grid_covariates")
        covariates = read_covariates(cfg.grid_covariates, predictors, key="cell_id")
        ids = pd.to_numeric(covariates.cell_id, errors="coerce")
        bad = ids.isna() | ~ids.between(0, n - 1)
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise SchemaError(cfg.grid_covariates, row + 2, f"bad cell_id {covariates.cell_id.iloc[row]!r}")
        covariates["cell_id"] = ids.astype(np.int64)
    x0, y0 = cfg.grid_origin
    return GridSpec(x0, y0, cfg.grid_cell, cfg.grid_n_cols, cfg.grid_n_rows, mask, covariates)


def load_zones(cfg: RunConfig) -> ZoneMap:
    cfg.require_files("zones")
    t = pd.read_csv(cfg.zones, dtype={"zone_id": str})
    missing = [c for c in ("cell_id", "zone_id", "population") if c not in t.columns]
    if missing:
        raise SchemaError(cfg.zones, 1, f"missing column(s) {', '.join(missing)}")
    for col in ("cell_id", "population"):
        v = pd.to_numeric(t[col], errors="coerce")
        bad = v.isna() | (v < 0)
        if bad.any():
            raise SchemaError(cfg.zones, int(np.flatnonzero(bad.to_numpy())[0]) + 2, f"bad {col}")
        t[col] = v
    dup = t.cell_id.duplicated()
    if dup.any():
        raise SchemaError(cfg.zones, int(np.flatnonzero(dup.to_numpy())[0]) + 2, "cell listed in two zones")
    t["cell_id"] = t.cell_id.astype(np.int64)
    return ZoneMap(t)


def _fit_dir(cfg: RunConfig) -> str:
    cfg.require("fit_dir")
    return cfg.fit_dir


def _output_dir(cfg: RunConfig) -> str:
    cfg.require("output_dir")
    return cfg.output_dir


def _load_fit(cfg: RunConfig) -> MonthlyFit:
    return MonthlyFit.load(_fit_dir(cfg))


def _prediction_dates(cfg: RunConfig, fit: MonthlyFit) -> list[pd.Timestamp]:
    if cfg.days is None:
        return list(fit.dates)
    dates = [pd.Timestamp(d) for d in cfg.days]
    for d in dates:
        fit.day_index(d)
    return dates


def _grid_batches(fit: MonthlyFit, grid: GridSpec, dates, batch: int):
    """Yield (cell_ids, [draws per day]) for consecutive batches of active cells."""
    active = grid.active
    for start in range(0, len(active), batch):
        ids = active[start : start + batch]
        yield ids, [predict_grid(fit, grid, d, cell_ids=ids).draws for d in dates]


def _summary_columns(draws: np.ndarray) -> dict:
    s = summarize_cells(draws)
    cols = {k: s[k].to_numpy() for k in s.columns}
    ok = ~np.isnan(draws).any(axis=0)
    r = np.full(draws.shape[1], np.nan)
    if ok.any():
        r[ok] = rwpir(draws[:, ok])
    cols["rwpir"] = r
    return cols


def _concat(parts: list[dict]) -> dict:
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


# ---------------------------------------------------------------------- commands


def cmd_simulate(cfg: RunConfig) -> None:
    out = _output_dir(cfg)
    seed = cfg.seed if cfg.sim_seed is None else cfg.sim_seed
    spec = SimulationSpec(
        a=cfg.sim_a,
        rho=cfg.sim_rho,
        sigma_omega=cfg.sim_sigma_omega,
        sigma_z=cfg.sim_sigma_z,
        sigma_epsilon=cfg.sim_sigma_epsilon,
        mu=cfg.sim_mu,
        beta=tuple(cfg.sim_beta),
        n_stations=cfg.sim_n_stations,
        domain=tuple(cfg.sim_domain),
        T=cfg.sim_T,
        start_date=cfg.sim_start_date,
        missing_fraction=cfg.sim_missing_fraction,
        seed=seed,
    )
    sim = simulate_dataset(spec)
    write_dataset(
        sim.dataset,
        os.path.join(out, "stations.csv"),
        os.path.join(out, "observations.csv"),
        os.path.join(out, "covariates.csv"),
    )
    truth = [(k, v) for k, v in spec.theta.as_dict().items()]
    truth += [("mu", spec.mu)] + [(f"beta_{n}", b) for n, b in zip(spec.predictor_names, spec.beta)]
    pd.DataFrame(truth, columns=["parameter", "value"]).to_csv(
        os.path.join(out, "truth.csv"), index=False, float_format=FLOAT_FORMAT
    )
    if cfg.grid_n_cols and cfg.grid_n_rows:
        # iid standard normal cell-day predictors matching the station generator
        n = cfg.grid_n_cols * cfg.grid_n_rows
        dates = pd.date_range(spec.start_date, periods=spec.T, freq="D")
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
        names = spec.predictor_names
        cov = pd.DataFrame(
            {
                "cell_id": np.tile(np.arange(n), spec.T),
                "date": np.repeat(dates.strftime("%Y-%m-%d"), n),
            }
        )
        values = rng.standard_normal((len(cov), len(names)))
        for j, name in enumerate(names):
            cov[name] = values[:, j]
        cov.to_csv(os.path.join(out, "grid_covariates.csv"), index=False, float_format=FLOAT_FORMAT)
    write_resolved(cfg, out, "simulate")
    log.info("wrote synthetic dataset (%d stations, %d days) to %s", spec.n_stations, spec.T, out)


def cmd_fit(cfg: RunConfig) -> None:
    cfg.require("month")
    ds = load_dataset(cfg)
    out = _fit_dir(cfg)
    mesh = mesh_for(cfg, ds.stations)
    fit = fit_month(ds, mesh, cfg.month, fit_config_from(cfg), year=cfg.year)
    fit.save(out)
    write_resolved(cfg, out, "fit")
    if not fit.info["converged"]:
        log.warning("optimizer did not converge; results are written but should be checked")


def cmd_cv(cfg: RunConfig) -> None:
    cfg.require("month")
    ds = load_dataset(cfg)
    out = _output_dir(cfg)
    mesh = mesh_for(cfg, ds.stations)
    fc = fit_config_from(cfg)
    report = cross_validate(
        ds, mesh, cfg.month, fc, trials=cfg.cv_trials, fraction=cfg.cv_fraction, seed=cfg.seed, year=cfg.year
    )
    os.makedirs(out, exist_ok=True)
    for trial, rows in report.groupby("trial", sort=True):
        rows.to_csv(os.path.join(out, f"cv_trial{trial}.csv"), index=False, float_format=FLOAT_FORMAT)
    report.to_csv(os.path.join(out, "cv_metrics.csv"), index=False, float_format=FLOAT_FORMAT)
    write_resolved(cfg, out, "cv")


def cmd_predict(cfg: RunConfig) -> None:
    fit = _load_fit(cfg)
    out = _output_dir(cfg)
    grid = grid_from(cfg, list(fit.standardization.columns))
    dates = _prediction_dates(cfg, fit)
    daily_parts = [[] for _ in dates]
    month_parts, ids_parts = [], []
    for ids, draws in _grid_batches(fit, grid, dates, cfg.grid_batch):
        ids_parts.append(ids)
        for k, d in enumerate(draws):
            daily_parts[k].append(_summary_columns(d))
        month_parts.append(_summary_columns(aggregate_days(draws, cfg.aggregate)))
    ids = np.concatenate(ids_parts) if ids_parts else np.zeros(0, dtype=np.int64)
    for d, parts in zip(dates, daily_parts):
        cols = _concat(parts) if parts else {}
        stem = os.path.join(out, "daily", d.strftime("%Y-%m-%d"))
        write_cells_csv(stem + ".csv", ids, cols)
        write_asc(stem + "_mean.asc", grid, ids, cols.get("mean", []))
        write_asc(stem + "_rwpir.asc", grid, ids, cols.get("rwpir", []))
    cols = _concat(month_parts) if month_parts else {}
    write_cells_csv(os.path.join(out, "monthly.csv"), ids, cols)
    write_asc(os.path.join(out, "monthly_mean.asc"), grid, ids, cols.get("mean", []))
    write_asc(os.path.join(out, "monthly_rwpir.asc"), grid, ids, cols.get("rwpir", []))
    write_resolved(cfg, out, "predict")


def cmd_products(cfg: RunConfig) -> None:
    fit = _load_fit(cfg)
    out = _output_dir(cfg)
    grid = grid_from(cfg, list(fit.standardization.columns))
    zones = load_zones(cfg) if cfg.zones else None
    dates = _prediction_dates(cfg, fit)
    thr = cfg.threshold
    daily_poe = [[] for _ in dates]
    month_poe, ids_parts = [], []
    daily_exp = [[] for _ in dates]
    month_exp = []
    zone_cells = set(zones.table.cell_id) if zones is not None else set()
    for ids, draws in _grid_batches(fit, grid, dates, cfg.grid_batch):
        ids_parts.append(ids)
        agg = aggregate_days(draws, cfg.aggregate)
        for k, d in enumerate(draws):
            daily_poe[k].append(exceedance_probability(d, thr))
        month_poe.append(exceedance_probability(agg, thr))
        if zones is not None:
            # keep only zone cells for the exposure pass
            keep = np.isin(ids, list(zone_cells))
            for k, d in enumerate(draws):
                daily_exp[k].append((ids[keep], d[:, keep]))
            month_exp.append((ids[keep], agg[:, keep]))
    ids = np.concatenate(ids_parts) if ids_parts else np.zeros(0, dtype=np.int64)
    for d, parts in zip(dates, daily_poe):
        p = np.concatenate(parts) if parts else np.zeros(0)
        stem = os.path.join(out, "poe", d.strftime("%Y-%m-%d"))
        write_cells_csv(stem + ".csv", ids, {"poe": p})
        write_asc(stem + ".asc", grid, ids, p)
    p = np.concatenate(month_poe) if month_poe else np.zeros(0)
    write_cells_csv(os.path.join(out, "poe", "monthly.csv"), ids, {"poe": p})
    write_asc(os.path.join(out, "poe", "monthly.asc"), grid, ids, p)
    if zones is not None:
        rows = []

        def _stack(pieces):
            cid = np.concatenate([c for c, _ in pieces])
            dr = np.concatenate([x for _, x in pieces], axis=1)
            return dr, cid

        for d, pieces in zip(dates, daily_exp):
            e = exposure_samples(*_stack(pieces), zones)
            rows += [(z, f"mean_{d.strftime('%Y-%m-%d')}", v) for z, v in e.mean(axis=0).items()]
        e = exposure_samples(*_stack(month_exp), zones)
        tag = f"monthly_{cfg.aggregate}"
        for name, stat in (
            ("mean", e.mean(axis=0)),
            ("q025", e.quantile(0.025, interpolation="lower")),
            ("q975", e.quantile(0.975, interpolation="higher")),
        ):
            rows += [(z, f"{tag}_{name}", v) for z, v in stat.items()]
        pd.DataFrame(rows, columns=["zone_id", "statistic", "value"]).to_csv(
            os.path.join(out, "zone_exposure.csv"), index=False, float_format=FLOAT_FORMAT
        )
    write_resolved(cfg, out, "products")


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "cv": cmd_cv,
    "products": cmd_products,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="airspde", description="Space-time PM10 mapping with SPDE/AR(1) models.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("-c", "--config", help="flat TOML config file")
    ap.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key (TOML value syntax), may repeat",
    )
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def run(command: str, cfg: RunConfig) -> int:
    try:
        COMMANDS[command](cfg)
    except FileNotFoundError as exc:
        path = exc.filename or (exc.args[0] if exc.args else "")
        print(f"error: missing file: {path}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except (SchemaError, ConfigError, AssemblyError, PriorSpecError, MeshError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except InferenceError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        cfg = load_config(args.config, args.overrides)
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc.args[0]}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    return run(args.command, cfg)


if __name__ == "__main__":
    sys.exit(main())

"""Flat TOML run configuration.

Every key is top level. Relative paths are resolved against the directory
of the config file. Keys and defaults:

Paths
    stations, observations, covariates   station table, daily PM10, station-day predictors
    grid_covariates                      cell-day predictors (cell_id, date, predictors)
    grid_mask                            optional CSV (cell_id, land); land 0 cells are skipped
    zones                                CSV (cell_id, zone_id, population)
    mesh                                 mesh directory; built from the stations and cached if absent
    fit_dir                              where ``fit`` writes and ``predict``/``products`` read
    output_dir                           where every other command writes

Model and fitting
    month (required for fit/cv), year, min_obs = 10, predictors (default: all 11)
    n_samples = 1000, seed = 0, integration = "empirical_bayes" | "ccd", threads = 1
    gtol = 1e-4, max_iter = 200, ccd_radius = 1.1, pilot_days = 7

Priors (tail probabilities)
    prior_sigma_epsilon_u = 1, prior_sigma_epsilon_alpha = 0.01
    prior_sigma_z_u = 1, prior_sigma_z_alpha = 0.01
    prior_range_u = 150, prior_range_alpha = 0.8
    prior_sigma_omega_u = 1, prior_sigma_omega_alpha = 0.01
    prior_a_u = 0.8, prior_a_alpha = 0.4
    fixed_effect_precision = 0.001

Mesh construction (used only when the mesh directory does not exist)
    mesh_edge, mesh_outer_edge, mesh_cutoff, mesh_extension
    defaults scale with the station extent: span/18, 3 x edge, edge/5, span/6

Cross-validation
    cv_trials = 3, cv_fraction = 0.1

Grid and products
    grid_origin = [x0, y0] (lower-left corner, km), grid_cell, grid_n_cols, grid_n_rows
    grid_batch = 5000 (cells per prediction batch)
    days (default: every day of the fitted month)
    threshold = 50, aggregate = "mean" (or a percentile such as "p90.4")

Simulation
    sim_n_stations = 100, sim_T = 28, sim_start_date = "2015-02-01"
    sim_a, sim_rho, sim_sigma_omega, sim_sigma_z, sim_sigma_epsilon, sim_mu, sim_beta
    sim_domain = [x0, y0, x1, y1], sim_missing_fraction = 0, sim_seed (default: seed)
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from airspde.data import PREDICTORS

PATH_KEYS = (
    "stations",
    "observations",
    "covariates",
    "grid_covariates",
    "grid_mask",
    "zones",
    "mesh",
    "fit_dir",
    "output_dir",
)

DEFAULTS = {
    "month": None,
    "year": None,
    "min_obs": 10,
    "predictors": list(PREDICTORS),
    "n_samples": 1000,
    "seed": 0,
    "integration": "empirical_bayes",
    "threads": 1,
    "gtol": 1e-4,
    "max_iter": 200,
    "ccd_radius": 1.1,
    "pilot_days": 7,
    "prior_sigma_epsilon_u": 1.0,
    "prior_sigma_epsilon_alpha": 0.01,
    "prior_sigma_z_u": 1.0,
    "prior_sigma_z_alpha": 0.01,
    "prior_range_u": 150.0,
    "prior_range_alpha": 0.8,
    "prior_sigma_omega_u": 1.0,
    "prior_sigma_omega_alpha": 0.01,
    "prior_a_u": 0.8,
    "prior_a_alpha": 0.4,
    "fixed_effect_precision": 0.001,
    "mesh_edge": None,
    "mesh_outer_edge": None,
    "mesh_cutoff": None,
    "mesh_extension": None,
    "cv_trials": 3,
    "cv_fraction": 0.1,
    "grid_origin": None,
    "grid_cell": None,
    "grid_n_cols": None,
    "grid_n_rows": None,
    "grid_batch": 5000,
    "days": None,
    "threshold": 50.0,
    "aggregate": "mean",
    "sim_n_stations": 100,
    "sim_T": 28,
    "sim_start_date": "2015-02-01",
    "sim_a": 0.629,
    "sim_rho": 106.23,
    "sim_sigma_omega": 0.434,
    "sim_sigma_z": 0.247,
    "sim_sigma_epsilon": 0.197,
    "sim_mu": 3.5,
    "sim_beta": [0.15, -0.1, 0.08, 0.05, -0.12],
    "sim_domain": [0.0, 0.0, 600.0, 600.0],
    "sim_missing_fraction": 0.0,
    "sim_seed": None,
    **{k: None for k in PATH_KEYS},
}


class ConfigError(ValueError):
    """Unknown key, wrong type or out-of-range value; ``line`` is set for syntax errors."""

    def __init__(self, message: str, path=None, line: int | None = None):
        self.path = path
        self.line = line
        where = f"{path}" if path else "config"
        if line is not None:
            where += f", line {line}"
        super().__init__(f"{where}: {message}")


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))
    source: str | None = None

    def __getitem__(self, key):
        return self.values[key]

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None

    def require(self, *keys) -> None:
        missing = [k for k in keys if self.values.get(k) is None]
        if missing:
            raise ConfigError(f"missing required key(s): {', '.join(missing)}", self.source)

    def require_files(self, *keys) -> None:
        """Raise FileNotFoundError naming the first configured input that does not exist."""
        self.require(*keys)
        for k in keys:
            if not os.path.exists(self.values[k]):
                raise FileNotFoundError(self.values[k])

    def dumps(self) -> str:
        """Resolved configuration in the same flat TOML form."""
        return "".join(f"{k} = {_toml_value(v)}\n" for k, v in sorted(self.values.items()) if v is not None)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    s = str(v).replace("\\", "\\\\").replace('"', '\\"')
    return f'"{s}"'


def _check(values: dict, source) -> None:
    for key, v in values.items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r}", source)
        if isinstance(v, dict):
            raise ConfigError(f"key {key!r}: tables are not allowed, the config is flat", source)
    m = values.get("month")
    if m is not None and (not isinstance(m, int) or not 1 <= m <= 12):
        raise ConfigError(f"month must be an integer in 1..12, got {m!r}", source)
    if values.get("integration") not in ("empirical_bayes", "ccd"):
        raise ConfigError(f"integration must be 'empirical_bayes' or 'ccd', got {values.get('integration')!r}", source)
    for key in ("n_samples", "threads", "cv_trials", "grid_batch", "min_obs"):
        if not isinstance(values[key], int) or values[key] < 1:
            raise ConfigError(f"{key} must be a positive integer", source)
    unknown = [p for p in values["predictors"] if p not in PREDICTORS]
    if unknown:
        raise ConfigError(f"unknown predictor(s) {unknown}", source)


def parse_override(text: str) -> tuple[str, object]:
    """``key=value`` with a TOML value; bare words are taken as strings."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = (s.strip() for s in text.split("=", 1))
    try:
        return key, tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return key, raw


def load_config(path=None, overrides=()) -> RunConfig:
    values = dict(DEFAULTS)
    base = os.getcwd()
    source = None
    if path is not None:
        if not os.path.exists(path):
            raise FileNotFoundError(path)
        source = os.fspath(path)
        with open(path, "rb") as fh:
            try:
                values.update(tomllib.load(fh))
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(str(exc), source, getattr(exc, "lineno", None)) from None
        base = os.path.dirname(os.path.abspath(path))
    for text in overrides:
        k, v = parse_override(text)
        values[k] = v
    _check(values, source)
    for key in PATH_KEYS:
        if values[key] is not None:
            values[key] = os.path.normpath(os.path.join(base, os.path.expanduser(str(values[key]))))
    for key, v in values.items():
        if isinstance(DEFAULTS.get(key), float) and isinstance(v, int) and not isinstance(v, bool):
            values[key] = float(v)
    return RunConfig(values, source)


def write_resolved(cfg: RunConfig, directory, command: str) -> str:
    os.makedirs(directory, exist_ok=True)
    out = os.path.join(directory, "resolved_config.toml")
    with open(out, "w") as fh:
        fh.write(f"# airspde {command}\n")
        fh.write(cfg.dumps())
    return out

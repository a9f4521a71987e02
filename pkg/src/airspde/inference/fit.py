"""End-to-end fit of one monthly model and its on-disk form."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.sparse as sp

from airspde.data import UNSTANDARDIZED, Dataset
from airspde.geometry import TriangularMesh, fem_matrices, projector, read_mesh, write_mesh
from airspde.inference.model import ModelAssembly, Standardization, assemble
from airspde.inference.optimize import (
    HyperIntegration,
    OptimizationResult,
    OptimizerConfig,
    explore_hyperparameters,
    optimize_hyperparameters,
)
from airspde.inference.params import NAMES, HyperParameters
from airspde.inference.sampling import DEFAULT_N_SAMPLES, PosteriorSampleSet, draw_stream, sample_posterior
from airspde.priors import PriorSet

log = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


@dataclass(frozen=True)
class FitConfig:
    min_obs: int = 10
    n_samples: int = DEFAULT_N_SAMPLES
    seed: int = 0
    predictors: tuple | None = None
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    priors: PriorSet = field(default_factory=PriorSet)


@dataclass
class StationPrediction:
    """Log-scale draws at prediction points; ``eta`` is noise free, ``y`` adds the noise."""

    eta: np.ndarray
    y: np.ndarray


@dataclass
class MonthlyFit:
    """Everything needed downstream of a monthly fit.

    ``assembly`` is ``None`` for fits loaded from disk; prediction only needs
    the mesh, the standardization, the station table and the samples.
    """

    month: int
    dates: pd.DatetimeIndex
    mesh: TriangularMesh
    stations: pd.DataFrame
    standardization: Standardization
    samples: PosteriorSampleSet
    hyper: pd.DataFrame
    latent: pd.DataFrame | None = None
    info: dict = field(default_factory=dict)
    assembly: ModelAssembly | None = None
    optimization: OptimizationResult | None = None
    integration: HyperIntegration | None = None

    @property
    def T(self) -> int:
        return len(self.dates)

    @property
    def mode(self) -> HyperParameters:
        return HyperParameters(**{n: float(v) for n, v in zip(self.hyper.parameter, self.hyper["mode"])})

    def day_index(self, date) -> int:
        d = pd.Timestamp(date)
        t = int((d - self.dates[0]).days)
        if not 0 <= t < self.T:
            raise ValueError(f"{d.date()} is outside the fitted month")
        return t

    # ------------------------------------------------------------------ prediction
    def design_rows(self, xy, day_index, raw_covariates, station_index=None) -> tuple[sp.csr_matrix, np.ndarray]:
        """Design rows at arbitrary points and days; returns (rows, outside-mesh flags)."""
        P = projector(self.mesh, np.asarray(xy, dtype=np.float64))
        X = np.column_stack(
            [np.ones(len(P.outside)), self.standardization.apply(np.asarray(raw_covariates, float))]
        )
        day_index = np.asarray(day_index, dtype=np.int64)
        n_mesh = self.mesh.n_vertices
        coo = P.A.tocoo()
        A = sp.csr_matrix(
            (coo.data, (coo.row, coo.col + day_index[coo.row] * n_mesh)),
            shape=(P.A.shape[0], self.T * n_mesh),
        )
        n = A.shape[0]
        n_station = self.samples.n_station
        if station_index is None:
            station_index = np.full(n, -1)
        station_index = np.asarray(station_index)
        has = station_index >= 0
        Z = sp.csr_matrix(
            (np.ones(has.sum()), (np.flatnonzero(has), station_index[has])), shape=(n, n_station)
        )
        return sp.hstack([A, Z, sp.csr_matrix(X)], format="csr"), P.outside

    def predict_points(
        self, xy, day_index, raw_covariates, station_index=None, new_station_keys=None, noise_seed=None
    ) -> StationPrediction:
        """Predictive draws at points.

        Rows with ``station_index >= 0`` use the fitted station effect. Rows
        listed in ``new_station_keys`` (integer key per row, -1 for none)
        share a fresh station effect ``N(0, sigma_z^2)`` per key and draw,
        which is what an unseen monitoring site needs.
        """
        rows, outside = self.design_rows(xy, day_index, raw_covariates, station_index)
        if outside.any():
            raise ValueError(f"{int(outside.sum())} prediction point(s) outside the mesh")
        eta = self.samples.linear_predictor(rows)
        seed = self.samples.seed if noise_seed is None else noise_seed
        if new_station_keys is not None:
            keys = np.asarray(new_station_keys)
            uniq, inv = np.unique(keys[keys >= 0], return_inverse=True)
            sz = self.samples.hyper[:, NAMES.index("sigma_z")]
            for i in range(self.samples.n_samples):
                znew = sz[i] * draw_stream(seed, i, 2).standard_normal(len(uniq))
                eta[i, keys >= 0] += znew[inv]
        y = eta.copy()
        se = self.samples.sigma_epsilon
        for i in range(self.samples.n_samples):
            y[i] += se[i] * draw_stream(seed, i, 1).standard_normal(y.shape[1])
        return StationPrediction(eta=eta, y=y)

    # ------------------------------------------------------------------ persistence
    def save(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        write_mesh(self.mesh, os.path.join(directory, "mesh"))
        self.stations.to_csv(os.path.join(directory, "stations.csv"), index=False, float_format=FLOAT_FORMAT)
        self.hyper.to_csv(os.path.join(directory, "hyperparameters.csv"), index=False, float_format=FLOAT_FORMAT)
        if self.latent is not None:
            self.latent.to_csv(os.path.join(directory, "latent_summary.csv"), index=False, float_format=FLOAT_FORMAT)
        self.samples.write(os.path.join(directory, "samples.bin"))
        meta = dict(self.info)
        meta.update(
            {
                "month": self.month,
                "dates": [d.strftime("%Y-%m-%d") for d in self.dates],
                "standardization": self.standardization.to_dict(),
            }
        )
        with open(os.path.join(directory, "fit.json"), "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, directory) -> "MonthlyFit":
        for name in ("fit.json", "samples.bin", "hyperparameters.csv", "stations.csv"):
            path = os.path.join(directory, name)
            if not os.path.exists(path):
                raise FileNotFoundError(path)
        with open(os.path.join(directory, "fit.json")) as fh:
            meta = json.load(fh)
        latent_path = os.path.join(directory, "latent_summary.csv")
        return cls(
            month=int(meta["month"]),
            dates=pd.DatetimeIndex(pd.to_datetime(meta["dates"])),
            mesh=read_mesh(os.path.join(directory, "mesh")),
            stations=pd.read_csv(os.path.join(directory, "stations.csv"), dtype={"station_id": str}),
            standardization=Standardization.from_dict(meta["standardization"]),
            samples=PosteriorSampleSet.read(os.path.join(directory, "samples.bin")),
            hyper=pd.read_csv(os.path.join(directory, "hyperparameters.csv")),
            latent=pd.read_csv(latent_path) if os.path.exists(latent_path) else None,
            info=meta,
        )


def hyper_table(opt: OptimizationResult, integration: HyperIntegration) -> pd.DataFrame:
    """Mode, sd and posterior mean per hyperparameter.

    With a single design point the sd comes from the curvature (delta
    method) and the mean equals the mode; otherwise both come from the
    design weights.
    """
    curv = opt.summary()
    rows = []
    if len(integration) > 1:
        wsum = integration.summary()
        for n in NAMES:
            rows.append((n, curv[n][0], wsum[n][1], wsum[n][0], "ccd"))
    else:
        for n in NAMES:
            rows.append((n, curv[n][0], curv[n][1], curv[n][0], "curvature"))
    return pd.DataFrame(rows, columns=["parameter", "mode", "sd", "mean", "sd_source"])


def latent_table(asm: ModelAssembly, samples: PosteriorSampleSet, exact_fixed_var=None) -> pd.DataFrame:
    """Mean and sd of every latent component from the draws; fixed effects get exact sds if given."""
    mean, sd = samples.summary()
    T, n = asm.T, asm.n_mesh
    comp = np.concatenate(
        [
            np.repeat("u", T * n),
            np.repeat("z", asm.n_station),
            ["mu"],
            np.repeat("beta", asm.p),
        ]
    )
    index = np.concatenate([np.tile(np.arange(n), T), np.arange(asm.n_station), [0], np.arange(asm.p)])
    day = np.concatenate([np.repeat(np.arange(T), n), np.full(asm.n_station + asm.p + 1, -1)])
    names = [""] * (T * n)
    names += list(asm.stations.station_id) if len(asm.stations) else [str(i) for i in range(asm.n_station)]
    names += ["intercept"]
    names += list(asm.standardization.columns) if asm.standardization else [f"x{j}" for j in range(asm.p)]
    out = pd.DataFrame({"component": comp, "index": index, "day": day, "label": names, "mean": mean, "sd": sd})
    if exact_fixed_var is not None:
        out.loc[out.index[asm.fixed_slice], "sd"] = np.sqrt(exact_fixed_var)
    return out


def fit_month(
    dataset: Dataset,
    mesh: TriangularMesh,
    month: int,
    cfg: FitConfig | None = None,
    year: int | None = None,
    init: HyperParameters | None = None,
    fem=None,
) -> MonthlyFit:
    """Assemble, find the hyperparameter mode, explore, and draw joint samples."""
    cfg = cfg or FitConfig()
    fem = fem if fem is not None else fem_matrices(mesh)
    asm = assemble(
        dataset,
        mesh,
        month,
        year=year,
        min_obs=cfg.min_obs,
        predictors=cfg.predictors,
        unstandardized=UNSTANDARDIZED,
        fem=fem,
    )
    log.info(
        "month %d: %d observations, %d stations, %d days, %d mesh nodes (latent %d)",
        month,
        asm.n_obs,
        asm.n_station,
        asm.T,
        asm.n_mesh,
        asm.n_latent,
    )
    opt = optimize_hyperparameters(asm, init, cfg.optimizer, cfg.priors)
    integ = explore_hyperparameters(asm, opt.mode, opt.curvature, cfg.optimizer, cfg.priors)
    samples = sample_posterior(asm, integ, cfg.n_samples, cfg.seed, cfg.priors)
    post = asm.model(cfg.priors).conditional(opt.mode)
    fixed_idx = np.arange(asm.n_latent)[asm.fixed_slice]
    fixed_var = post.marginal_variances(fixed_idx)
    info = {
        "n_obs": asm.n_obs,
        "n_station": asm.n_station,
        "n_mesh": asm.n_mesh,
        "n_floored": asm.n_floored,
        "converged": opt.converged,
        "curvature_pd": opt.curvature_pd,
        "n_iter": opt.n_iter,
        "n_eval": opt.n_eval,
        "log_posterior_at_mode": opt.objective,
        "integration": cfg.optimizer.integration,
        "n_design_points": len(integ),
        "seed": cfg.seed,
        "fixed_effects_mode_mean": post.mean[asm.fixed_slice].tolist(),
        "fixed_effects_mode_sd": np.sqrt(fixed_var).tolist(),
    }
    return MonthlyFit(
        month=month,
        dates=asm.dates,
        mesh=mesh,
        stations=asm.stations,
        standardization=asm.standardization,
        samples=samples,
        hyper=hyper_table(opt, integ),
        latent=latent_table(asm, samples, fixed_var),
        info=info,
        assembly=asm,
        optimization=opt,
        integration=integ,
    )

"""Synthetic datasets drawn from the exact generative model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from airspde._cholesky import SparseCholesky
from airspde.data import PREDICTORS, STRATA, UNSTANDARDIZED, Dataset
from airspde.geometry import TriangularMesh, build_mesh, fem_matrices, projector
from airspde.inference.params import HyperParameters
from airspde.spacetime import Ar1Params, ar1_precision, spacetime_precision
from airspde.spde import MaternParams, matern_to_spde, spde_precision

# relative stratum sizes of the reference network (urban, suburban, rural)
STRATUM_WEIGHTS = (244, 104, 62)


@dataclass(frozen=True)
class SimulationSpec:
    """True parameters and layout of a synthetic dataset.

    The standard deviations may be arbitrarily small (noise-free limits);
    they are not bound by the fitting floor on ``sigma_epsilon``.
    """

    a: float = 0.629
    rho: float = 106.23
    sigma_omega: float = 0.434
    sigma_z: float = 0.247
    sigma_epsilon: float = 0.197
    mu: float = 3.5
    beta: tuple = (0.15, -0.1, 0.08, 0.05, -0.12)
    n_stations: int = 100
    coordinates: np.ndarray | None = None
    domain: tuple = (0.0, 0.0, 600.0, 600.0)
    T: int = 28
    start_date: str = "2015-02-01"
    predictors: tuple | None = None
    missing_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not -1 < self.a < 1:
            raise ValueError("a must lie in (-1, 1)")
        if min(self.rho, self.sigma_omega, self.sigma_z, self.sigma_epsilon) <= 0:
            raise ValueError("rho and standard deviations must be positive")
        if self.T < 1 or not 0 <= self.missing_fraction < 1:
            raise ValueError("need T >= 1 and missing_fraction in [0, 1)")
        if self.predictors is not None and len(self.predictors) != len(self.beta):
            raise ValueError("one predictor name per beta coefficient")

    @property
    def predictor_names(self) -> list[str]:
        if self.predictors is not None:
            return list(self.predictors)
        names = [p for p in PREDICTORS if p not in UNSTANDARDIZED]
        if len(self.beta) > len(names):
            names += [f"x{j}" for j in range(len(names), len(self.beta))]
        return names[: len(self.beta)]

    @property
    def theta(self) -> HyperParameters:
        return HyperParameters(
            self.a, self.rho, self.sigma_omega, self.sigma_z, max(self.sigma_epsilon, 1e-6)
        )


@dataclass
class SimulationResult:
    """Dataset plus the latent truth. ``log_y`` is aligned with ``dataset.observations``."""

    dataset: Dataset
    mesh: TriangularMesh
    u: np.ndarray  # (T, n_mesh)
    z: np.ndarray
    epsilon: np.ndarray
    log_y: np.ndarray
    spec: SimulationSpec = field(repr=False, default=None)

    def standardized_truth(self, standardization) -> tuple[float, np.ndarray]:
        """Intercept and coefficients expressed on a fitted standardized scale."""
        beta = np.asarray(self.spec.beta, dtype=np.float64)
        beta_std = beta * standardization.sds
        mu_std = self.spec.mu + float(beta @ standardization.means)
        return mu_std, beta_std


def station_layout(spec: SimulationSpec, rng: np.random.Generator) -> pd.DataFrame:
    if spec.coordinates is not None:
        xy = np.asarray(spec.coordinates, dtype=np.float64)
    else:
        x0, y0, x1, y1 = spec.domain
        xy = rng.uniform([x0, y0], [x1, y1], size=(spec.n_stations, 2))
    n = len(xy)
    w = np.asarray(STRATUM_WEIGHTS, dtype=np.float64)
    counts = np.floor(n * w / w.sum()).astype(int)
    counts[np.argsort(-(n * w / w.sum() - counts))[: n - counts.sum()]] += 1
    strata = rng.permutation(np.repeat(STRATA, counts))
    width = len(str(n - 1))
    return pd.DataFrame(
        {
            "station_id": [f"S{i:0{width}d}" for i in range(n)],
            "x_km": xy[:, 0],
            "y_km": xy[:, 1],
            "stratum": strata,
        }
    )


def simulation_mesh(stations: pd.DataFrame, rho: float) -> TriangularMesh:
    """Mesh with inner edges about rho/3 and an outer band of width rho."""
    xy = stations[["x_km", "y_km"]].to_numpy()
    edge = rho / 3.0
    return build_mesh(xy, edge, 3.0 * edge, cutoff=edge / 5.0, extension=rho)


def spatial_precision(mesh: TriangularMesh, spec: SimulationSpec):
    kappa, tau = matern_to_spde(MaternParams(spec.rho, spec.sigma_omega))
    return spde_precision(fem_matrices(mesh), kappa, tau)


def sample_latent(mesh: TriangularMesh, spec: SimulationSpec, rng: np.random.Generator) -> np.ndarray:
    """u ~ N(0, Q_st^-1) through the sparse space-time precision; returns (T, n_mesh)."""
    Q = spacetime_precision(ar1_precision(Ar1Params(spec.a, spec.T)), spatial_precision(mesh, spec))
    u = SparseCholesky(Q).sqrt_inv_t(rng.standard_normal(Q.shape[0]))
    return u.reshape(spec.T, mesh.n_vertices)


def sample_latent_dense(mesh: TriangularMesh, spec: SimulationSpec, rng: np.random.Generator) -> np.ndarray:
    """Independent path for small meshes: dense covariance, eigen square root."""
    Qs = spatial_precision(mesh, spec).toarray()
    T = spec.T
    t = np.arange(T)
    cov_t = spec.a ** np.abs(t[:, None] - t[None, :]) / (1.0 - spec.a**2)
    cov = np.kron(cov_t, np.linalg.inv(Qs))
    w, V = np.linalg.eigh(0.5 * (cov + cov.T))
    u = V @ (np.sqrt(np.clip(w, 0.0, None)) * rng.standard_normal(len(w)))
    return u.reshape(T, mesh.n_vertices)


def simulate_dataset(
    spec: SimulationSpec, mesh: TriangularMesh | None = None, dense: bool = False
) -> SimulationResult:
    """Draw stations, covariates, latent field, station effects and noise.

    Covariates are iid standard normal per station-day. Concentrations are
    written as ``exp(y)``; the log values are kept in the result.
    """
    rng = np.random.default_rng(spec.seed)
    stations = station_layout(spec, rng)
    if mesh is None:
        mesh = simulation_mesh(stations, spec.rho)
    xy = stations[["x_km", "y_km"]].to_numpy()
    P = projector(mesh, xy)
    if P.outside.any():
        raise ValueError("simulated stations must lie inside the mesh")

    u = sample_latent_dense(mesh, spec, rng) if dense else sample_latent(mesh, spec, rng)
    n_st = len(stations)
    z = spec.sigma_z * rng.standard_normal(n_st)
    names = spec.predictor_names
    dates = pd.date_range(spec.start_date, periods=spec.T, freq="D")

    # day-major rows: (day 0, all stations), (day 1, all stations), ...
    day = np.repeat(np.arange(spec.T), n_st)
    st = np.tile(np.arange(n_st), spec.T)
    X = rng.standard_normal((len(day), len(names)))
    eps = spec.sigma_epsilon * rng.standard_normal(len(day))
    u_at = (P.A @ u.T).T  # (T, n_st)
    log_y = spec.mu + X @ np.asarray(spec.beta, dtype=np.float64) + u_at[day, st] + z[st] + eps

    covariates = pd.DataFrame({"station_id": stations.station_id.to_numpy()[st], "date": dates[day]})
    for j, name in enumerate(names):
        covariates[name] = X[:, j]
    observations = covariates[["station_id", "date"]].copy()
    observations["pm10"] = np.exp(log_y)
    if spec.missing_fraction > 0:
        drop = rng.random(len(day)) < spec.missing_fraction
        observations.loc[drop, "pm10"] = np.nan

    return SimulationResult(
        dataset=Dataset(stations, observations, covariates),
        mesh=mesh,
        u=u,
        z=z,
        epsilon=eps,
        log_y=log_y,
        spec=spec,
    )

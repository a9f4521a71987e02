"""Latent Gaussian model for one month: assembly, exact conditioning and marginal likelihood.

Observation model on the log scale::

    y = mu + x beta + u(t, s) + z(s) + eps

The latent vector is ordered ``(u day-major, z, mu, beta)``. Because the
likelihood is Gaussian the conditional posterior of the latent vector given
the hyperparameters is exactly Gaussian, so the marginal likelihood follows
from two log-determinants and a quadratic form.
"""

from __future__ import annotations

import calendar
import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import pandas as pd
import scipy.sparse as sp

from airspde._cholesky import NotPositiveDefiniteError, SparseCholesky
from airspde.data import UNSTANDARDIZED, Dataset
from airspde.geometry import FemMatrices, TriangularMesh, fem_matrices, projector
from airspde.inference.params import HyperParameters, log_jacobian
from airspde.priors import (
    PriorSet,
    pc_ar1_logdensity,
    pc_matern_logdensity,
    pc_sd_logdensity,
)
from airspde.spde import MaternParams, matern_to_spde, spde_components

log = logging.getLogger(__name__)

LOG_FLOOR_UGM3 = 0.5


class AssemblyError(ValueError):
    """The data cannot be turned into a well-posed monthly model."""


class InferenceError(ArithmeticError):
    """Numerical failure at a given hyperparameter value."""

    def __init__(self, message: str, theta: HyperParameters | None = None):
        self.theta = theta
        ctx = f" at {theta}" if theta is not None else ""
        super().__init__(message + ctx)


@dataclass
class Standardization:
    """Column means and standard deviations applied to raw predictors."""

    columns: list[str]
    means: np.ndarray
    sds: np.ndarray

    @classmethod
    def fit(cls, raw: np.ndarray, columns, unstandardized=UNSTANDARDIZED) -> "Standardization":
        raw = np.asarray(raw, dtype=np.float64).reshape(len(raw), len(columns))
        means = raw.mean(axis=0) if len(raw) else np.zeros(len(columns))
        sds = raw.std(axis=0, ddof=1) if len(raw) > 1 else np.ones(len(columns))
        sds = np.where(sds > 0, sds, 1.0)
        for j, name in enumerate(columns):
            if name in unstandardized:
                means[j], sds[j] = 0.0, 1.0
        return cls(list(columns), means, sds)

    def apply(self, raw: np.ndarray) -> np.ndarray:
        return (np.asarray(raw, dtype=np.float64) - self.means) / self.sds

    def to_dict(self) -> dict:
        return {"columns": self.columns, "means": self.means.tolist(), "sds": self.sds.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardization":
        return cls(list(d["columns"]), np.asarray(d["means"], float), np.asarray(d["sds"], float))


@dataclass(eq=False)
class ModelAssembly:
    """Design of one monthly model. Treat as immutable once built.

    ``X`` holds the intercept in column 0 followed by the standardized
    predictors; ``A_st`` maps the day-major latent field to observations.
    """

    y: np.ndarray
    X: np.ndarray
    A_st: sp.csr_matrix
    station_index: np.ndarray
    day_index: np.ndarray
    T: int
    mesh: TriangularMesh
    fem: FemMatrices
    station_projector: sp.csr_matrix
    stations: pd.DataFrame = field(default_factory=pd.DataFrame)
    standardization: Standardization | None = None
    dates: pd.DatetimeIndex | None = None
    obs: pd.DataFrame = field(default_factory=pd.DataFrame)
    n_floored: int = 0

    @property
    def n_obs(self) -> int:
        return len(self.y)

    @property
    def n_mesh(self) -> int:
        return self.mesh.n_vertices

    @property
    def n_station(self) -> int:
        return self.station_projector.shape[0]

    @property
    def p(self) -> int:
        """Number of predictors, excluding the intercept."""
        return self.X.shape[1] - 1

    @property
    def n_latent(self) -> int:
        return self.T * self.n_mesh + self.n_station + self.X.shape[1]

    @property
    def u_slice(self) -> slice:
        return slice(0, self.T * self.n_mesh)

    @property
    def z_slice(self) -> slice:
        s = self.T * self.n_mesh
        return slice(s, s + self.n_station)

    @property
    def fixed_slice(self) -> slice:
        s = self.T * self.n_mesh + self.n_station
        return slice(s, s + self.X.shape[1])

    @cached_property
    def design(self) -> sp.csr_matrix:
        """Full map B from the latent vector to the observation means."""
        Z = sp.csr_matrix(
            (np.ones(self.n_obs), (np.arange(self.n_obs), self.station_index)),
            shape=(self.n_obs, self.n_station),
        )
        return sp.hstack([self.A_st, Z, sp.csr_matrix(self.X)], format="csr")

    def rows_design(self, station_rows: sp.csr_matrix, day_index, X_rows, station_index=None):
        """Design rows for arbitrary (location, day) pairs.

        ``station_rows`` is a projector (one row per pair); ``station_index``
        selects the fitted station effect, or ``None``/-1 to leave it out.
        """
        n = station_rows.shape[0]
        day_index = np.asarray(day_index, dtype=np.int64)
        A = _day_blocked(station_rows, day_index, self.T, self.n_mesh)
        if station_index is None:
            station_index = np.full(n, -1)
        station_index = np.asarray(station_index)
        has = station_index >= 0
        Z = sp.csr_matrix(
            (np.ones(has.sum()), (np.flatnonzero(has), station_index[has])),
            shape=(n, self.n_station),
        )
        return sp.hstack([A, Z, sp.csr_matrix(np.asarray(X_rows, float))], format="csr")

    @classmethod
    def from_arrays(
        cls,
        mesh: TriangularMesh,
        station_xy,
        station_index,
        day_index,
        y,
        X,
        T: int,
        fem: FemMatrices | None = None,
    ) -> "ModelAssembly":
        """Low-level constructor; ``X`` must already include the intercept column."""
        P = projector(mesh, station_xy)
        if P.outside.any():
            bad = int(np.flatnonzero(P.outside)[0])
            raise AssemblyError(f"station {bad} lies outside the mesh")
        station_index = np.asarray(station_index, dtype=np.int64)
        day_index = np.asarray(day_index, dtype=np.int64)
        y = np.asarray(y, dtype=np.float64)
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(len(y), -1)
        A_st = _day_blocked(P.A[station_index], day_index, T, mesh.n_vertices)
        return cls(
            y=y,
            X=X,
            A_st=A_st,
            station_index=station_index,
            day_index=day_index,
            T=int(T),
            mesh=mesh,
            fem=fem if fem is not None else fem_matrices(mesh),
            station_projector=P.A,
        )

    def restrict_days(self, k: int) -> "ModelAssembly":
        """Same model on the first ``k`` days only (used for cheap pilot fits)."""
        k = int(min(max(k, 1), self.T))
        keep = self.day_index < k
        return ModelAssembly(
            y=self.y[keep],
            X=self.X[keep],
            A_st=self.A_st[keep][:, : k * self.n_mesh].tocsr(),
            station_index=self.station_index[keep],
            day_index=self.day_index[keep],
            T=k,
            mesh=self.mesh,
            fem=self.fem,
            station_projector=self.station_projector,
            stations=self.stations,
            standardization=self.standardization,
            dates=None if self.dates is None else self.dates[:k],
        )

    def model(self, priors: PriorSet | None = None, backend: str = "auto") -> "LatentGaussianModel":
        """Cached evaluator for this assembly."""
        priors = priors or PriorSet()
        cache = self.__dict__.setdefault("_models", {})
        key = (priors, backend)
        if key not in cache:
            cache[key] = LatentGaussianModel(self, priors, backend)
        return cache[key]


def _day_blocked(rows: sp.csr_matrix, day_index: np.ndarray, T: int, n_mesh: int) -> sp.csr_matrix:
    rows = sp.csr_matrix(rows)
    coo = rows.tocoo()
    cols = coo.col + day_index[coo.row] * n_mesh
    return sp.csr_matrix((coo.data, (coo.row, cols)), shape=(rows.shape[0], T * n_mesh))


def month_dates(year: int, month: int) -> pd.DatetimeIndex:
    days = calendar.monthrange(year, month)[1]
    return pd.date_range(f"{year:04d}-{month:02d}-01", periods=days, freq="D")


def assemble(
    dataset: Dataset,
    mesh: TriangularMesh,
    month: int,
    year: int | None = None,
    min_obs: int = 10,
    predictors=None,
    unstandardized=UNSTANDARDIZED,
    standardization: Standardization | None = None,
    fem: FemMatrices | None = None,
) -> ModelAssembly:
    """Build the monthly model from a dataset.

    Stations with fewer than ``min_obs`` valid observations in the month are
    dropped. Responses are ``log(max(pm10, 0.5))``; the number of floored
    zeros is kept in ``n_floored``. Predictors are standardized with
    statistics of this month's observed rows unless ``standardization`` is
    given (prediction-time reuse).
    """
    if not 1 <= month <= 12:
        raise AssemblyError(f"month must be in 1..12, got {month}")
    predictors = list(predictors) if predictors is not None else dataset.predictors
    obs = dataset.observations
    in_month = obs["date"].dt.month == month
    if year is not None:
        in_month &= obs["date"].dt.year == year
    obs = obs[in_month & obs["pm10"].notna()]
    if year is None:
        years = obs["date"].dt.year.unique()
        if len(years) != 1:
            raise AssemblyError(f"cannot infer the year of month {month}: found {sorted(years)}")
        year = int(years[0])
    dates = month_dates(year, month)

    counts = obs.groupby("station_id").size()
    keep = counts[counts >= min_obs].index
    stations = dataset.stations[dataset.stations.station_id.isin(keep)]
    stations = stations.sort_values("station_id").reset_index(drop=True)
    obs = obs[obs.station_id.isin(stations.station_id)]
    dropped = len(counts) - len(keep)
    if dropped:
        log.info("month %d: dropped %d station(s) with < %d observations", month, dropped, min_obs)
    if stations.empty:
        raise AssemblyError(f"month {month}: no station has at least {min_obs} observations")

    cov = dataset.covariates[["station_id", "date", *predictors]]
    merged = obs.merge(cov, on=["station_id", "date"], how="left", indicator=True)
    merged = merged.sort_values(["date", "station_id"]).reset_index(drop=True)
    raw = merged[predictors].to_numpy(dtype=np.float64)
    missing = ~np.isfinite(raw).all(axis=1)
    if missing.any():
        i = int(np.flatnonzero(missing)[0])
        raise AssemblyError(
            f"missing covariates for station {merged.station_id[i]!r} on {merged.date[i].date()}"
        )
    if standardization is None:
        standardization = Standardization.fit(raw, predictors, unstandardized)
        sds = raw.std(axis=0) if len(raw) else np.ones(len(predictors))
        # an all-zero indicator (e.g. no dust days) is identifiable, just uninformed
        allzero = ~np.any(raw != 0, axis=0) if len(raw) else np.zeros(len(predictors), bool)
        constant = [n for n, s, z in zip(predictors, sds, allzero) if not s > 0 and not z]
        for name in np.asarray(predictors)[allzero]:
            log.warning("month %d: predictor %s is identically zero", month, name)
        if constant:
            raise AssemblyError(f"covariate(s) constant within the month: {', '.join(constant)}")
    X = np.column_stack([np.ones(len(merged)), standardization.apply(raw)])

    pm10 = merged["pm10"].to_numpy(dtype=np.float64)
    floored = pm10 < LOG_FLOOR_UGM3
    y = np.log(np.maximum(pm10, LOG_FLOOR_UGM3))

    station_pos = pd.Series(np.arange(len(stations)), index=stations.station_id)
    station_index = station_pos.loc[merged.station_id].to_numpy()
    day_index = (merged["date"] - dates[0]).dt.days.to_numpy()

    xy = stations[["x_km", "y_km"]].to_numpy(dtype=np.float64)
    P = projector(mesh, xy)
    if P.outside.any():
        bad = stations.station_id.iloc[int(np.flatnonzero(P.outside)[0])]
        raise AssemblyError(f"station {bad!r} lies outside the mesh")
    A_st = _day_blocked(P.A[station_index], day_index, len(dates), mesh.n_vertices)

    obs_table = merged[["station_id", "date", "pm10"]].copy()
    obs_table["day"] = day_index
    obs_table["station"] = station_index
    obs_table["floored"] = floored
    return ModelAssembly(
        y=y,
        X=X,
        A_st=A_st,
        station_index=station_index,
        day_index=day_index,
        T=len(dates),
        mesh=mesh,
        fem=fem if fem is not None else fem_matrices(mesh),
        station_projector=P.A,
        stations=stations,
        standardization=standardization,
        dates=dates,
        obs=obs_table,
        n_floored=int(floored.sum()),
    )


class _PatternMap:
    """Fixed CSC pattern for a sum of sparse terms, with a scatter map per term."""

    def __init__(self, shape, terms):
        n = shape[0]
        keys = np.concatenate([c.astype(np.int64) * n + r for r, c in terms])
        uniq, inverse = np.unique(keys, return_inverse=True)
        self.shape = shape
        self.indices = (uniq % n).astype(np.int32)
        cols = uniq // n
        self.indptr = np.concatenate([[0], np.cumsum(np.bincount(cols, minlength=shape[1]))]).astype(
            np.int32
        )
        self.nnz = len(uniq)
        self.positions = inverse.ravel()

    def matrix(self, values: np.ndarray) -> sp.csc_matrix:
        data = np.bincount(self.positions, weights=values, minlength=self.nnz)
        return sp.csc_matrix((data, self.indices, self.indptr), shape=self.shape)


def _coo_parts(M) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    M = sp.coo_matrix(M)
    return M.row.astype(np.int64), M.col.astype(np.int64), M.data.astype(np.float64)


@dataclass
class LatentPosterior:
    """Gaussian conditional of the latent vector given hyperparameters."""

    mean: np.ndarray
    factor: SparseCholesky
    theta_at: HyperParameters

    def marginal_variances(self, indices=None, block: int = 256) -> np.ndarray:
        """Exact diagonal of the conditional covariance at ``indices`` (all by default)."""
        n = len(self.mean)
        idx = np.arange(n) if indices is None else np.asarray(indices, dtype=np.int64)
        out = np.empty(len(idx))
        for start in range(0, len(idx), block):
            chunk = idx[start : start + block]
            E = np.zeros((n, len(chunk)))
            E[chunk, np.arange(len(chunk))] = 1.0
            S = self.factor.solve(E)
            out[start : start + block] = S[chunk, np.arange(len(chunk))]
        return out

    def draw(self, z: np.ndarray) -> np.ndarray:
        """Map standard normals (n_latent,) or (n_latent, k) to conditional draws."""
        x = self.factor.sqrt_inv_t(z)
        return x + (self.mean[:, None] if x.ndim == 2 else self.mean)


class LatentGaussianModel:
    """Evaluates precisions, conditionals and the hyperparameter posterior for one assembly.

    Prior and posterior precisions are assembled onto one fixed sparsity
    pattern so a single symbolic Cholesky analysis serves every
    hyperparameter value.
    """

    def __init__(self, assembly: ModelAssembly, priors: PriorSet | None = None, backend: str = "auto"):
        self.assembly = assembly
        self.priors = priors or PriorSet()
        self.backend = backend
        self._ar1_rate = self.priors.ar1.rate
        self._build_templates()
        self._symbolic = None
        self._qs_symbolic = None

    def _build_templates(self) -> None:
        asm = self.assembly
        n, T = asm.n_mesh, asm.T
        C, G, GCG = spde_components(asm.fem)
        # spatial pattern shared by the three FEM terms
        self._qs_map = _PatternMap(
            (n, n), [(r, c) for r, c, _ in (_coo_parts(M) for M in (C, G, GCG))]
        )
        self._qs_terms = [_coo_parts(M)[2] for M in (C, G, GCG)]
        qs_rows = self._qs_map.indices.astype(np.int64)
        qs_cols = np.repeat(np.arange(n), np.diff(self._qs_map.indptr))

        # AR(1) entries: diagonal then the two off-diagonals (kept even when a = 0)
        t = np.arange(T)
        ar_rows = np.concatenate([t, t[:-1], t[1:]])
        ar_cols = np.concatenate([t, t[1:], t[:-1]])
        self._ar_T = T

        kron_rows = (ar_rows[:, None] * n + qs_rows[None, :]).ravel()
        kron_cols = (ar_cols[:, None] * n + qs_cols[None, :]).ravel()

        N = asm.n_latent
        diag_rest = np.arange(T * n, N)
        B = asm.design
        BtB = (B.T @ B).tocoo()
        self._Bty = B.T @ asm.y
        terms = [(kron_rows, kron_cols), (diag_rest, diag_rest), (BtB.row.astype(np.int64), BtB.col.astype(np.int64))]
        self._post_map = _PatternMap((N, N), terms)
        self._prior_map = _PatternMap((N, N), terms[:2])
        self._btb_vals = BtB.data
        self._n_kron = len(kron_rows)
        self._n_z = asm.n_station
        self._n_fixed = asm.X.shape[1]

    # ----------------------------------------------------------------- pieces
    def _ar1_values(self, a: float) -> np.ndarray:
        T = self._ar_T
        if T == 1:
            return np.array([1.0 - a * a])
        diag = np.full(T, 1.0 + a * a)
        diag[0] = diag[-1] = 1.0
        off = np.full(T - 1, -a)
        return np.concatenate([diag, off, off])

    def _qs_values(self, theta: HyperParameters) -> np.ndarray:
        kappa, tau = matern_to_spde(MaternParams(theta.rho, theta.sigma_omega))
        c, g, gcg = self._qs_terms
        vals = (tau * tau) * np.concatenate([kappa**4 * c, 2.0 * kappa**2 * g, gcg])
        return vals

    def spatial_precision(self, theta: HyperParameters) -> sp.csc_matrix:
        return self._qs_map.matrix(self._qs_values(theta))

    def _prior_values(self, theta: HyperParameters) -> np.ndarray:
        qs = self.spatial_precision(theta).data
        kron = np.outer(self._ar1_values(theta.a), qs).ravel()
        rest = np.concatenate(
            [
                np.full(self._n_z, 1.0 / theta.sigma_z**2),
                np.full(self._n_fixed, self.priors.fixed_effect_precision),
            ]
        )
        return np.concatenate([kron, rest])

    def prior_precision(self, theta: HyperParameters) -> sp.csc_matrix:
        return self._prior_map.matrix(self._prior_values(theta))

    def posterior_precision(self, theta: HyperParameters) -> sp.csc_matrix:
        vals = np.concatenate([self._prior_values(theta), self._btb_vals / theta.sigma_epsilon**2])
        return self._post_map.matrix(vals)

    def _factor(self, Q: sp.csc_matrix, theta: HyperParameters) -> SparseCholesky:
        try:
            if self._symbolic is None and self.backend != "scipy":
                self._symbolic = SparseCholesky.symbolic(Q)
            return SparseCholesky(Q, backend=self.backend, symbolic=self._symbolic)
        except NotPositiveDefiniteError as err:
            raise InferenceError(f"posterior precision not positive definite ({err})", theta) from err

    def _spatial_logdet(self, theta: HyperParameters) -> float:
        Qs = self.spatial_precision(theta)
        try:
            if self._qs_symbolic is None and self.backend != "scipy":
                self._qs_symbolic = SparseCholesky.symbolic(Qs)
            return SparseCholesky(Qs, backend=self.backend, symbolic=self._qs_symbolic).logdet()
        except NotPositiveDefiniteError as err:
            raise InferenceError(f"spatial precision not positive definite ({err})", theta) from err

    def prior_logdet(self, theta: HyperParameters) -> float:
        asm = self.assembly
        return (
            asm.n_mesh * np.log1p(-theta.a**2)
            + asm.T * self._spatial_logdet(theta)
            - 2.0 * asm.n_station * np.log(theta.sigma_z)
            + self._n_fixed * np.log(self.priors.fixed_effect_precision)
        )

    def prior_quadratic(self, x: np.ndarray, theta: HyperParameters) -> float:
        asm = self.assembly
        U = x[asm.u_slice].reshape(asm.T, asm.n_mesh)
        Qs = self.spatial_precision(theta)
        M = U @ (Qs @ U.T)
        a = theta.a
        if asm.T == 1:
            quad_u = (1.0 - a * a) * M[0, 0]
        else:
            d = np.diag(M).copy()
            quad_u = d.sum() + a * a * d[1:-1].sum() - 2.0 * a * np.trace(M, offset=1)
        z = x[asm.z_slice]
        f = x[asm.fixed_slice]
        return float(
            quad_u + z @ z / theta.sigma_z**2 + self.priors.fixed_effect_precision * (f @ f)
        )

    # ----------------------------------------------------------------- public
    def conditional(self, theta: HyperParameters) -> LatentPosterior:
        Q = self.posterior_precision(theta)
        factor = self._factor(Q, theta)
        mean = factor.solve(self._Bty / theta.sigma_epsilon**2)
        return LatentPosterior(mean=mean, factor=factor, theta_at=theta)

    def log_marginal_likelihood(self, theta: HyperParameters, posterior: LatentPosterior | None = None) -> float:
        asm = self.assembly
        if asm.n_obs == 0:
            return 0.0
        post = posterior or self.conditional(theta)
        x = post.mean
        resid = asm.y - asm.design @ x
        s2 = theta.sigma_epsilon**2
        value = (
            0.5 * self.prior_logdet(theta)
            - 0.5 * post.factor.logdet()
            - 0.5 * self.prior_quadratic(x, theta)
            - 0.5 * asm.n_obs * np.log(2.0 * np.pi * s2)
            - 0.5 * (resid @ resid) / s2
        )
        if not np.isfinite(value):
            raise InferenceError("non-finite log marginal likelihood", theta)
        return float(value)

    def log_prior(self, theta: HyperParameters) -> float:
        """Hyperprior log-density on the internal scale (Jacobian included)."""
        p = self.priors
        return float(
            pc_ar1_logdensity(theta.a, p.ar1, rate=self._ar1_rate)
            + pc_matern_logdensity(theta.rho, theta.sigma_omega, p.matern)
            + pc_sd_logdensity(theta.sigma_z, p.sigma_z)
            + pc_sd_logdensity(theta.sigma_epsilon, p.sigma_epsilon)
            + log_jacobian(theta.to_internal())
        )

    def log_hyper_posterior(self, theta: HyperParameters) -> float:
        return self.log_marginal_likelihood(theta) + self.log_prior(theta)

    def log_hyper_posterior_internal(self, t) -> float:
        return self.log_hyper_posterior(HyperParameters.from_internal(t))


def log_marginal_likelihood(assembly: ModelAssembly, theta: HyperParameters, priors=None) -> float:
    return assembly.model(priors).log_marginal_likelihood(theta)


def log_hyper_posterior(assembly: ModelAssembly, theta: HyperParameters, priors=None) -> float:
    """Log marginal likelihood plus hyperpriors and the internal-scale Jacobian.

    The vague Gaussian prior on (mu, beta) is part of the latent prior and is
    therefore already integrated into the marginal likelihood.
    """
    return assembly.model(priors).log_hyper_posterior(theta)


def latent_conditional(assembly: ModelAssembly, theta: HyperParameters, priors=None) -> LatentPosterior:
    return assembly.model(priors).conditional(theta)

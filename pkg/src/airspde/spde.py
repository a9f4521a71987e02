"""Matérn (nu = 1) fields on a triangulation via the SPDE/GMRF representation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import kv

from airspde._cholesky import NotPositiveDefiniteError, cholesky
from airspde.geometry import FemMatrices

NU = 1.0


@dataclass(frozen=True)
class MaternParams:
    """Range ``rho`` (km, correlation ~0.1) and marginal sd ``sigma``; smoothness fixed at 1."""

    rho: float
    sigma: float

    def __post_init__(self):
        if not (self.rho > 0 and self.sigma > 0):
            raise ValueError(f"rho and sigma must be positive, got {self.rho}, {self.sigma}")

    @property
    def nu(self) -> float:
        return NU


def matern_to_spde(params: MaternParams) -> tuple[float, float]:
    """Return ``(kappa, tau)`` with kappa = sqrt(8 nu)/rho and sigma^2 = 1/(4 pi kappa^2 tau^2)."""
    kappa = np.sqrt(8.0 * NU) / params.rho
    tau = 1.0 / (np.sqrt(4.0 * np.pi) * kappa * params.sigma)
    return float(kappa), float(tau)


def spde_to_matern(kappa: float, tau: float) -> MaternParams:
    rho = np.sqrt(8.0 * NU) / kappa
    sigma = 1.0 / (np.sqrt(4.0 * np.pi) * kappa * tau)
    return MaternParams(rho=float(rho), sigma=float(sigma))


def matern_correlation(h, params: MaternParams):
    """Matérn correlation (kappa h) K_1(kappa h), equal to 1 at h = 0."""
    h = np.asarray(h, dtype=np.float64)
    if np.any(h < 0):
        raise ValueError("distances must be non-negative")
    kappa = np.sqrt(8.0 * NU) / params.rho
    x = kappa * h
    with np.errstate(invalid="ignore", over="ignore"):
        r = np.where(x > 0, x * kv(1.0, np.where(x > 0, x, 1.0)), 1.0)
    # K_1 underflows to 0 far out; the product is then 0 as well
    r = np.nan_to_num(r, nan=0.0)
    return float(r) if r.ndim == 0 else r


def spde_precision(fem: FemMatrices, kappa: float, tau: float, check: bool = False) -> sp.csc_matrix:
    """Q = tau^2 (kappa^4 C + 2 kappa^2 G + G C^-1 G) with lumped mass C.

    With ``check=True`` the matrix is Cholesky-factored and a
    :class:`NotPositiveDefiniteError` raised on failure.
    """
    if not (kappa > 0 and tau > 0):
        raise ValueError("kappa and tau must be positive")
    C, G, GCG = spde_components(fem)
    Q = (tau**2) * ((kappa**4) * C + (2.0 * kappa**2) * G + GCG)
    Q = Q.tocsc()
    if check:
        try:
            cholesky(Q)
        except NotPositiveDefiniteError as err:
            raise NotPositiveDefiniteError(
                f"spatial precision not positive definite (kappa={kappa}, tau={tau})"
            ) from err
    return Q


def spde_components(fem: FemMatrices) -> tuple[sp.csc_matrix, sp.csc_matrix, sp.csc_matrix]:
    """The three fixed matrices (C, G, G C^-1 G) combined by :func:`spde_precision`."""
    c_inv = sp.diags(1.0 / fem.c_diag)
    GCG = (fem.G @ c_inv @ fem.G).tocsc()
    GCG = 0.5 * (GCG + GCG.T)
    return fem.C.tocsc(), fem.G.tocsc(), GCG.tocsc()

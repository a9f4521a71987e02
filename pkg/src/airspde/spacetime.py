"""AR(1)-in-time, SPDE-in-space separable precision of the latent field."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class Ar1Params:
    a: float
    T: int

    def __post_init__(self):
        if not -1.0 < self.a < 1.0:
            raise ValueError(f"AR(1) coefficient must lie in (-1, 1), got {self.a}")
        if self.T < 1:
            raise ValueError(f"need at least one time step, got T={self.T}")


def ar1_precision(params: Ar1Params) -> sp.csc_matrix:
    """Precision of a stationary AR(1) with unit innovation variance.

    Tridiagonal with diagonal (1, 1+a^2, ..., 1+a^2, 1) and off-diagonal -a;
    ``T == 1`` gives the 1x1 matrix ``1 - a^2``.
    """
    a, T = params.a, params.T
    if T == 1:
        return sp.csc_matrix(np.array([[1.0 - a * a]]))
    diag = np.full(T, 1.0 + a * a)
    diag[0] = diag[-1] = 1.0
    off = np.full(T - 1, -a)
    return sp.diags([off, diag, off], [-1, 0, 1], format="csc")


def ar1_logdet(params: Ar1Params) -> float:
    """log det of :func:`ar1_precision`, which is log(1 - a^2) for every T."""
    return float(np.log1p(-params.a**2))


class DimensionError(ValueError):
    """Latent space-time dimension above the configured limit."""


def spacetime_precision(q_ar1, q_s, max_dim: int | None = None) -> sp.csc_matrix:
    """Kronecker product ``Q_ar1 (x) Q_s``; day ``t`` occupies rows ``t*n .. (t+1)*n - 1``."""
    T = q_ar1.shape[0]
    n = q_s.shape[0]
    if max_dim is not None and T * n > max_dim:
        raise DimensionError(f"latent dimension {T}*{n}={T * n} exceeds limit {max_dim}")
    return sp.kron(sp.csc_matrix(q_ar1), sp.csc_matrix(q_s), format="csc")

"""Sparse Cholesky factorization with a CHOLMOD backend and a SciPy fallback.

The factor exposes the three things the GMRF code needs: solves with the full
matrix, the log-determinant, and the transposed square-root solve used to
turn standard-normal innovations into draws from N(0, Q^-1).

CHOLMOD (via scikit-sparse) is used when importable. Otherwise the matrix is
factored with SuperLU in symmetric mode without pivoting, which for an SPD
matrix yields P Q P' = L D L' with unit-lower L.
"""

from __future__ import annotations

import logging

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from airspde._blas import pin_openblas_core

log = logging.getLogger(__name__)

pin_openblas_core()

try:
    from sksparse.cholmod import CholmodNotPositiveDefiniteError, analyze
except ImportError:  # pragma: no cover - depends on the environment
    analyze = None
    CholmodNotPositiveDefiniteError = None

HAVE_CHOLMOD = analyze is not None

_SUPERNODAL_OK = None


def _supernodal_ok() -> bool:
    """Check once that CHOLMOD's supernodal (BLAS-backed) path gives correct factors.

    Some OpenBLAS kernel autodetections break it; CHOLMOD then reports spurious
    non-positive-definiteness or returns wrong factors. Simplicial mode does
    not touch BLAS and is used instead.
    """
    global _SUPERNODAL_OK
    if _SUPERNODAL_OK is None:
        n = 12
        eye = sp.identity(n)
        lap = sp.diags([-1.0, 2.1, -1.0], [-1, 0, 1], shape=(n, n))
        Q = (
            sp.kron(sp.kron(lap, eye), eye)
            + sp.kron(sp.kron(eye, lap), eye)
            + sp.kron(sp.kron(eye, eye), lap)
        ).tocsc()
        b = np.linspace(-1.0, 1.0, Q.shape[0])
        try:
            x = analyze(Q, mode="supernodal").cholesky(Q)(b)
            _SUPERNODAL_OK = bool(np.max(np.abs(Q @ x - b)) < 1e-8)
        except CholmodNotPositiveDefiniteError:
            _SUPERNODAL_OK = False
        if not _SUPERNODAL_OK:
            log.warning(
                "CHOLMOD supernodal factors failed a self-check, using the slower simplicial mode; "
                "set OPENBLAS_CORETYPE=Haswell or import airspde before scipy.stats/scipy.integrate"
            )
    return _SUPERNODAL_OK


def _cholmod_mode() -> str:
    return "supernodal" if _supernodal_ok() else "simplicial"


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a precision matrix fails to factor."""


def _as_csc(Q) -> sp.csc_matrix:
    Q = sp.csc_matrix(Q, dtype=np.float64)
    Q.sort_indices()
    return Q


class SparseCholesky:
    """Cholesky factor of a sparse symmetric positive definite matrix.

    Parameters
    ----------
    Q : sparse matrix
        Symmetric positive definite matrix (both triangles stored).
    backend : {"auto", "cholmod", "scipy"}
        Factorization engine. ``"auto"`` prefers CHOLMOD.
    symbolic : object, optional
        Reusable symbolic analysis returned by :meth:`symbolic`. Only used by
        the CHOLMOD backend; matrices must share the sparsity pattern.
    """

    def __init__(self, Q, backend: str = "auto", symbolic=None):
        if backend == "auto":
            backend = "cholmod" if HAVE_CHOLMOD else "scipy"
        if backend == "cholmod" and not HAVE_CHOLMOD:
            raise ImportError("scikit-sparse is not installed")
        if backend not in ("cholmod", "scipy"):
            raise ValueError(f"unknown backend {backend!r}")
        Q = _as_csc(Q)
        self.n = Q.shape[0]
        if self.n == 0:
            backend = "scipy"
        self.backend = backend
        if backend == "cholmod":
            self._init_cholmod(Q, symbolic)
        else:
            self._init_scipy(Q)

    @staticmethod
    def symbolic(Q):
        """Symbolic analysis to reuse across numeric factorizations (CHOLMOD only)."""
        if not HAVE_CHOLMOD:
            return None
        return analyze(_as_csc(Q), mode=_cholmod_mode(), ordering_method="metis")

    def _init_cholmod(self, Q, symbolic):
        try:
            if symbolic is None:
                factor = analyze(Q, mode=_cholmod_mode()).cholesky(Q)
            else:
                factor = symbolic.cholesky(Q)
        except CholmodNotPositiveDefiniteError as err:
            raise NotPositiveDefiniteError(str(err)) from err
        self._factor = factor

    def _init_scipy(self, Q):
        if self.n == 0:
            self._lu = None
            self._perm = np.zeros(0, dtype=int)
            self._d = np.zeros(0)
            self._L = sp.csr_matrix((0, 0))
            return
        try:
            lu = spla.splu(
                Q,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options={"SymmetricMode": True},
            )
        except RuntimeError as err:
            raise NotPositiveDefiniteError(str(err)) from err
        d = lu.U.diagonal()
        if not np.all(np.isfinite(d)) or np.any(d <= 0.0):
            raise NotPositiveDefiniteError("matrix is not positive definite")
        if not np.array_equal(lu.perm_r, lu.perm_c):
            raise NotPositiveDefiniteError("factorization required pivoting")
        self._lu = lu
        self._perm = lu.perm_c
        self._d = d
        self._L = sp.csr_matrix(lu.L)

    def logdet(self) -> float:
        """log det Q."""
        if self.backend == "cholmod":
            return float(self._factor.logdet())
        return float(np.sum(np.log(self._d)))

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve Q x = b for a vector or a column block."""
        b = np.asarray(b, dtype=np.float64)
        if self.backend == "cholmod":
            return self._factor(b)
        if self.n == 0:
            return b.copy()
        return self._lu.solve(b)

    def sqrt_inv_t(self, z: np.ndarray) -> np.ndarray:
        """Return x with Cov(x) = Q^-1 when z has iid standard-normal entries.

        Works column-wise for 2-D input.
        """
        z = np.asarray(z, dtype=np.float64)
        if self.backend == "cholmod":
            w = self._factor.solve_Lt(z, use_LDLt_decomposition=False)
            return self._factor.apply_Pt(w)
        if self.n == 0:
            return z.copy()
        scaled = z / (np.sqrt(self._d)[:, None] if z.ndim == 2 else np.sqrt(self._d))
        w = spla.spsolve_triangular(self._L.T.tocsr(), scaled, lower=False, unit_diagonal=True)
        return w[self._perm]


def cholesky(Q, backend: str = "auto", symbolic=None) -> SparseCholesky:
    return SparseCholesky(Q, backend=backend, symbolic=symbolic)

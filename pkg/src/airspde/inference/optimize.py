"""Hyperparameter mode search and exploration of the hyperparameter posterior."""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from airspde.inference.model import InferenceError, ModelAssembly
from airspde.inference.params import NAMES, HyperParameters, natural_gradient_factor
from airspde.priors import PriorSet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    gtol: float = 1e-4
    max_iter: int = 200
    fd_step: float = 1e-4
    hessian_step: float = 1e-4
    integration: str = "empirical_bayes"  # or "ccd"
    ccd_radius: float = 1.1  # design points sit at ccd_radius * sqrt(5) standard deviations
    threads: int = 1
    pilot_days: int = 7

    def __post_init__(self):
        if self.integration not in ("empirical_bayes", "ccd"):
            raise ValueError(f"integration must be 'empirical_bayes' or 'ccd', got {self.integration!r}")
        if self.pilot_days < 0:
            raise ValueError("pilot_days must be >= 0")
        if self.gtol <= 0 or self.max_iter < 0 or self.fd_step <= 0 or self.hessian_step <= 0:
            raise ValueError(f"invalid optimizer settings {self}")


@dataclass
class OptimizationResult:
    """Mode on the natural scale plus the negative Hessian on the internal scale.

    Unpacks as ``mode, curvature = result``.
    """

    mode: HyperParameters
    curvature: np.ndarray
    converged: bool
    curvature_pd: bool
    n_iter: int
    n_eval: int
    objective: float
    objective_init: float
    gradient: np.ndarray
    message: str = ""

    def __iter__(self):
        yield self.mode
        yield self.curvature

    def covariance_internal(self) -> np.ndarray | None:
        if not self.curvature_pd:
            return None
        return np.linalg.inv(self.curvature)

    def summary(self) -> dict[str, tuple[float, float]]:
        """(mode, sd) per parameter; sd from the delta method, NaN if curvature is not PD."""
        cov = self.covariance_internal()
        t = self.mode.to_internal()
        sd_int = np.sqrt(np.diag(cov)) if cov is not None else np.full(5, np.nan)
        sd = natural_gradient_factor(t) * sd_int
        return {n: (v, s) for n, v, s in zip(NAMES, self.mode.as_array(), sd)}


class _Objective:
    """Negative log hyperposterior on the internal scale with counting and failure handling."""

    def __init__(self, assembly: ModelAssembly, priors: PriorSet | None, threads: int):
        self.model = assembly.model(priors)
        self.n_eval = 0
        self.threads = max(1, int(threads))
        self.penalty = None
        self._cache: dict[bytes, float] = {}

    def value(self, t) -> float:
        t = np.asarray(t, dtype=np.float64)
        key = t.tobytes()
        if key in self._cache:
            return self._cache[key]
        self.n_eval += 1
        try:
            v = -self.model.log_hyper_posterior(HyperParameters.from_internal(t))
        except (InferenceError, ValueError) as err:
            if self.penalty is None:
                raise
            log.debug("objective failed at %s: %s", t, err)
            return self.penalty
        self._cache[key] = v
        return v

    def values(self, points) -> np.ndarray:
        if self.threads == 1 or len(points) == 1:
            return np.array([self.value(p) for p in points])
        with ThreadPoolExecutor(self.threads) as pool:
            return np.array(list(pool.map(self.value, points)))

    def gradient(self, t, h: float) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        eye = np.eye(len(t)) * h
        vals = self.values([*(t + eye), *(t - eye)])
        d = len(t)
        return (vals[:d] - vals[d:]) / (2.0 * h)


def central_hessian(f, t, h: float, evaluate_many=None, f0: float | None = None) -> np.ndarray:
    """Hessian of ``f`` at ``t`` by central differences with step ``h``.

    Diagonal terms use the three-point rule; mixed terms use
    ``f(t+hi+hj) + f(t-hi-hj) - f(t+hi) - f(t-hi) - f(t+hj) - f(t-hj) + 2 f(t)``
    over ``2 h^2``, so only two extra points per pair are needed and the
    axial points are shared with a central-difference gradient.
    """
    t = np.asarray(t, dtype=np.float64)
    d = len(t)
    evaluate_many = evaluate_many or (lambda pts: np.array([f(p) for p in pts]))
    e = np.eye(d) * h
    pts = [t + e[i] for i in range(d)] + [t - e[i] for i in range(d)]
    pairs = list(itertools.combinations(range(d), 2))
    for i, j in pairs:
        pts += [t + e[i] + e[j], t - e[i] - e[j]]
    vals = evaluate_many(pts)
    f0 = f(t) if f0 is None else f0
    plus, minus = vals[:d], vals[d : 2 * d]
    H = np.empty((d, d))
    H[np.arange(d), np.arange(d)] = (plus - 2.0 * f0 + minus) / h**2
    for k, (i, j) in enumerate(pairs):
        pp, mm = vals[2 * d + 2 * k : 2 * d + 2 * k + 2]
        H[i, j] = H[j, i] = (pp + mm - plus[i] - minus[i] - plus[j] - minus[j] + 2.0 * f0) / (2.0 * h * h)
    return H


def default_initial(assembly: ModelAssembly) -> HyperParameters:
    """Crude data-driven starting point."""
    y = assembly.y
    if len(y) > assembly.X.shape[1]:
        beta, *_ = np.linalg.lstsq(assembly.X, y, rcond=None)
        resid_var = float(np.var(y - assembly.X @ beta))
    else:
        resid_var = 0.3
    s = np.sqrt(max(resid_var, 1e-4) / 3.0)
    verts = assembly.mesh.inner_boundary
    if verts is None or len(verts) < 2:
        verts = assembly.mesh.vertices
    span = float(np.max(np.ptp(verts, axis=0)))
    return HyperParameters(a=0.5, rho=0.25 * span, sigma_omega=s, sigma_z=s, sigma_epsilon=s)


def optimize_hyperparameters(
    assembly: ModelAssembly,
    init: HyperParameters | None = None,
    cfg: OptimizerConfig | None = None,
    priors: PriorSet | None = None,
) -> OptimizationResult:
    """Quasi-Newton ascent of the log hyperposterior on the internal scale.

    Gradients are central finite differences. The run is flagged as not
    converged when ``max_iter`` is hit before the gradient infinity-norm
    drops below ``gtol``; a non-positive-definite curvature is flagged, not
    raised.

    Without ``init`` a data-driven start is used and, for months longer than
    twice ``cfg.pilot_days``, refined by a fit to the first ``pilot_days``
    days whose mode and curvature seed the full search.
    """
    cfg = cfg or OptimizerConfig()
    hess_inv0 = None
    start = None
    if init is None:
        init = default_initial(assembly)
        if cfg.pilot_days and assembly.T >= 2 * cfg.pilot_days:
            sub = assembly.restrict_days(cfg.pilot_days)
            if sub.n_obs > 0:
                pilot = optimize_hyperparameters(sub, init, replace(cfg, pilot_days=0), priors)
                log.info("pilot fit on %d days: %s", cfg.pilot_days, pilot.mode)
                start = pilot.mode.to_internal()
                if pilot.curvature_pd:
                    scale = assembly.n_obs / sub.n_obs
                    hess_inv0 = np.linalg.inv(pilot.curvature * scale)

    obj = _Objective(assembly, priors, cfg.threads)
    t_init = init.to_internal()
    f_init = obj.value(t_init)
    if not np.isfinite(f_init):
        raise InferenceError("non-finite objective at the initial value", init)
    # failures during line searches are treated as very poor points
    obj.penalty = abs(f_init) * 10.0 + 1e10
    t0, f0 = t_init, f_init
    if start is not None:
        f_start = obj.value(start)
        if f_start < f_init:
            t0, f0 = start, f_start
        else:
            hess_inv0 = None

    options = {"gtol": cfg.gtol, "norm": np.inf, "maxiter": cfg.max_iter}
    if hess_inv0 is not None:
        options["hess_inv0"] = 0.5 * (hess_inv0 + hess_inv0.T)
    res = minimize(
        obj.value,
        t0,
        jac=lambda t: obj.gradient(t, cfg.fd_step),
        method="BFGS",
        options=options,
    )
    t_mode = res.x
    f_mode = float(res.fun)
    if f_mode > f0:  # never return something worse than the start
        t_mode, f_mode = t0, f0
    grad = obj.gradient(t_mode, cfg.fd_step)
    converged = bool(np.max(np.abs(grad)) < cfg.gtol)
    if not converged:
        log.warning(
            "hyperparameter search stopped after %d iterations, |grad|_inf = %.3g (%s)",
            res.nit,
            np.max(np.abs(grad)),
            res.message,
        )

    curvature = central_hessian(obj.value, t_mode, cfg.hessian_step, obj.values, f0=f_mode)
    try:
        np.linalg.cholesky(curvature)
        pd_ok = True
    except np.linalg.LinAlgError:
        pd_ok = False
        log.warning("curvature at the mode is not positive definite")

    return OptimizationResult(
        mode=HyperParameters.from_internal(t_mode),
        curvature=curvature,
        converged=converged,
        curvature_pd=pd_ok,
        n_iter=int(res.nit),
        n_eval=obj.n_eval,
        objective=-f_mode,
        objective_init=-f_init,
        gradient=-grad,
        message=str(res.message),
    )


@dataclass
class HyperIntegration:
    """Weighted hyperparameter design points; iterates as (theta, weight) pairs."""

    points: list[HyperParameters]
    weights: np.ndarray
    log_posterior: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __iter__(self):
        return iter(zip(self.points, self.weights))

    def __len__(self) -> int:
        return len(self.points)

    def summary(self) -> dict[str, tuple[float, float]]:
        """Weighted mean and sd per parameter on the natural scale."""
        vals = np.array([p.as_array() for p in self.points])
        mean = self.weights @ vals
        sd = np.sqrt(np.maximum(self.weights @ (vals - mean) ** 2, 0.0))
        return {n: (m, s) for n, m, s in zip(NAMES, mean, sd)}


def ccd_design(d: int, radius: float) -> np.ndarray:
    """Centre, 2d axial and 2^d factorial points, non-centre points at ``radius * sqrt(d)``."""
    r = radius * np.sqrt(d)
    axial = np.vstack([np.eye(d) * r, -np.eye(d) * r])
    factorial = np.array(list(itertools.product([-1.0, 1.0], repeat=d))) * radius
    return np.vstack([np.zeros((1, d)), axial, factorial])


def explore_hyperparameters(
    assembly: ModelAssembly,
    mode: HyperParameters,
    curvature: np.ndarray,
    cfg: OptimizerConfig | None = None,
    priors: PriorSet | None = None,
) -> HyperIntegration:
    """Design points for integrating over the hyperparameters.

    With ``empirical_bayes`` (or a non-PD curvature) the mode gets weight 1.
    Otherwise a central composite design is laid out along the eigenvectors
    of the curvature and weighted by the unnormalized hyperposterior.
    """
    cfg = cfg or OptimizerConfig()
    model = assembly.model(priors)
    pd_ok = True
    try:
        np.linalg.cholesky(curvature)
    except np.linalg.LinAlgError:
        pd_ok = False
    if cfg.integration == "empirical_bayes" or not pd_ok:
        if cfg.integration == "ccd":
            log.warning("curvature not positive definite; using the mode only")
        return HyperIntegration([mode], np.array([1.0]), np.array([model.log_hyper_posterior(mode)]))

    lam, V = np.linalg.eigh(curvature)
    scale = V / np.sqrt(lam)
    centre = mode.to_internal()
    Z = ccd_design(len(centre), cfg.ccd_radius)
    thetas = [HyperParameters.from_internal(centre + scale @ z) for z in Z]
    obj = _Objective(assembly, priors, cfg.threads)
    obj.penalty = np.inf
    lp = -obj.values([t.to_internal() for t in thetas])
    w = np.exp(lp - np.max(lp))
    w /= w.sum()
    return HyperIntegration(thetas, w, lp)

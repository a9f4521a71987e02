"""Penalized-complexity priors for the hyperparameters and the vague fixed-effect prior.

All densities here are on the natural parameter scale. Jacobians for the
internal (log / logit-type) scale are added by the inference code.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

_SQRT2 = np.sqrt(2.0)


class PriorSpecError(ValueError):
    """A prior specification that no member of the family can satisfy."""


@dataclass(frozen=True)
class PcSdSpec:
    """Prob(sigma > u_sigma) = alpha_sigma."""

    u_sigma: float = 1.0
    alpha_sigma: float = 0.01

    def __post_init__(self):
        if not self.u_sigma > 0 or not 0 < self.alpha_sigma < 1:
            raise PriorSpecError(f"invalid PC sd spec {self}")

    @property
    def rate(self) -> float:
        return -np.log(self.alpha_sigma) / self.u_sigma


@dataclass(frozen=True)
class PcMaternSpec:
    """Joint range/sd prior: Prob(rho < u_rho) = alpha_rho, Prob(sigma > u_sigma) = alpha_sigma."""

    u_rho: float = 150.0
    alpha_rho: float = 0.8
    u_sigma: float = 1.0
    alpha_sigma: float = 0.01

    def __post_init__(self):
        ok = self.u_rho > 0 and self.u_sigma > 0
        ok = ok and 0 < self.alpha_rho < 1 and 0 < self.alpha_sigma < 1
        if not ok:
            raise PriorSpecError(f"invalid PC Matérn spec {self}")

    @property
    def rate_rho(self) -> float:
        # 2-D case: exponential prior on rho^(-d/2) = 1/rho
        return -np.log(self.alpha_rho) * self.u_rho

    @property
    def rate_sigma(self) -> float:
        return -np.log(self.alpha_sigma) / self.u_sigma


@dataclass(frozen=True)
class PcAr1Spec:
    """Prob(a > u_a) = alpha_a for the AR(1) coefficient, base model a = 1."""

    u_a: float = 0.8
    alpha_a: float = 0.4

    def __post_init__(self):
        if not -1 < self.u_a < 1 or not 0 < self.alpha_a < 1:
            raise PriorSpecError(f"invalid PC AR(1) spec {self}")
        lo = np.sqrt((1.0 - self.u_a) / 2.0)
        if not lo < self.alpha_a < 1.0:
            raise PriorSpecError(
                f"Prob(a > {self.u_a}) = {self.alpha_a} is unattainable; "
                f"this family only reaches ({lo:.6g}, 1)"
            )

    @property
    def rate(self) -> float:
        return _ar1_rate(self.u_a, self.alpha_a)


def _ar1_tail(lam: float, u_a: float) -> float:
    """Prob(a > u_a) when sqrt(1 - a) ~ Exp(lam) truncated to [0, sqrt 2]."""
    return -np.expm1(-lam * np.sqrt(1.0 - u_a)) / -np.expm1(-lam * _SQRT2)


def _ar1_rate(u_a: float, alpha_a: float) -> float:
    hi = 1.0
    while _ar1_tail(hi, u_a) < alpha_a:
        hi *= 2.0
        if hi > 1e8:
            raise PriorSpecError("could not bracket the AR(1) PC rate")
    return brentq(lambda lam: _ar1_tail(lam, u_a) - alpha_a, 1e-12, hi, xtol=1e-14, rtol=1e-15)


@dataclass(frozen=True)
class PriorSet:
    """Every prior of the model; defaults are the monthly-model settings."""

    sigma_epsilon: PcSdSpec = field(default_factory=PcSdSpec)
    sigma_z: PcSdSpec = field(default_factory=PcSdSpec)
    matern: PcMaternSpec = field(default_factory=PcMaternSpec)
    ar1: PcAr1Spec = field(default_factory=PcAr1Spec)
    fixed_effect_precision: float = 0.001


def pc_sd_logdensity(sigma, spec: PcSdSpec):
    """log of lambda exp(-lambda sigma), lambda = -log(alpha)/u."""
    sigma = np.asarray(sigma, dtype=np.float64)
    lam = spec.rate
    out = np.where(sigma >= 0, np.log(lam) - lam * sigma, -np.inf)
    return float(out) if out.ndim == 0 else out


def pc_range_logdensity(rho, spec: PcMaternSpec):
    rho = np.asarray(rho, dtype=np.float64)
    lam = spec.rate_rho
    with np.errstate(divide="ignore"):
        out = np.where(rho > 0, np.log(lam) - 2.0 * np.log(rho) - lam / np.where(rho > 0, rho, 1.0), -np.inf)
    return float(out) if out.ndim == 0 else out


def pc_matern_logdensity(rho, sigma, spec: PcMaternSpec):
    """Joint log-density of (range, marginal sd) for a 2-D Matérn field."""
    return pc_range_logdensity(rho, spec) + pc_sd_logdensity(
        sigma, PcSdSpec(spec.u_sigma, spec.alpha_sigma)
    )


def pc_ar1_logdensity(a, spec: PcAr1Spec, rate: float | None = None):
    """log pi(a) with d(a) = sqrt(1 - a) exponentially distributed, truncated to [0, sqrt 2].

    ``rate`` skips solving for lambda when the caller has cached it.
    """
    a = np.asarray(a, dtype=np.float64)
    lam = spec.rate if rate is None else rate
    inside = (a > -1.0) & (a < 1.0)
    d = np.sqrt(np.where(inside, 1.0 - a, 1.0))
    out = np.log(lam) - lam * d - np.log(2.0 * d) - np.log(-np.expm1(-lam * _SQRT2))
    out = np.where(inside, out, -np.inf)
    return float(out) if out.ndim == 0 else out


def pc_ar1_tail(u: float, spec: PcAr1Spec) -> float:
    """Prob(a > u) under the prior."""
    return float(_ar1_tail(spec.rate, u))


def gaussian_logdensity(x, precision: float) -> float:
    """Sum of independent N(0, 1/precision) log-densities."""
    x = np.asarray(x, dtype=np.float64)
    return float(0.5 * x.size * (np.log(precision) - np.log(2 * np.pi)) - 0.5 * precision * np.sum(x * x))

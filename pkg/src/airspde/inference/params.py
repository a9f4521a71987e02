"""Hyperparameters of the monthly model and their unconstrained parameterization."""

from __future__ import annotations

from dataclasses import astuple, dataclass

import numpy as np

NAMES = ("a", "rho", "sigma_omega", "sigma_z", "sigma_epsilon")
SIGMA_EPSILON_FLOOR = 1e-6


@dataclass(frozen=True)
class HyperParameters:
    """AR(1) coefficient, Matérn range (km) and the three standard deviations.

    The internal vector is
    ``(log((1+a)/(1-a)), log rho, log sigma_omega, log sigma_z, log sigma_epsilon)``.
    """

    a: float
    rho: float
    sigma_omega: float
    sigma_z: float
    sigma_epsilon: float

    def __post_init__(self):
        if not -1.0 < self.a < 1.0:
            raise ValueError(f"a must lie in (-1, 1), got {self.a}")
        if not (self.rho > 0 and self.sigma_omega > 0 and self.sigma_z > 0):
            raise ValueError(f"rho and the standard deviations must be positive: {self}")
        if not self.sigma_epsilon >= SIGMA_EPSILON_FLOOR:
            raise ValueError(f"sigma_epsilon must be >= {SIGMA_EPSILON_FLOOR}, got {self.sigma_epsilon}")

    def to_internal(self) -> np.ndarray:
        return np.array(
            [
                np.log1p(self.a) - np.log1p(-self.a),
                np.log(self.rho),
                np.log(self.sigma_omega),
                np.log(self.sigma_z),
                np.log(self.sigma_epsilon),
            ]
        )

    @classmethod
    def from_internal(cls, theta) -> "HyperParameters":
        t = np.asarray(theta, dtype=np.float64)
        return cls(
            a=float(np.tanh(0.5 * t[0])),
            rho=float(np.exp(t[1])),
            sigma_omega=float(np.exp(t[2])),
            sigma_z=float(np.exp(t[3])),
            sigma_epsilon=float(max(np.exp(t[4]), SIGMA_EPSILON_FLOOR)),
        )

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=np.float64)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(NAMES, astuple(self)))


def log_jacobian(theta) -> float:
    """log |d(natural)/d(internal)| summed over the five coordinates."""
    t = np.asarray(theta, dtype=np.float64)
    a = np.tanh(0.5 * t[0])
    return float(np.log1p(-a * a) - np.log(2.0) + t[1] + t[2] + t[3] + t[4])


def natural_gradient_factor(theta) -> np.ndarray:
    """d(natural)/d(internal) per coordinate, for delta-method summaries."""
    t = np.asarray(theta, dtype=np.float64)
    a = np.tanh(0.5 * t[0])
    return np.array([0.5 * (1 - a * a), *np.exp(t[1:])])

import numpy as np
import pytest
from scipy.integrate import quad

from airspde.priors import (
    PcAr1Spec,
    PcMaternSpec,
    PcSdSpec,
    PriorSpecError,
    gaussian_logdensity,
    pc_ar1_logdensity,
    pc_ar1_tail,
    pc_matern_logdensity,
    pc_range_logdensity,
    pc_sd_logdensity,
)


def test_sd_rate():
    assert PcSdSpec(1.0, 0.01).rate == pytest.approx(4.6051702, abs=1e-7)


def test_sd_tail_probability_by_quadrature():
    spec = PcSdSpec(1.0, 0.01)
    tail, _ = quad(lambda s: np.exp(pc_sd_logdensity(s, spec)), 1.0, np.inf, epsabs=1e-13)
    assert tail == pytest.approx(0.01, abs=1e-9)
    total, _ = quad(lambda s: np.exp(pc_sd_logdensity(s, spec)), 0.0, np.inf)
    assert total == pytest.approx(1.0, abs=1e-9)


def test_sd_density_at_origin():
    spec = PcSdSpec(1.0, 0.01)
    assert pc_sd_logdensity(1e-300, spec) == pytest.approx(np.log(spec.rate))
    assert pc_sd_logdensity(1e6, spec) < -1e6


def test_range_rate():
    spec = PcMaternSpec(150, 0.8, 1, 0.01)
    assert spec.rate_rho == pytest.approx(-np.log(0.8) * 150, rel=1e-15)
    assert spec.rate_rho == pytest.approx(33.4713, abs=1e-3)


def test_range_tail_probability_by_quadrature():
    spec = PcMaternSpec(150, 0.8, 1, 0.01)
    below, _ = quad(lambda r: np.exp(pc_range_logdensity(r, spec)), 0, 150, epsabs=1e-12, limit=200)
    assert below == pytest.approx(0.8, abs=1e-6)
    above, _ = quad(lambda r: np.exp(pc_range_logdensity(r, spec)), 150, np.inf, epsabs=1e-12)
    assert below + above == pytest.approx(1.0, abs=1e-6)


def test_matern_prior_sigma_tail():
    spec = PcMaternSpec(150, 0.8, 1, 0.01)
    f = lambda s: np.exp(pc_matern_logdensity(100.0, s, spec) - pc_range_logdensity(100.0, spec))
    tail, _ = quad(f, 1.0, np.inf)
    assert tail == pytest.approx(0.01, abs=1e-6)


def test_matern_log_additivity():
    spec = PcMaternSpec(150, 0.8, 1, 0.01)
    joint = pc_matern_logdensity(120.0, 0.4, spec)
    assert joint == pc_range_logdensity(120.0, spec) + pc_sd_logdensity(0.4, PcSdSpec(1, 0.01))


def test_ar1_rate_solves_tail_equation():
    spec = PcAr1Spec(0.8, 0.4)
    lam = spec.rate
    tail = (1 - np.exp(-lam * np.sqrt(0.2))) / (1 - np.exp(-lam * np.sqrt(2)))
    assert tail == pytest.approx(0.4, abs=1e-10)


def test_ar1_tail_by_quadrature():
    spec = PcAr1Spec(0.8, 0.4)
    dens = lambda a: np.exp(pc_ar1_logdensity(a, spec))
    tail, _ = quad(dens, 0.8, 1.0, epsabs=1e-12, limit=200)
    assert tail == pytest.approx(0.4, abs=1e-6)
    total = quad(dens, -1.0, 0.8, limit=200)[0] + tail
    assert total == pytest.approx(1.0, abs=1e-6)
    assert pc_ar1_tail(-1.0, spec) == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("u,alpha", [(0.8, 0.3), (0.8, 0.31), (0.0, 0.5), (0.5, 1.0)])
def test_ar1_unsatisfiable(u, alpha):
    with pytest.raises(PriorSpecError):
        PcAr1Spec(u, alpha)


def test_ar1_boundaries():
    spec = PcAr1Spec()
    assert pc_ar1_logdensity(1.0, spec) == -np.inf
    assert pc_ar1_logdensity(-1.0, spec) == -np.inf
    a = np.linspace(-0.999, 0.999, 101)
    assert np.all(np.isfinite(pc_ar1_logdensity(a, spec)))


def test_gaussian_fixed_effects():
    x = np.array([0.3, -1.2])
    expected = sum(-0.5 * np.log(2 * np.pi * 1000) - 0.5 * v * v / 1000 for v in x)
    assert gaussian_logdensity(x, 0.001) == pytest.approx(expected, rel=1e-14)

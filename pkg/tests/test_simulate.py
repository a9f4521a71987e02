import numpy as np
import pytest
from scipy.sparse.linalg import splu

from airspde.geometry import regular_mesh
from airspde.simulate import (
    SimulationSpec,
    sample_latent,
    sample_latent_dense,
    simulate_dataset,
    spatial_precision,
    station_layout,
)
from airspde.spde import MaternParams, matern_correlation


def test_reproducible():
    spec = SimulationSpec(n_stations=12, T=3, domain=(0, 0, 100, 100), rho=40.0, seed=7)
    a, b = simulate_dataset(spec), simulate_dataset(spec)
    np.testing.assert_array_equal(a.log_y, b.log_y)
    assert a.dataset.observations.equals(b.dataset.observations)
    c = simulate_dataset(SimulationSpec(n_stations=12, T=3, domain=(0, 0, 100, 100), rho=40.0, seed=8))
    assert not np.array_equal(a.log_y, c.log_y)


def test_noise_free_limit():
    spec = SimulationSpec(
        sigma_omega=1e-8, sigma_z=1e-8, sigma_epsilon=1e-8, beta=(0.0, 0.0), mu=3.2,
        n_stations=10, T=4, domain=(0, 0, 100, 100), rho=40.0,
    )
    sim = simulate_dataset(spec)
    np.testing.assert_allclose(sim.log_y, 3.2, atol=1e-6)
    np.testing.assert_allclose(sim.dataset.observations.pm10, np.exp(3.2), rtol=1e-6)


def test_schema_and_strata():
    spec = SimulationSpec(n_stations=41, T=2, domain=(0, 0, 100, 100), rho=40.0)
    sim = simulate_dataset(spec)
    ds = sim.dataset
    assert list(ds.stations.columns) == ["station_id", "x_km", "y_km", "stratum"]
    assert list(ds.observations.columns) == ["station_id", "date", "pm10"]
    assert ds.stations.stratum.value_counts().to_dict() == {"urban": 24, "suburban": 11, "rural": 6}
    assert len(ds.observations) == 82 and (ds.observations.pm10 > 0).all()
    assert list(ds.covariates.columns[2:]) == spec.predictor_names


def test_missing_fraction():
    spec = SimulationSpec(n_stations=30, T=10, domain=(0, 0, 100, 100), rho=40.0, missing_fraction=0.3)
    obs = simulate_dataset(spec).dataset.observations
    assert 0.2 < obs.pm10.isna().mean() < 0.4


def test_noise_variance_moment():
    spec = SimulationSpec(n_stations=100, T=100, domain=(0, 0, 100, 100), rho=40.0, seed=1)
    sim = simulate_dataset(spec)
    eps = sim.epsilon
    assert eps.size == 10_000
    se = spec.sigma_epsilon**2 * np.sqrt(2.0 / (eps.size - 1))
    assert abs(eps.var(ddof=1) - spec.sigma_epsilon**2) < 3 * se


def test_independent_days_when_a_is_zero():
    mesh = regular_mesh(0, 0, 60, 60, 10.0)
    spec = SimulationSpec(a=0.0, rho=20.0, T=400, seed=2)
    u = sample_latent(mesh, spec, np.random.default_rng(2))
    x, y = u[:-1].ravel(), u[1:].ravel()
    r = np.corrcoef(x, y)[0, 1]
    assert abs(r) < 4 / np.sqrt(u[:-1].shape[0])


def _empirical_cov(draws):
    return np.cov(np.asarray(draws).T)


@pytest.mark.parametrize("sampler", [sample_latent, sample_latent_dense])
def test_both_paths_match_analytic_covariance(sampler):
    mesh = regular_mesh(0, 0, 3, 2, 1.0)
    spec = SimulationSpec(a=0.6, rho=2.0, sigma_omega=0.7, T=2)
    rng = np.random.default_rng(0)
    draws = np.array([sampler(mesh, spec, rng).ravel() for _ in range(6000)])
    Qs = spatial_precision(mesh, spec).toarray()
    t = np.arange(2)
    exact = np.kron(0.6 ** np.abs(t[:, None] - t[None, :]) / (1 - 0.36), np.linalg.inv(Qs))
    emp = _empirical_cov(draws)
    scale = np.sqrt(np.outer(np.diag(exact), np.diag(exact)))
    # standard error of a covariance estimate is at most sqrt(2/n) on the correlation scale
    assert np.max(np.abs(emp - exact) / scale) < 5 * np.sqrt(2 / 6000)


def test_spatial_correlation_matches_matern_on_fine_mesh():
    rho = 1.0
    mesh = regular_mesh(-3, -3, 3, 3, rho / 7)
    spec = SimulationSpec(a=0.5, rho=rho, sigma_omega=1.0, T=1)
    rng = np.random.default_rng(5)
    draws = np.array([sample_latent(mesh, spec, rng)[0] for _ in range(3000)])
    v = mesh.vertices
    centre = np.argmin(np.hypot(v[:, 0], v[:, 1]))
    var = draws.var(axis=0)
    e = np.zeros(len(v))
    e[centre] = 1.0
    discrete = splu(spatial_precision(mesh, spec).tocsc()).solve(e)[centre] / 0.75
    # the discretized variance is within the FEM error of sigma^2 / (1 - a^2)
    assert discrete == pytest.approx(1.0 / 0.75, rel=0.1)
    assert abs(var[centre] - discrete) < 4 * discrete * np.sqrt(2 / 3000)
    for h in (0.25, 0.5, 1.0, 1.5):
        j = np.argmin(np.abs(np.hypot(v[:, 0], v[:, 1]) - h) + 10 * np.abs(v[:, 1]) + 10 * (v[:, 0] < 0))
        dist = np.hypot(*(v[j] - v[centre]))
        r = np.corrcoef(draws[:, centre], draws[:, j])[0, 1]
        expected = matern_correlation(dist, MaternParams(rho, 1.0))
        assert abs(r - expected) < 0.05 + 4 * (1 - expected**2) / np.sqrt(3000)


def test_station_layout_explicit_coordinates():
    xy = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 1.0]])
    st = station_layout(SimulationSpec(coordinates=xy), np.random.default_rng(0))
    np.testing.assert_array_equal(st[["x_km", "y_km"]].to_numpy(), xy)


def test_invalid_spec():
    with pytest.raises(ValueError):
        SimulationSpec(a=1.0)
    with pytest.raises(ValueError):
        SimulationSpec(sigma_z=0.0)
    with pytest.raises(ValueError):
        SimulationSpec(beta=(1.0,), predictors=("a", "b"))

import numpy as np
import pandas as pd
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from airspde.data import Dataset
from airspde.inference.model import (
    AssemblyError,
    ModelAssembly,
    assemble,
    latent_conditional,
    log_hyper_posterior,
    log_marginal_likelihood,
)
from airspde.inference.params import HyperParameters
from airspde.priors import PriorSet
from airspde.spde import MaternParams, matern_to_spde, spde_precision

from oracles import dense_oracle, tiny_assembly, tiny_mesh

THETA = HyperParameters(a=0.629, rho=1.5, sigma_omega=0.434, sigma_z=0.247, sigma_epsilon=0.197)


def test_matches_dense_oracle_reference_case():
    asm = tiny_assembly(np.random.default_rng(0))
    assert (asm.n_obs, asm.T, asm.n_station) == (8, 2, 4)
    ll, mean, var = dense_oracle(asm, THETA)
    assert log_marginal_likelihood(asm, THETA) == pytest.approx(ll, rel=1e-6)
    post = latent_conditional(asm, THETA)
    np.testing.assert_allclose(post.mean, mean, rtol=1e-8, atol=1e-8 * np.abs(mean).max())
    np.testing.assert_allclose(post.marginal_variances(), var, rtol=1e-8)


@pytest.mark.parametrize("seed", range(20))
def test_random_tiny_instances_match_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    asm = tiny_assembly(
        rng, n_station=int(rng.integers(2, 6)), T=int(rng.integers(1, 4)), n_obs=int(rng.integers(1, 30))
    )
    assert asm.n_latent <= 120
    theta = HyperParameters(
        a=float(rng.uniform(-0.9, 0.95)),
        rho=float(rng.uniform(0.5, 4.0)),
        sigma_omega=float(rng.uniform(0.1, 2.0)),
        sigma_z=float(rng.uniform(0.05, 1.0)),
        sigma_epsilon=float(rng.uniform(0.05, 1.0)),
    )
    ll, mean, var = dense_oracle(asm, theta)
    assert log_marginal_likelihood(asm, theta) == pytest.approx(ll, rel=1e-6)
    post = latent_conditional(asm, theta)
    np.testing.assert_allclose(post.mean, mean, rtol=1e-6, atol=1e-6 * np.abs(mean).max())
    np.testing.assert_allclose(post.marginal_variances(), var, rtol=1e-6)


_ORACLE_ASM = tiny_assembly(np.random.default_rng(11), n_station=3, T=3, n_obs=10, p=2)


@settings(max_examples=40, deadline=None)
@given(
    a=st.floats(-0.95, 0.95),
    rho=st.floats(0.3, 10.0),
    sigma_omega=st.floats(0.05, 3.0),
    sigma_z=st.floats(0.01, 2.0),
    sigma_epsilon=st.floats(0.01, 2.0),
)
def test_likelihood_matches_dense_oracle_anywhere(a, rho, sigma_omega, sigma_z, sigma_epsilon):
    theta = HyperParameters(a=a, rho=rho, sigma_omega=sigma_omega, sigma_z=sigma_z, sigma_epsilon=sigma_epsilon)
    ll, mean, _ = dense_oracle(_ORACLE_ASM, theta)
    assert log_marginal_likelihood(_ORACLE_ASM, theta) == pytest.approx(ll, rel=1e-6, abs=1e-8)
    got = latent_conditional(_ORACLE_ASM, theta).mean
    np.testing.assert_allclose(got, mean, rtol=1e-6, atol=1e-6 * np.abs(mean).max())


@settings(max_examples=30, deadline=None)
@given(scale=st.floats(0.2, 5.0))
def test_noisier_observations_never_reduce_variance(scale):
    # less informative observations can only widen the conditional marginals
    base = HyperParameters(a=0.5, rho=1.5, sigma_omega=0.4, sigma_z=0.2, sigma_epsilon=0.1 * scale)
    noisy = HyperParameters(a=0.5, rho=1.5, sigma_omega=0.4, sigma_z=0.2, sigma_epsilon=10.0 * scale)
    v_base = latent_conditional(_ORACLE_ASM, base).marginal_variances()
    v_noisy = latent_conditional(_ORACLE_ASM, noisy).marginal_variances()
    assert np.all(v_noisy >= v_base - 1e-12)


def test_scipy_backend_agrees():
    asm = tiny_assembly(np.random.default_rng(3))
    a = asm.model(backend="scipy").log_marginal_likelihood(THETA)
    b = asm.model(backend="auto").log_marginal_likelihood(THETA)
    assert a == pytest.approx(b, rel=1e-10)


def test_zero_observations():
    rng = np.random.default_rng(1)
    asm = tiny_assembly(rng, n_obs=0)
    asm.X = np.zeros((0, 2))
    assert log_marginal_likelihood(asm, THETA) == 0.0
    post = latent_conditional(asm, THETA)
    np.testing.assert_array_equal(post.mean, 0.0)


def test_single_observation_conjugate_formula():
    # one observation, intercept only, one station on a node
    mesh = tiny_mesh()
    asm = ModelAssembly.from_arrays(mesh, mesh.vertices[[5]], [0], [0], [1.3], np.ones((1, 1)), 1)
    theta = THETA
    post = latent_conditional(asm, theta)
    kappa, tau = matern_to_spde(MaternParams(theta.rho, theta.sigma_omega))
    Qs = spde_precision(asm.fem, kappa, tau).toarray() * (1 - theta.a**2)
    var_u = np.linalg.inv(Qs)[5, 5]
    prior_var = var_u + theta.sigma_z**2 + 1000.0
    expected = prior_var / (prior_var + theta.sigma_epsilon**2) * 1.3
    eta = (asm.design @ post.mean)[0]
    assert eta == pytest.approx(expected, abs=1e-10)


def test_permutation_invariance():
    rng = np.random.default_rng(5)
    asm = tiny_assembly(rng, n_obs=12)
    perm = rng.permutation(asm.n_obs)
    shuffled = ModelAssembly(
        y=asm.y[perm],
        X=asm.X[perm],
        A_st=asm.A_st[perm],
        station_index=asm.station_index[perm],
        day_index=asm.day_index[perm],
        T=asm.T,
        mesh=asm.mesh,
        fem=asm.fem,
        station_projector=asm.station_projector,
    )
    assert log_marginal_likelihood(shuffled, THETA) == pytest.approx(
        log_marginal_likelihood(asm, THETA), abs=1e-10
    )
    np.testing.assert_allclose(
        latent_conditional(shuffled, THETA).mean, latent_conditional(asm, THETA).mean, atol=1e-10
    )


def test_extra_observation_never_increases_variance():
    rng = np.random.default_rng(9)
    asm = tiny_assembly(rng, n_obs=6)
    xy = np.asarray(sp.csr_matrix(asm.station_projector) @ asm.mesh.vertices)
    extra_X = np.vstack([asm.X, [1.0, 0.3]])
    bigger = ModelAssembly.from_arrays(
        asm.mesh,
        xy,
        np.append(asm.station_index, 1),
        np.append(asm.day_index, 0),
        np.append(asm.y, 0.4),
        extra_X,
        asm.T,
    )
    v0 = latent_conditional(asm, THETA).marginal_variances()
    v1 = latent_conditional(bigger, THETA).marginal_variances()
    assert np.all(v1 <= v0 * (1 + 1e-10))


def test_tiny_sigma_epsilon_is_finite():
    asm = tiny_assembly(np.random.default_rng(2))
    theta = HyperParameters(0.5, 1.0, 0.5, 0.3, 1e-6)
    assert np.isfinite(log_marginal_likelihood(asm, theta))


def test_internal_round_trip_identical_values():
    asm = tiny_assembly(np.random.default_rng(4))
    again = HyperParameters.from_internal(THETA.to_internal())
    assert log_hyper_posterior(asm, again) == pytest.approx(log_hyper_posterior(asm, THETA), abs=1e-12)


def test_sigma_omega_tail_goes_to_minus_infinity():
    asm = tiny_assembly(np.random.default_rng(4))
    vals = [
        log_hyper_posterior(asm, HyperParameters(0.5, 1.5, s, 0.3, 0.2)) for s in (1.0, 10.0, 100.0, 1000.0)
    ]
    assert np.all(np.diff(vals) < 0)
    assert vals[-1] < -500


def test_hyper_posterior_adds_priors_and_jacobian():
    asm = tiny_assembly(np.random.default_rng(4))
    m = asm.model()
    diff = m.log_hyper_posterior(THETA) - m.log_marginal_likelihood(THETA)
    assert diff == pytest.approx(m.log_prior(THETA), abs=1e-12)


def test_different_priors_cached_separately():
    asm = tiny_assembly(np.random.default_rng(4))
    assert asm.model(PriorSet()) is asm.model(PriorSet())


# ------------------------------------------------------------------ assemble from tables


def table_dataset(n_station=2, days=3, missing=(), constant=False):
    ids = [f"S{i}" for i in range(n_station)]
    stations = pd.DataFrame(
        {"station_id": ids, "x_km": np.linspace(0.5, 2.5, n_station), "y_km": 1.0, "stratum": "urban"}
    )
    dates = pd.date_range("2015-01-01", periods=days)
    rows = [(s, d) for d in dates for s in ids if (s, d.day) not in missing]
    obs = pd.DataFrame(rows, columns=["station_id", "date"])
    obs["pm10"] = np.linspace(5.0, 40.0, len(obs))
    cov = pd.DataFrame([(s, d) for d in dates for s in ids], columns=["station_id", "date"])
    cov["t2m"] = 1.0 if constant else np.arange(len(cov), dtype=float)
    cov["dust"] = (np.arange(len(cov)) % 3 == 0).astype(float)
    return Dataset(stations, obs, cov)


def test_assemble_structure():
    ds = table_dataset()
    asm = assemble(ds, tiny_mesh(), 1, min_obs=1)
    assert asm.n_obs == 6 and asm.T == 31
    assert np.all(np.diff(asm.A_st.indptr) <= 3)
    np.testing.assert_allclose(np.asarray(asm.A_st.sum(axis=1)).ravel(), 1.0)
    assert asm.X.shape == (6, 3)
    assert asm.X[:, 1].mean() == pytest.approx(0.0, abs=1e-12)
    assert asm.X[:, 1].std(ddof=1) == pytest.approx(1.0)
    np.testing.assert_array_equal(asm.X[:, 2], ds.covariates.dust.to_numpy())


def test_assemble_missing_day_drops_row_only():
    ds = table_dataset(missing={("S1", 2)})
    asm = assemble(ds, tiny_mesh(), 1, min_obs=1)
    assert asm.n_obs == 5 and asm.T == 31


def test_assemble_twelve_columns_for_eleven_predictors():
    ds = table_dataset()
    rng = np.random.default_rng(0)
    from airspde.data import PREDICTORS

    for name in PREDICTORS:
        ds.covariates[name] = rng.normal(size=len(ds.covariates)) if name != "dust" else ds.covariates.dust
    asm = assemble(ds, tiny_mesh(), 1, min_obs=1, predictors=PREDICTORS)
    assert asm.X.shape[1] == 12


def test_assemble_zero_concentration_floored():
    ds = table_dataset()
    ds.observations.loc[0, "pm10"] = 0.0
    asm = assemble(ds, tiny_mesh(), 1, min_obs=1)
    assert asm.n_floored == 1
    assert asm.y.min() == pytest.approx(np.log(0.5))


def test_assemble_errors():
    with pytest.raises(AssemblyError, match="constant"):
        assemble(table_dataset(constant=True), tiny_mesh(), 1, min_obs=1)
    ds = table_dataset()
    ds.stations.loc[0, "x_km"] = 50.0
    with pytest.raises(AssemblyError, match="outside"):
        assemble(ds, tiny_mesh(), 1, min_obs=1)


def test_assemble_min_obs_drops_station():
    ds = table_dataset(missing={("S1", 2), ("S1", 3)})
    asm = assemble(ds, tiny_mesh(), 1, min_obs=2)
    assert asm.n_station == 1 and asm.n_obs == 3


def test_assemble_all_zero_indicator_allowed():
    ds = table_dataset()
    ds.covariates["dust"] = 0.0
    asm = assemble(ds, tiny_mesh(), 1, min_obs=1)
    np.testing.assert_array_equal(asm.X[:, 2], 0.0)

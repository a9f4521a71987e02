import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from airspde.products import (
    NODATA,
    GridSpec,
    ZoneMap,
    aggregate_days,
    exceedance_probability,
    nearest_rank_percentile,
    population_exposure,
    read_asc,
    rwpir,
    summarize_cells,
    write_asc,
)


def test_rwpir_values():
    np.testing.assert_array_equal(rwpir(np.full((10, 2), 7.0)), 0.0)
    # quartiles 10, 20, 30
    draws = np.repeat(np.array([10.0, 20.0, 30.0]), [30, 40, 30])[:, None]
    assert rwpir(draws)[0] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        rwpir(np.ones((1, 3)))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100), st.integers(0, 1000))
def test_rwpir_scale_invariant(c, seed):
    d = np.random.default_rng(seed).lognormal(size=(50, 4))
    np.testing.assert_allclose(rwpir(c * d), rwpir(d), rtol=1e-10)


def test_poe_counting():
    assert exceedance_probability(np.full((100, 1), 20.0))[0] == 0.0
    d = np.concatenate([np.full(250, 60.0), np.full(750, 10.0)])[:, None]
    assert exceedance_probability(d)[0] == 0.25
    # ties at the threshold do not count
    assert exceedance_probability(np.full((10, 1), 50.0))[0] == 0.0


def test_poe_lognormal_tail():
    rng = np.random.default_rng(0)
    mus, sigma = np.array([3.0, 3.6, 3.9, 4.2]), 0.4
    draws = np.exp(rng.normal(mus, sigma, size=(1000, 4)))
    p = exceedance_probability(draws)
    exact = 1 - norm.cdf((np.log(50) - mus) / sigma)
    se = np.sqrt(exact * (1 - exact) / 1000)
    assert np.all(np.abs(p - exact) <= 3 * se + 1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(1, 100), st.floats(0, 50))
def test_poe_monotone_in_threshold(seed, t, dt):
    d = np.random.default_rng(seed).lognormal(3, 0.5, size=(100, 3))
    assert np.all(exceedance_probability(d, t + dt) <= exceedance_probability(d, t))


def test_aggregate_mean():
    a = np.full((5, 2), 10.0)
    b = np.full((5, 2), 30.0)
    np.testing.assert_array_equal(aggregate_days([a, b]), 20.0)
    np.testing.assert_array_equal(aggregate_days([a, a, a], "p90.4"), a)
    with pytest.raises(ValueError):
        aggregate_days([a, np.ones((4, 2))])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(0.1, 10))
def test_aggregate_mean_commutes_with_scaling(seed, c):
    days = np.random.default_rng(seed).lognormal(size=(4, 6, 3))
    np.testing.assert_allclose(aggregate_days(c * days), c * aggregate_days(days), rtol=1e-12)


def test_percentile_is_36th_highest_rule():
    rng = np.random.default_rng(0)
    for _ in range(200):
        k = int(rng.integers(0, 80))
        vals = np.concatenate([rng.uniform(51, 100, k), rng.uniform(0, 49, 365 - k)])
        rng.shuffle(vals)
        p = nearest_rank_percentile(vals[:, None], 90.4)[0]
        assert (p > 50) == (k >= 36)
        assert p == np.sort(vals)[::-1][35]


def test_exposure_formula():
    zones = ZoneMap(pd.DataFrame({"cell_id": [0, 1, 2], "zone_id": ["A", "A", "B"], "population": [1.0, 3.0, 7.0]}))
    c = pd.Series([10.0, 20.0, 42.0], index=[0, 1, 2])
    out = population_exposure(c, zones).set_index("zone_id").exposure
    assert out["A"] == pytest.approx(17.5)
    assert out["B"] == pytest.approx(42.0)
    uni = ZoneMap(pd.DataFrame({"cell_id": [0, 1, 2], "zone_id": "A", "population": 5.0}))
    assert population_exposure(c, uni).exposure[0] == pytest.approx(24.0)


def test_exposure_missing_cases():
    zones = ZoneMap(pd.DataFrame({"cell_id": [0, 1, 2], "zone_id": ["A", "B", "B"], "population": [0.0, 2.0, 1.0]}))
    c = pd.Series([10.0, np.nan, 5.0], index=[0, 1, 2])
    out = population_exposure(c, zones).set_index("zone_id").exposure
    assert np.isnan(out["A"]) and np.isnan(out["B"])


@settings(max_examples=30, deadline=None)
@given(st.floats(0.001, 1000), st.integers(0, 100))
def test_exposure_population_scale_invariance(k, seed):
    rng = np.random.default_rng(seed)
    t = pd.DataFrame({"cell_id": range(8), "zone_id": rng.integers(0, 3, 8), "population": rng.uniform(0.1, 10, 8)})
    c = pd.Series(rng.uniform(5, 80, 8))
    a = population_exposure(c, ZoneMap(t)).exposure.to_numpy()
    t2 = t.assign(population=t.population * k)
    b = population_exposure(c, ZoneMap(t2)).exposure.to_numpy()
    np.testing.assert_allclose(a, b, rtol=1e-10)


def test_zone_map_validation():
    with pytest.raises(ValueError):
        ZoneMap(pd.DataFrame({"cell_id": [0], "zone_id": [1], "population": [-1.0]}))
    with pytest.raises(ValueError):
        ZoneMap(pd.DataFrame({"cell_id": [0, 0], "zone_id": [1, 2], "population": [1.0, 1.0]}))


def test_grid_geometry_and_asc(tmp_path):
    g = GridSpec(100.0, 200.0, 1.0, n_cols=3, n_rows=2, mask=[1, 1, 0, 1, 1, 1])
    np.testing.assert_allclose(g.centers([0, 5]), [[100.5, 201.5], [102.5, 200.5]])
    np.testing.assert_array_equal(g.active, [0, 1, 3, 4, 5])
    path = tmp_path / "m.asc"
    write_asc(path, g, [0, 1, 3, 4, 5], [1.0, 2.0, np.nan, 4.0, 5.5])
    header, data = read_asc(path)
    assert header["ncols"] == 3 and header["nodata_value"] == NODATA
    np.testing.assert_array_equal(data, [[1.0, 2.0, NODATA], [NODATA, 4.0, 5.5]])


def test_summarize_cells_keeps_missing():
    d = np.column_stack([np.arange(1.0, 101.0), np.full(100, np.nan)])
    s = summarize_cells(d)
    assert s["mean"][0] == pytest.approx(50.5) and np.isnan(s["mean"][1])
    assert s["median"][0] == 50.0

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from airspde.validation import (
    backtransform_predictive,
    compute_metrics,
    quantile,
    round_half_up,
    st_variogram,
    stratified_split,
    variogram_flatness,
)


def network(n_urban=244, n_sub=104, n_rural=62):
    strata = ["urban"] * n_urban + ["suburban"] * n_sub + ["rural"] * n_rural
    return pd.DataFrame(
        {
            "station_id": [f"S{i:03d}" for i in range(len(strata))],
            "x_km": 0.0,
            "y_km": 0.0,
            "stratum": strata,
        }
    )


def test_split_counts_reference_network():
    plan = stratified_split(network(), 0.1, trial_seed=0)
    assert len(plan.validation["urban"]) == 24
    assert len(plan.validation["rural"]) == 6
    # round-half-up of 10.4
    assert len(plan.validation["suburban"]) == 10


def test_split_count_override():
    plan = stratified_split(network(), 0.1, trial_seed=0, counts={"suburban": 11})
    assert len(plan.validation["suburban"]) == 11


def test_split_partition_and_reproducibility():
    st_ = network()
    a = stratified_split(st_, 0.1, trial_seed=4)
    b = stratified_split(st_, 0.1, trial_seed=4)
    c = stratified_split(st_, 0.1, trial_seed=5)
    assert a == b
    assert a.validation_ids != c.validation_ids
    assert not set(a.validation_ids) & set(a.training)
    assert set(a.validation_ids) | set(a.training) == set(st_.station_id)
    for stratum, ids in a.validation.items():
        assert set(st_.set_index("station_id").loc[ids, "stratum"]) <= {stratum}


def test_split_zero_fraction_and_empty_stratum():
    plan = stratified_split(network(10, 0, 5), 0.0)
    assert plan.validation_ids == []
    plan = stratified_split(network(10, 0, 5), 0.5)
    assert plan.validation["suburban"] == []
    assert len(plan.validation["urban"]) == 5


def test_round_half_up():
    assert [round_half_up(x) for x in (0.5, 1.5, 2.5, 10.4, 24.4, 6.2)] == [1, 2, 3, 10, 24, 6]


def test_backtransform_degenerate():
    s = backtransform_predictive(np.full((100, 3), np.log(20.0)))
    np.testing.assert_allclose(s.mean, 20.0)
    np.testing.assert_allclose(s.lower, 20.0)
    np.testing.assert_allclose(s.upper, 20.0)


def test_backtransform_lognormal_mean():
    rng = np.random.default_rng(0)
    n = 200_000
    draws = rng.normal(3.0, 0.5, size=(n, 1))
    s = backtransform_predictive(draws)
    expected = np.exp(3 + 0.125)
    se = np.sqrt((np.exp(0.25) - 1) * np.exp(6 + 0.25)) / np.sqrt(n)
    assert abs(s.mean[0] - expected) < 4 * se
    assert expected == pytest.approx(22.76, abs=0.01)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=60), st.sampled_from([0.025, 0.25, 0.5, 0.975]))
def test_quantile_commutes_with_exp(values, q):
    v = np.array(values)
    assert quantile(np.exp(v), q) == pytest.approx(np.exp(quantile(v, q)), rel=1e-12)


def test_metrics_hand_values():
    m = compute_metrics([10, 20, 30], [12, 18, 33], [0, 0, 0], [100, 100, 100])
    assert m["bias"] == pytest.approx(1.0)
    assert m["rmse"] == pytest.approx(np.sqrt(17 / 3))
    assert m["rmse"] == pytest.approx(2.3805, abs=1e-4)
    assert m["correlation"] == pytest.approx(0.9707, abs=1e-4)
    assert m["coverage95"] == 100.0


def test_metrics_perfect_and_degenerate():
    m = compute_metrics([1.0, 2.0, 5.0], [1.0, 2.0, 5.0], [1, 2, 6], [1, 2, 7])
    assert m["rmse"] == 0 and m["bias"] == 0 and m["correlation"] == pytest.approx(1.0)
    assert m["coverage95"] == pytest.approx(200 / 3)
    one = compute_metrics([3.0], [4.0])
    assert np.isnan(one["correlation"]) and one["rmse"] == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 30), st.integers(0, 1000))
def test_metrics_order_invariant(n, seed):
    rng = np.random.default_rng(seed)
    obs, pred = rng.normal(size=n) + 10, rng.normal(size=n) + 10
    lo, hi = pred - 1, pred + 1
    perm = rng.permutation(n)
    a = compute_metrics(obs, pred, lo, hi)
    b = compute_metrics(obs[perm], pred[perm], lo[perm], hi[perm])
    for k in a:
        assert a[k] == pytest.approx(b[k], nan_ok=True)
    assert a["rmse"] >= 0 and 0 <= a["coverage95"] <= 100
    assert np.isnan(a["correlation"]) or abs(a["correlation"]) <= 1 + 1e-12


def _coords(n, rng, size=300):
    xy = rng.uniform(0, size, size=(n, 2))
    return pd.DataFrame({"station_id": [f"S{i}" for i in range(n)], "x_km": xy[:, 0], "y_km": xy[:, 1]})


def test_variogram_two_stations_hand_value():
    coords = pd.DataFrame({"station_id": ["A", "B"], "x_km": [0.0, 10.0], "y_km": [0.0, 0.0]})
    # a second day with a single value keeps the two-day precondition without adding lag-0 pairs
    res = pd.DataFrame({"station_id": ["A", "B", "A"], "day": [0, 0, 1], "residual": [1.0, 3.0, 1.0]})
    vg = st_variogram(res, coords, space_bins=[0, 50], time_lags=[0])
    assert vg.gamma.iloc[0] == pytest.approx(2.0)
    assert vg.n_pairs.iloc[0] == 1


def test_variogram_constant_field_is_zero():
    rng = np.random.default_rng(0)
    coords = _coords(6, rng)
    res = pd.DataFrame([(s, d, 1.7) for s in coords.station_id for d in range(5)], columns=["station_id", "day", "residual"])
    vg = st_variogram(res, coords, space_bins=np.arange(0, 500, 100), time_lags=range(3))
    assert np.nanmax(np.abs(vg.gamma)) < 1e-12


def test_variogram_empty_bin_is_missing():
    coords = pd.DataFrame({"station_id": ["A", "B"], "x_km": [0.0, 10.0], "y_km": [0.0, 0.0]})
    res = pd.DataFrame({"station_id": ["A", "B", "A", "B"], "day": [0, 0, 1, 1], "residual": [1.0, 3.0, 2.0, 0.0]})
    vg = st_variogram(res, coords, space_bins=[0, 50, 100], time_lags=[0])
    assert np.isnan(vg.gamma.iloc[1]) and vg.n_pairs.iloc[1] == 0


def test_variogram_matches_brute_force():
    rng = np.random.default_rng(3)
    coords = _coords(7, rng)
    rows = [(s, d, rng.normal()) for s in coords.station_id for d in range(6) if rng.random() > 0.2]
    res = pd.DataFrame(rows, columns=["station_id", "day", "residual"])
    bins = [0, 100, 200, 500]
    vg = st_variogram(res, coords, space_bins=bins, time_lags=[0, 1, 2])
    xy = coords.set_index("station_id")
    for _, row in vg.iterrows():
        acc, n = 0.0, 0
        for _, r1 in res.iterrows():
            for _, r2 in res.iterrows():
                if r2.day - r1.day != row.lag:
                    continue
                if row.lag == 0 and not r1.station_id < r2.station_id:
                    continue
                h = np.hypot(*(xy.loc[r1.station_id] - xy.loc[r2.station_id]))
                if row.h_lo <= h < row.h_hi:
                    acc += (r1.residual - r2.residual) ** 2
                    n += 1
        assert row.n_pairs == n
        if n:
            assert row.gamma == pytest.approx(0.5 * acc / n)


def test_variogram_white_noise_sill():
    rng = np.random.default_rng(1)
    coords = _coords(60, rng)
    res = pd.DataFrame(
        [(s, d, rng.normal(scale=0.5)) for s in coords.station_id for d in range(30)],
        columns=["station_id", "day", "residual"],
    )
    vg = st_variogram(res, coords, space_bins=np.arange(0, 400, 50), time_lags=range(4))
    good = vg[vg.n_pairs >= 300]
    np.testing.assert_allclose(good.gamma, 0.25, rtol=0.15)
    assert variogram_flatness(vg, 300) < 1.3

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from precipext.datastore import GridGeometry, PrecipCube
from precipext.margins import marginal_quantile, sample_marginal
from precipext.standardize import (
    CLAMP,
    from_laplace,
    laplace_cdf,
    laplace_quantile,
    laplace_survival,
    threshold_on_laplace,
    to_laplace,
    values_to_laplace,
)
from precipext.synthetic import constant_marginal

# 30-digit mpmath: log(5) and -log(0.02)
LN5 = 1.6094379124341003
NEG_LN_002 = 3.912023005428146


def test_laplace_quantile_examples():
    assert laplace_quantile(0.5) == 0.0
    assert laplace_quantile(0.9) == pytest.approx(LN5, abs=1e-14)
    assert laplace_quantile(0.1) == pytest.approx(-LN5, abs=1e-14)
    with pytest.raises(ValueError):
        laplace_quantile(1.0)
    with pytest.raises(ValueError):
        laplace_quantile(0.0)


def test_laplace_matches_scipy():
    x = np.linspace(-8, 8, 41)
    assert np.allclose(laplace_cdf(x), stats.laplace.cdf(x), atol=1e-15)
    assert np.allclose(laplace_survival(x), stats.laplace.sf(x), atol=1e-15)


def test_laplace_roundtrip_1000():
    p = np.random.default_rng(0).uniform(1e-6, 1 - 1e-6, 1000)
    assert np.max(np.abs(laplace_cdf(laplace_quantile(p)) - p)) < 1e-14


@settings(max_examples=200, deadline=None)
@given(st.floats(-30, 30))
def test_laplace_cdf_survival_sum(x):
    assert laplace_cdf(x) + laplace_survival(x) == pytest.approx(1.0, abs=1e-15)


def test_threshold_on_laplace():
    assert threshold_on_laplace(0.9) == pytest.approx(LN5, abs=1e-14)
    assert threshold_on_laplace(0.99) == pytest.approx(NEG_LN_002, abs=1e-13)
    with pytest.raises(ValueError):
        threshold_on_laplace(0.5)
    with pytest.raises(ValueError):
        threshold_on_laplace(1.0)


def cube_from(values, days):
    values = np.atleast_2d(values)
    n_t, n_s = values.shape
    return PrecipCube(GridGeometry(n_s, 1), np.arange(n_t), days, np.full(n_t, 6), values)


def test_median_maps_to_zero_and_dry_is_neg_inf():
    m = constant_marginal(np.arange(152, 155))
    med = float(marginal_quantile(0.5, 153, m))
    lap, clamped = to_laplace(cube_from([[med, 0.0, np.nan]], [153]), m)
    assert lap.values[0, 0] == pytest.approx(0.0, abs=1e-12)
    assert np.isneginf(lap.values[0, 1]) and np.isnan(lap.values[0, 2])
    assert clamped == 0
    assert lap.kind == "laplace"


def test_roundtrip_relative_1e6():
    m = constant_marginal(np.arange(152, 160), xi=0.3)
    rng = np.random.default_rng(1)
    days = np.repeat(m.days, 50)
    x = sample_marginal(np.broadcast_to(days[:, None], (len(days), 6)), m, rng)
    x[rng.uniform(size=x.shape) < 0.2] = 0.0
    cube = cube_from(x, days)
    back = from_laplace(to_laplace(cube, m)[0], m)
    pos = x > 0
    assert np.max(np.abs(back.values[pos] / x[pos] - 1)) < 1e-6
    assert np.all(back.values[~pos] == 0)


def test_clamp_is_counted():
    m = constant_marginal(np.arange(152, 153))
    y, n = values_to_laplace(np.array([1e-300, 1.0, 1e300]), np.full(3, 152), m)
    assert n == 2
    assert y[0] == pytest.approx(np.log(2 * CLAMP))
    assert np.all(np.isfinite(y))


def test_uncovered_day_and_wrong_kind():
    m = constant_marginal(np.arange(152, 153))
    with pytest.raises(KeyError):
        to_laplace(cube_from([[1.0]], [200]), m)
    lap, _ = to_laplace(cube_from([[1.0]], [152]), m)
    with pytest.raises(ValueError):
        to_laplace(lap, m)
    with pytest.raises(ValueError):
        from_laplace(cube_from([[1.0]], [152]), m)


def test_ks_of_pooled_laplace_values():
    m = constant_marginal(np.arange(152, 162))
    rng = np.random.default_rng(2)
    days = rng.choice(m.days, 100_000)
    x = sample_marginal(days, m, rng)
    y, _ = values_to_laplace(x, days, m)
    ks = stats.kstest(y, stats.laplace.cdf).statistic
    assert ks < 1.63 / np.sqrt(1e5)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.01, 200), min_size=2, max_size=30), st.integers(152, 160))
def test_monotone_within_day(xs, day):
    m = constant_marginal(np.arange(152, 161))
    x = np.array(xs)
    y, _ = values_to_laplace(x, np.full(len(x), day), m)
    order = np.argsort(x, kind="stable")
    assert np.all(np.diff(y[order]) >= 0)


def test_exceedance_correspondence():
    m = constant_marginal(np.arange(152, 157), psi=3.0)
    tau = threshold_on_laplace(0.9)
    rng = np.random.default_rng(3)
    days = rng.choice(m.days, 5000)
    x = sample_marginal(days, m, rng)
    y, _ = values_to_laplace(x, days, m)
    tau_t = marginal_quantile(0.9, days, m)
    far = np.abs(x - tau_t) > 1e-9 * tau_t
    assert np.array_equal((x > tau_t)[far], (y > tau)[far])

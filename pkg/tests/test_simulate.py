import json

import numpy as np
import pytest
from conftest import TAU, centre, truth_model
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from precipext.condext import CondExtFit, CondExtremesModel, StandardizingParams, alpha_fn, beta_fn, \
    simulate_conditional_field
from precipext.datastore import GridGeometry, load_cube
from precipext.margins import marginal_quantile
from precipext.occurrence import Nonzero, ThresholdModel
from precipext.randfield import MaternParams
from precipext.simulate import field_streams, run_simulation, sample_exceedance
from precipext.standardize import laplace_cdf, laplace_quantile, values_to_laplace
from precipext.synthetic import constant_marginal, flat_probit

G = GridGeometry(7, 7)
DAYS = np.arange(152, 162)
MARG = constant_marginal(DAYS)


def model():
    return truth_model(G)


# -- the exponential shortcut ------------------------------------------------


def test_exceedance_mean_and_ks():
    y = sample_exceedance(TAU, np.random.default_rng(0), 100_000)
    assert abs(y.mean() - (TAU + 1)) < 0.01
    assert stats.kstest(y - TAU, "expon").pvalue > 0.01


def test_exceedance_matches_rejection_sampling():
    rng = np.random.default_rng(1)
    y = laplace_quantile(rng.uniform(size=1_100_000))
    tail = y[y > np.log(5.0)][:100_000] - np.log(5.0)
    assert len(tail) == 100_000
    assert stats.kstest(tail, "expon").pvalue > 0.01


def test_exceedance_needs_nonnegative_tau():
    with pytest.raises(ValueError):
        sample_exceedance(-0.1, np.random.default_rng(0))
    assert np.ndim(sample_exceedance(0.0, np.random.default_rng(0))) == 0


# -- run_simulation ----------------------------------------------------------


@pytest.fixture(scope="module")
def nonzero_batch():
    return run_simulation(MARG, model(), Nonzero(), G, master_seed=3)


def test_default_batch_exceeds_threshold_at_s0(nonzero_batch):
    b = nonzero_batch
    s0 = centre(G)
    assert b.n_fields == 1000 and b.values.shape == (1000, G.n_sites)
    tau_mm = marginal_quantile(laplace_cdf(TAU), b.days, MARG)
    assert np.all(b.values[:, s0] > tau_mm)
    assert np.array_equal(b.laplace[:, s0], b.y0)
    assert np.all(np.isin(b.days, DAYS))


def test_nonzero_batch_has_no_zeros(nonzero_batch):
    assert np.all(nonzero_batch.values > 0)
    assert np.all(nonzero_batch.occurrence == 1)


def test_conditioning_site_is_exponential(nonzero_batch):
    assert stats.kstest(nonzero_batch.y0 - TAU, "expon").pvalue > 0.01


def test_back_transform_recovers_laplace(nonzero_batch):
    b = nonzero_batch
    days = np.broadcast_to(b.days[:, None], b.values.shape)
    y, clamped = values_to_laplace(b.values, days, MARG)
    assert clamped == 0
    rel = np.abs(y - b.laplace) / np.maximum(np.abs(b.laplace), 1e-300)
    assert np.max(rel) < 1e-6


def test_time_pool_is_sampled_uniformly(nonzero_batch):
    counts = np.bincount(nonzero_batch.pool_index, minlength=len(DAYS))
    assert stats.chisquare(counts).pvalue > 0.01


def test_seed_determinism():
    a = run_simulation(MARG, model(), flat_probit(0.7), G, 50, master_seed=9)
    b = run_simulation(MARG, model(), flat_probit(0.7), G, 50, master_seed=9)
    c = run_simulation(MARG, model(), flat_probit(0.7), G, 50, master_seed=10)
    assert np.array_equal(a.values, b.values) and np.array_equal(a.occurrence, b.occurrence)
    assert not np.array_equal(a.values, c.values)


def test_streams_do_not_depend_on_batch_size():
    short = run_simulation(MARG, model(), flat_probit(0.7), G, 5, master_seed=4)
    long = run_simulation(MARG, model(), flat_probit(0.7), G, 12, master_seed=4)
    assert np.array_equal(short.values, long.values[:5])
    s = field_streams(4, 3)
    assert s[1].standard_normal() == field_streams(4, 7)[1].standard_normal()


def test_threshold_batch_zero_share():
    p = 0.35
    b = run_simulation(MARG, model(), ThresholdModel(p), G, 1000, master_seed=5)
    assert abs(np.mean(b.values == 0) - p) < 0.01
    assert np.all(b.values[:, centre(G)] > 0)
    assert np.all(np.isneginf(b.laplace[b.values == 0]))


def test_region_restricts_threshold_occurrence():
    region = np.zeros(G.n_sites, bool)
    region[:21] = True
    region[centre(G)] = True
    b = run_simulation(MARG, model(), ThresholdModel(0.5), G, 200, region=region, master_seed=6)
    assert np.all(b.values[:, ~region] > 0)
    assert abs(np.mean(b.values[:, region] == 0) - 0.5) < 0.02
    assert b.provenance()["region_sites"] == np.flatnonzero(region).tolist()


def test_theta_redrawn_per_field_unless_fixed():
    m = model()
    fit = CondExtFit(m, m.theta, np.eye(11), np.eye(11) * 1e-4, 0.0, True, 0.0, False)
    b = run_simulation(MARG, fit, Nonzero(), G, 20, master_seed=7)
    assert len(np.unique(b.thetas[:, 0])) == 20
    assert np.max(np.abs(b.thetas - m.theta)) < 0.1
    f = run_simulation(MARG, fit, Nonzero(), G, 20, master_seed=7, fix_theta=True)
    assert np.array_equal(f.thetas, np.tile(m.theta, (20, 1)))


def test_run_simulation_errors():
    m = model()
    with pytest.raises(ValueError):
        run_simulation(MARG, m, Nonzero(), G, 5, region=np.zeros(G.n_sites, bool))
    with pytest.raises(ValueError):
        run_simulation(MARG, m, Nonzero(), G, 5, region=np.ones(3, bool))
    with pytest.raises(ValueError):
        run_simulation(MARG, m, Nonzero(), G, 5, time_pool_days=[400])
    with pytest.raises(ValueError):
        run_simulation(MARG, m, Nonzero(), GridGeometry(3, 3), 5)


def test_batch_write_and_provenance(tmp_path):
    b = run_simulation(MARG, model(), flat_probit(0.7), G, 8, master_seed=2, fingerprints={"marginal": "abc"})
    b.write(tmp_path / "sim.bin", tmp_path / "sim.json")
    cube = load_cube(tmp_path / "sim.bin")
    assert np.array_equal(cube.values, b.values)
    prov = json.loads((tmp_path / "sim.json").read_text())
    assert prov["master_seed"] == 2 and prov["fingerprints"] == {"marginal": "abc"}
    assert [f["y0"] for f in prov["fields"]] == b.y0.tolist()
    assert [f["stream"] for f in prov["fields"]] == list(range(8))


# -- coupling ----------------------------------------------------------------


DRIFT_FREE = StandardizingParams(10.0, 1e12, 1.2, 1e12, 1.5, 0.65, 8.5, 0.5)


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-6, 5.0), st.floats(0.01, 3.0), st.integers(0, 2**31))
def test_monotone_coupling(u, du, seed):
    m = CondExtremesModel(DRIFT_FREE, MaternParams(0.5, 15.0, 1.5), 0.0, TAU, centre(G))
    y0, y1 = TAU + u, TAU + u + du
    a = simulate_conditional_field(m, y0, G, np.random.default_rng(seed))
    b = simulate_conditional_field(m, y1, G, np.random.default_rng(seed))
    d = G.distances_from(m.s0)
    beta = beta_fn(d, m.params)
    mean0 = alpha_fn(d, y0, m.params, TAU) * y0
    mean1 = alpha_fn(d, y1, m.params, TAU) * y1
    assert np.all(mean1 >= mean0)
    # the same residual draw sits under both fields
    z = (a - mean0) / y0**beta
    assert np.allclose(b, mean1 + y1**beta * z, rtol=1e-10, atol=1e-10)

import numpy as np
import pytest
from conftest import centre, truth_model
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from precipext.datastore import GridGeometry
from precipext.diagnostics import chi_hat
from precipext.evaluate import QQ_PROBS, AggregationSpec, aggregated_sums, ball_masks, chi_overlay, qq_table
from precipext.occurrence import Nonzero, ThresholdModel
from precipext.simulate import run_simulation
from precipext.synthetic import SyntheticTruth, constant_marginal, flat_probit, generate_synthetic

G = GridGeometry(9, 9, cell_size=2.0)
S0 = centre(G)


# -- aggregated sums ---------------------------------------------------------


def test_singleton_ball():
    f = np.random.default_rng(0).gamma(1.0, size=(5, G.n_sites))
    s = aggregated_sums(f, G, AggregationSpec(S0, (1.0,)))
    assert np.array_equal(s[:, 0], f[:, S0] * 4.0)


def test_unit_field_counts_cells():
    region = np.zeros(G.n_sites, bool)
    region[: 4 * 9] = True
    region[S0] = True
    spec = AggregationSpec(S0, (0.0, 2.0, 4.0, 100.0), region)
    s = aggregated_sums(np.ones(G.n_sites), G, spec)
    assert s.tolist() == [(ball_masks(G, spec).sum(axis=1) * 4.0).tolist()]
    assert s[0, -1] == region.sum() * 4.0


@settings(max_examples=50, deadline=None)
@given(arrays(float, (3, 81), elements=st.floats(0, 100)), st.lists(st.floats(0, 20), min_size=1, max_size=5))
def test_sums_monotone_and_additive(f, radii):
    radii = tuple(sorted(radii))
    half = np.arange(G.n_sites) % 2 == 0
    full = aggregated_sums(f, G, AggregationSpec(S0, radii))
    assert np.all(np.diff(full, axis=1) >= -1e-9 * np.abs(full[:, 1:]).max(initial=1.0))
    a = aggregated_sums(f, G, AggregationSpec(S0, radii, half))
    b_region = ~half
    if ball_masks(G, AggregationSpec(S0, radii, b_region))[0].any():
        b = aggregated_sums(f, G, AggregationSpec(S0, radii, b_region))
        assert np.allclose(a + b, full, rtol=1e-12, atol=1e-9)


def test_sums_guards():
    with pytest.raises(ValueError):
        AggregationSpec(S0, (3.0, 1.0))
    with pytest.raises(ValueError):
        AggregationSpec(S0, ())
    region = np.ones(G.n_sites, bool)
    region[S0] = False
    with pytest.raises(ValueError):
        aggregated_sums(np.ones(G.n_sites), G, AggregationSpec(S0, (0.5,), region))
    f = np.ones((1, G.n_sites))
    f[0, S0 + 1] = np.nan
    assert aggregated_sums(f, G, AggregationSpec(S0, (2.0,)))[0, 0] == 4 * 4.0


# -- QQ tables ---------------------------------------------------------------


def test_qq_probs_grid():
    assert len(QQ_PROBS) == 20 and QQ_PROBS[0] == 0.05 and QQ_PROBS[-2] == 0.95 and QQ_PROBS[-1] == 0.99


def test_qq_identical_scaled_and_symmetric(tmp_path):
    x = np.random.default_rng(1).gamma(0.7, 2.0, 500)
    same = qq_table(x, x)
    assert np.array_equal(same.first, same.second)
    double = qq_table(x, 2 * x)
    assert np.allclose(double.second, 2 * double.first, rtol=1e-14)
    y = np.random.default_rng(2).gamma(0.7, 3.0, 300)
    ab, ba = qq_table(x, y), qq_table(y, x)
    assert np.array_equal(ab.first, ba.second) and np.array_equal(ab.second, ba.first)
    ab.to_csv(tmp_path / "qq.csv")
    lines = (tmp_path / "qq.csv").read_text().splitlines()
    assert lines[0] == "p,observed,simulated" and len(lines) == 21
    with pytest.raises(ValueError):
        qq_table([], x)
    with pytest.raises(ValueError):
        qq_table([np.nan], x)


def test_qq_self_consistency_of_truth_pipeline():
    g = GridGeometry(11, 11)
    m = truth_model(g)
    marg = constant_marginal(np.arange(152, 182))
    spec = AggregationSpec(m.s0, (2.0, 5.0))
    a = run_simulation(marg, m, Nonzero(), g, 1000, master_seed=11)
    b = run_simulation(marg, m, Nonzero(), g, 1000, master_seed=12)
    sa, sb = aggregated_sums(a.values, g, spec), aggregated_sums(b.values, g, spec)
    probs = QQ_PROBS[QQ_PROBS <= 0.95]
    for k in range(2):
        t = qq_table(sa[:, k], sb[:, k], probs)
        assert np.max(np.abs(t.second / t.first - 1)) < 0.15


# -- chi overlays ------------------------------------------------------------


def test_overlay_uses_one_estimator_for_both_sources(tmp_path):
    calls = []

    def spy(data, geometry, p, d_grid=None, s0=None):
        calls.append((id(data), p, s0))
        return chi_hat(data, geometry, p, d_grid=d_grid, s0=s0)

    rng = np.random.default_rng(3)
    obs, sim = rng.laplace(size=(400, 81)), rng.laplace(size=(300, 81))
    out = chi_overlay(obs, sim, G, S0, (0.8, 0.9), d_grid=[2.0, 4.0], estimator=spy)
    assert calls == [(id(obs), 0.8, S0), (id(sim), 0.8, S0), (id(obs), 0.9, S0), (id(sim), 0.9, S0)]
    assert chi_overlay.__defaults__[-1] is chi_hat
    direct = chi_hat(sim, G, 0.9, d_grid=[2.0, 4.0], s0=S0)
    assert np.array_equal(out[1].simulated.chi, direct.chi)
    out[0].to_csv(tmp_path / "chi.csv")
    assert (tmp_path / "chi.csv").read_text().splitlines()[0] == "p,d,chi_observed,n_observed,chi_simulated,n_simulated"


@pytest.fixture(scope="module")
def loop():
    g = GridGeometry(11, 11)
    m = truth_model(g)
    marg = constant_marginal(np.arange(152, 182))
    truth = SyntheticTruth(marg, dependence="condext", condext=m, seed=21)
    _, obs = generate_synthetic(truth, g, 12_000, return_laplace=True)
    batches = {
        name: run_simulation(marg, m, occ, g, 1000, master_seed=22)
        for name, occ in (("nonzero", Nonzero()), ("threshold", ThresholdModel(0.35)), ("probit", flat_probit(0.6)))
    }
    return g, m, obs, batches


def test_overlay_closed_loop_agreement(loop):
    g, m, obs, batches = loop
    d = np.arange(1.0, 8.0)
    ov = chi_overlay(obs, batches["nonzero"].laplace, g, m.s0, (0.9,), d_grid=d)[0]
    assert ov.observed.n_cond.min() > 1000
    assert np.max(np.abs(ov.observed.chi - ov.simulated.chi)) < 0.07


def test_threshold_and_nonzero_chi_nearly_identical(loop):
    g, m, _, batches = loop
    d = np.arange(1.0, 8.0)
    a = chi_hat(batches["nonzero"].laplace, g, 0.9, d_grid=d, s0=m.s0)
    b = chi_hat(batches["threshold"].laplace, g, 0.9, d_grid=d, s0=m.s0)
    assert np.max(np.abs(a.chi - b.chi)) < 0.02


def test_probit_chi_not_above_nonzero_at_large_distance(loop):
    g, m, _, batches = loop
    d = np.arange(5.0, 8.0)
    a = chi_hat(batches["nonzero"].laplace, g, 0.9, d_grid=d, s0=m.s0)
    b = chi_hat(batches["probit"].laplace, g, 0.9, d_grid=d, s0=m.s0)
    assert np.all(b.chi <= a.chi)

import numpy as np
import pytest
from conftest import TAU, TRUTH_PARAMS, centre, laplace_cube, make_events, truth_model
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from precipext.condext import (
    CondExtError,
    CondExtObjective,
    CondExtPriors,
    CondExtremesModel,
    StandardizingParams,
    alpha_fn,
    beta_fn,
    conditional_moments,
    extract_events,
    fit_map,
    kappa_a,
    lambda_a,
    least_squares_prefit,
    model_chi,
    neg_log_posterior,
    residual_variance,
    simulate_conditional_field,
)
from precipext.datastore import GridGeometry, PrecipCube
from precipext.randfield import MaternParams, build_sampler, matern_correlation
from precipext.simulate import sample_exceedance
from precipext.standardize import laplace_quantile

# 30-digit mpmath: 10/e, 0.65/e, sqrt(e)
TEN_OVER_E = 3.678794411714423
B_AT_8_5 = 0.2391216367614375
SQRT_E = 1.6487212707001282


def params(**kw):
    base = dict(lambda_a0=10.0, Lambda_lambda=2.0, kappa_a0=1.0, Lambda_kappa=3.0, varkappa=1.5,
                beta0=0.65, lambda_b=8.5, kappa_b=0.5)
    base.update(kw)
    return StandardizingParams(**base)


# -- standardizing functions -------------------------------------------------


def test_alpha_examples():
    p = params()
    assert alpha_fn(0.0, 4.0, p, 1.0) == 1.0
    d = np.array([0.5, 3.0, 12.0])
    assert np.allclose(alpha_fn(d, 1.0, p, 1.0), np.exp(-(d / 10.0) ** 1.0), rtol=1e-14)
    # a huge Lambda_kappa holds kappa_a at kappa_a0 = 1
    p = params(Lambda_kappa=1e12)
    lam = lambda_a(3.0, p, 1.0)
    assert lam == pytest.approx(TEN_OVER_E, rel=1e-14)
    assert alpha_fn(TEN_OVER_E, 3.0, p, 1.0) == pytest.approx(np.exp(-1), rel=1e-10)


def test_beta_examples():
    p = params()
    assert beta_fn(0.0, p) == 0.65
    assert beta_fn(8.5, p) == pytest.approx(B_AT_8_5, abs=1e-15)
    assert beta_fn(8.5, params(kappa_b=1.0)) == pytest.approx(0.65 / np.e, rel=1e-14)
    with pytest.raises(ValueError):
        beta_fn(-1.0, p)


def test_params_validation():
    with pytest.raises(ValueError):
        params(beta0=1.0)
    with pytest.raises(ValueError):
        params(lambda_b=0.0)
    with pytest.raises(ValueError):
        CondExtremesModel(params(), MaternParams(1.5, 10.0), 0.1, TAU, 0)


def test_theta_roundtrip():
    m = CondExtremesModel(params(), MaternParams(0.5, 12.0, 1.3), 0.2, TAU, 7)
    back = CondExtremesModel.from_theta(m.theta, TAU, 7)
    assert np.allclose(back.theta, m.theta, rtol=1e-14, atol=1e-14)
    assert back.params.beta0 == pytest.approx(0.65)


def test_conditional_moments_examples():
    m = CondExtremesModel(params(), MaternParams(0.5, 10.0, 1.0), 0.3, TAU, 0)
    mean, sd = conditional_moments(0.0, 2.5, m)
    assert mean == 2.5 and sd == 0.0
    # sigma_eps = 0, beta = 0: sd equals the constrained residual sd for every y0
    m0 = CondExtremesModel(params(beta0=0.0), MaternParams(0.5, 10.0, 1.0), 0.0, TAU, 0)
    _, s1 = conditional_moments(4.0, 2.0, m0)
    _, s2 = conditional_moments(4.0, 7.0, m0)
    assert s1 == pytest.approx(s2, rel=1e-14)
    assert s1 == pytest.approx(np.sqrt(residual_variance(4.0, m0.residual)), rel=1e-14)
    # y0 = e, beta(d) = 0.5, sigma(d) = 1, sigma_eps = 0: the residual sd is pushed to 1 by a huge
    # sigma with a tiny range, and beta to 0.5 by beta0 = 0.5 with a huge lambda_b
    p = params(beta0=0.5, lambda_b=1e12, kappa_b=1.0)
    m1 = CondExtremesModel(p, MaternParams(0.5, 1e-9, 1.0), 0.0, TAU, 0)
    _, sd = conditional_moments(3.0, np.e, m1)
    assert sd == pytest.approx(SQRT_E, rel=1e-9)


@settings(max_examples=100, deadline=None)
@given(
    st.floats(0.5, 50), st.floats(0.2, 20), st.floats(0.1, 3), st.floats(0.2, 20), st.floats(0.2, 4),
    st.floats(0, 0.99), st.floats(0.5, 50), st.floats(0.1, 3), st.floats(0, 6),
)
def test_standardizing_invariants(la, Ll, ka, Lk, vk, b0, lb, kb, u):
    p = StandardizingParams(la, Ll, ka, Lk, vk, b0, lb, kb)
    d = np.linspace(0, 60, 121)
    y0 = TAU + u
    a = alpha_fn(d, y0, p, TAU)
    assert a[0] == 1.0
    assert np.all((a > 0) | (d > 0)) and np.all(a <= 1)
    assert np.all(np.diff(a) <= 1e-15)
    ys = TAU + np.array([u, u + 0.5, u + 2])
    assert np.all(np.diff(lambda_a(ys, p, TAU)) <= 0)
    assert np.all(np.diff(kappa_a(ys, p, TAU)) <= 1e-15)
    m = CondExtremesModel(p, MaternParams(0.5, 10.0, 1.0), 0.1, TAU, 0)
    mean, sd = conditional_moments(0.0, y0, m)
    assert mean == y0 and sd == 0.0


# -- events ------------------------------------------------------------------


def test_extract_events_strict():
    g = GridGeometry(2, 1)
    cube = laplace_cube(g, [[1.0, 0.0], [1.7, 0.3], [2.0, -1.0]])
    ev = extract_events(cube, 0, TAU)
    assert ev.n_events == 2
    assert np.all(ev.y0 > TAU)
    exact = laplace_cube(g, [[TAU, 0.0], [TAU + 1e-12, 0.0]])
    assert extract_events(exact, 0, TAU).n_events == 1
    with pytest.raises(CondExtError, match="lower p_tau"):
        extract_events(cube, 0, 5.0)


def test_extract_events_count_binomial():
    g = GridGeometry(3, 3)
    y = laplace_quantile(np.random.default_rng(0).uniform(size=(10_000, 9)))
    ev = extract_events(laplace_cube(g, y), 4, TAU)
    assert 900 <= ev.n_events <= 1100


def test_extract_events_masked_site():
    g = GridGeometry(2, 1)
    masked = PrecipCube(g, [0], [180], [6], [[3.0, 0.0]], site_mask=[False, True], kind="laplace")
    with pytest.raises(ValueError, match="masked"):
        extract_events(masked, 0, TAU)


# -- prefit ------------------------------------------------------------------


def test_prefit_noiseless_identifiable():
    g = GridGeometry(15, 15)
    p = StandardizingParams(6.0, 3.0, 1.3, 2.0, 1.5, 0.0, 8.5, 0.5)
    m = CondExtremesModel(p, MaternParams(0.5, 10.0, 0.0), 0.0, TAU, centre(g))
    rng = np.random.default_rng(0)
    d = g.distances_from(m.s0)
    y0 = sample_exceedance(TAU, rng, 300)
    fields = alpha_fn(d[None], y0[:, None], p, TAU) * y0[:, None]
    ev = extract_events(laplace_cube(g, fields), m.s0, TAU)
    fit = least_squares_prefit(ev)
    grid_d = np.linspace(0, 20, 81)[None]
    grid_y = np.linspace(TAU, TAU + 3, 31)[:, None]
    est = CondExtremesModel.from_theta(np.r_[fit.theta_a, np.zeros(6)], TAU, m.s0).params
    err = np.abs(alpha_fn(grid_d, grid_y, est, TAU) - alpha_fn(grid_d, grid_y, p, TAU))
    assert err.max() < 1e-3
    assert len(fit.windows) >= 5


def test_prefit_guards():
    g = GridGeometry(3, 1)
    few = extract_events(laplace_cube(g, [[1.0, 2.0, 0.5]] * 5), 1, TAU)
    with pytest.raises(CondExtError, match="at least 20"):
        least_squares_prefit(few)
    # 20 events but every window has only 20 * 2 = 40 values, below a 50 minimum
    ev = extract_events(laplace_cube(g, [[1.0, 2.0, 0.5]] * 20), 1, TAU)
    with pytest.raises(CondExtError, match="too few"):
        least_squares_prefit(ev, min_obs=50)


# -- likelihood --------------------------------------------------------------


def test_scalar_case_oracle():
    g = GridGeometry(2, 1)
    m = CondExtremesModel(params(), MaternParams(0.5, 4.0, 1.3), 0.2, TAU, 0)
    y0, x = 2.3, 1.1
    ev = extract_events(laplace_cube(g, [[y0, x]]), 0, TAU)
    pri = CondExtPriors()
    val = neg_log_posterior(m.theta, ev, pri)
    d = 1.0
    mean = alpha_fn(d, y0, m.params, TAU) * y0
    gam = np.exp(-2 * d / 4.0)  # kappa = sqrt(8 nu) / rho
    var = 1.3**2 * (1 - gam**2) * y0 ** (2 * beta_fn(d, m.params)) + 0.2**2
    nll = 0.5 * np.log(2 * np.pi * var) + 0.5 * (x - mean) ** 2 / var
    assert val - nll == pytest.approx(-pri.log_density(m.theta)[0], abs=1e-10)
    # Gaussian parts of the prior, by hand
    t = m.theta
    gauss = -0.5 * (
        np.sum(((t[:5] - np.array(pri.a_means)) / 5) ** 2)
        + np.sum(((t[5:8] - np.array(pri.b_means)) / 5) ** 2)
        + ((t[10] - np.log(0.1)) / 5) ** 2
    )
    pc = pri.residual_pc.log_density_log_scale(t[8], t[9])
    assert pri.log_density(t)[0] == pytest.approx(gauss + pc, abs=1e-12)


def test_likelihood_additive_over_duplicated_data():
    g = GridGeometry(5, 5)
    m = truth_model(g)
    ev = make_events(m, g, 30, np.random.default_rng(1))
    twice = extract_events(laplace_cube(g, np.concatenate([ev.fields(), ev.fields()])), ev.s0, TAU)
    a = CondExtObjective(ev, stride=1).neg_log_likelihood(m.theta, grad=False)
    b = CondExtObjective(twice, stride=1).neg_log_likelihood(m.theta, grad=False)
    assert b == pytest.approx(2 * a, rel=1e-12)


def test_gradient_matches_finite_differences():
    g = GridGeometry(7, 7)
    m = truth_model(g)
    ev = make_events(m, g, 40, np.random.default_rng(2))
    # knock out a few values so the partial-observation path is exercised
    v = ev.fields()
    v[3, 5] = np.nan
    v[7, 11] = -np.inf
    ev = extract_events(laplace_cube(g, v), ev.s0, TAU)
    obj = CondExtObjective(ev, stride=1)
    rng = np.random.default_rng(3)
    h = 1e-5
    for _ in range(10):
        th = m.theta + 0.3 * rng.standard_normal(11)
        _, grad = obj(th)
        fd = np.empty(11)
        for i in range(11):
            e = np.zeros(11)
            e[i] = h
            fd[i] = (obj.value(th + e) - obj.value(th - e)) / (2 * h)
        scale = np.maximum(np.abs(fd), 1.0)
        assert np.max(np.abs(grad - fd) / scale) < 1e-4


@pytest.mark.slow
def test_truth_beats_perturbed_lambda():
    g = GridGeometry(25, 25)
    m = truth_model(g)
    worse = m.theta.copy()
    worse[0] += np.log(1.5)
    pri = CondExtPriors()
    wins = 0
    for rep in range(20):
        ev = make_events(m, g, 400, np.random.default_rng(100 + rep))
        obj = CondExtObjective(ev, pri, stride=2)
        wins += obj.value(m.theta) < obj.value(worse)
    assert wins >= 19


def test_local_optimality_smoke():
    g = GridGeometry(9, 9)
    m = truth_model(g, residual=MaternParams(0.5, 6.0, 1.5))
    ev = make_events(m, g, 120, np.random.default_rng(4))
    fit = fit_map(ev, stride=1, n_starts=1)
    obj = CondExtObjective(ev, CondExtPriors().with_a_means(fit.prefit.theta_a), stride=1)
    rng = np.random.default_rng(5)
    th = fit.theta + 0.05 * rng.standard_normal(11)
    f0 = obj.value(th)
    for _ in range(5):
        f, gr = obj(th)
        step = 1e-3 * gr / max(1.0, np.linalg.norm(gr))
        th = th - step
    assert obj.value(th) < f0
    assert obj.value(fit.theta) <= f0
    assert fit.covariance.shape == (11, 11)
    assert np.all(np.linalg.eigvalsh(fit.covariance) > 0)


def test_factorization_failure_gives_inf():
    g = GridGeometry(3, 1)
    ev = extract_events(laplace_cube(g, [[0.1, 2.0, 0.3]]), 1, TAU)
    obj = CondExtObjective(ev, stride=1)
    th = truth_model(g).theta
    th[9] = th[10] = -400.0  # every variance underflows to zero
    assert obj.value(th) == np.inf
    assert obj.last_failed


# -- simulation --------------------------------------------------------------


def test_conditioning_value_exact():
    g = GridGeometry(6, 6)
    m = truth_model(g)
    rng = np.random.default_rng(6)
    sampler = build_sampler(g, m.residual, constraint=m.s0)
    for y0 in (TAU + 1e-9, 2.5, 9.0):
        for _ in range(20):
            assert simulate_conditional_field(m, y0, g, rng, sampler)[m.s0] == y0
    with pytest.raises(ValueError):
        simulate_conditional_field(m, TAU, g, rng)


def test_deterministic_without_noise():
    g = GridGeometry(5, 5)
    m = CondExtremesModel(params(), MaternParams(0.5, 5.0, 0.0), 0.0, TAU, 12)
    a = simulate_conditional_field(m, 3.0, g, np.random.default_rng(0))
    b = simulate_conditional_field(m, 3.0, g, np.random.default_rng(1))
    assert np.array_equal(a, b)
    assert np.allclose(a, alpha_fn(g.distances_from(12), 3.0, m.params, TAU) * 3.0, rtol=1e-14)


def test_simulated_moments_match_conditional_moments():
    g = GridGeometry(7, 7)
    m = truth_model(g, residual=MaternParams(0.5, 6.0, 1.5))
    sampler = build_sampler(g, m.residual, constraint=m.s0)
    rng = np.random.default_rng(7)
    d = g.distances_from(m.s0)
    sites = [m.s0 + 1, m.s0 + 2 * 7 + 1, 0]
    n = 100_000
    for y0 in (2.0, 5.0):
        a = alpha_fn(d, y0, m.params, TAU) * y0
        b = y0 ** beta_fn(d, m.params)
        Z = sampler.sample(rng, n)
        X = a + b * Z + m.sigma_eps * rng.standard_normal(Z.shape)
        for s in sites:
            mean, sd = conditional_moments(d[s], y0, m)
            assert abs(X[:, s].mean() - mean) < 3 * sd / np.sqrt(n)
            # se of a sample sd is about sd / sqrt(2 n)
            assert abs(X[:, s].std() - sd) < 3 * sd / np.sqrt(2 * n)
    # the public single-draw path agrees with the vectorised one above
    one = np.stack([simulate_conditional_field(m, 2.0, g, rng, sampler) for _ in range(4000)])
    mean, sd = conditional_moments(d[sites[0]], 2.0, m)
    assert abs(one[:, sites[0]].mean() - mean) < 4 * sd / np.sqrt(4000)


# -- model chi ---------------------------------------------------------------


def test_model_chi_perfect_dependence():
    m = CondExtremesModel(params(lambda_a0=1e12, Lambda_lambda=1e12), MaternParams(0.5, 5.0, 0.0), 0.0, TAU, 0)
    chi = model_chi(m, 0.9, [1.0, 10.0, 50.0], n_mc=10_000)
    assert np.all(chi == 1.0)


def test_model_chi_independence_limit():
    p = 0.9
    q = float(laplace_quantile(p))
    # a = 0, b = 1, residual sd chosen so the far-field Gaussian exceeds q with probability 1 - p
    sigma = q / stats.norm.ppf(p)
    # a huge Lambda_kappa keeps kappa_a from decaying, which would pull alpha towards 1/e
    p_ = params(lambda_a0=1e-6, Lambda_kappa=1e12, beta0=0.0)
    m = CondExtremesModel(p_, MaternParams(0.5, 1.0, sigma), 0.0, TAU, 0)
    chi = model_chi(m, p, [40.0, 80.0], n_mc=10_000)
    assert np.allclose(chi, 1 - p, atol=1e-9)


def test_model_chi_validation():
    m = truth_model(GridGeometry(3, 3))
    with pytest.raises(ValueError):
        model_chi(m, 1.0, [1.0])
    with pytest.raises(ValueError):
        model_chi(m, 0.9, [1.0], n_mc=100)


def test_model_chi_matches_direct_simulation():
    g = GridGeometry(11, 1)
    m = CondExtremesModel(TRUTH_PARAMS, MaternParams(0.5, 15.0, 1.5), 0.1, TAU, 0)
    d = 5.0
    n = 100_000
    chi = model_chi(m, 0.9, [d], n_mc=n, rng=np.random.default_rng(8))[0]
    rng = np.random.default_rng(9)
    y0 = sample_exceedance(TAU, rng, n)
    mean, sd = conditional_moments(d, y0, m)
    # draw the site value from its conditional law given y0
    x = mean + sd * rng.standard_normal(n)
    direct = np.mean(x > TAU)
    assert abs(chi - direct) < 0.03
    # and against the spatial sampler at that site
    sampler = build_sampler(g, m.residual, constraint=0)
    Z = sampler.sample(rng, 20_000)[:, 5]
    y0 = sample_exceedance(TAU, rng, 20_000)
    xs = alpha_fn(d, y0, m.params, TAU) * y0 + y0 ** beta_fn(d, m.params) * Z + 0.1 * rng.standard_normal(20_000)
    assert abs(np.mean(xs > TAU) - chi) < 0.03
    assert matern_correlation(d, m.residual) > 0

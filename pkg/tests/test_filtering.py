import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats
from oracles import grid_filter_loglik

from tcbm_credit.data import CdsPanel
from tcbm_credit.estimation import simulate_panel
from tcbm_credit.filtering import (
    FilterMode,
    FilterState,
    MeasurementVector,
    Predictor,
    QuoteTransform,
    fuse,
    gaussian_poly_integral,
    measurement_update,
    naive_measurement_loglik,
    predict_step,
    rmse,
    rmse_of,
    run_filter,
    truncnorm_from_moments,
    truncnorm_moments,
)
from tcbm_credit.firstpassage import conditional_density
from tcbm_credit.model import ModelParams
from tcbm_credit.pricing import ZeroCurve
from tcbm_credit.timechange import TcbmParams, TimeChangeSpec

THETA = ModelParams(1.0, -1.5, 0.6, 1.5)
FLAT = ZeroCurve.flat(0.03)
WEEK = 1 / 52


@pytest.fixture(scope="module")
def vg_panel():
    return simulate_panel("vg", THETA, FLAT, 12, seed=3).panel


def _meas(xt, wt, slope=None):
    xt = np.asarray(xt, dtype=float)
    slope = -np.ones_like(xt) if slope is None else np.asarray(slope, dtype=float)
    return MeasurementVector(0, xt, np.asarray(wt, dtype=float), slope, np.ones(xt.shape, dtype=bool))


def test_single_quote_from_diffuse_prior():
    s = measurement_update(FilterState.diffuse(), _meas([0.8], [0.01]), 1.5)
    assert s.mean == 0.8
    assert s.var == pytest.approx((1.5 * 0.01) ** 2, rel=1e-15)


def test_two_equal_width_quotes_average():
    s = measurement_update(FilterState.diffuse(), _meas([0.6, 0.9], [0.02, 0.02]), 1.0)
    assert s.mean == pytest.approx(0.75, rel=1e-15)


def test_fusion_against_grid_product():
    rng = np.random.default_rng(0)
    xt = 0.7 + 0.01 * rng.standard_normal(7)
    sd = 0.005 * (1 + rng.random(7))
    mean, var, logc = fuse(xt, sd)
    x = np.linspace(0.55, 0.85, 200_001)
    logp = sum(stats.norm.logpdf(a, loc=x, scale=s) for a, s in zip(xt, sd))
    top = logp.max()
    dens = np.exp(logp - top)
    mass = integrate.simpson(dens, x=x)
    assert math.log(mass) + top == pytest.approx(logc, abs=1e-8)
    m1 = integrate.simpson(x * dens, x=x) / mass
    m2 = integrate.simpson(x * x * dens, x=x) / mass
    assert m1 == pytest.approx(mean, abs=1e-8)
    assert m2 - m1 * m1 == pytest.approx(var, abs=1e-8)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.1, 3.0), st.floats(1e-3, 1.0), st.lists(st.floats(0.1, 3.0), min_size=1, max_size=7),
       st.floats(1e-3, 0.5))
def test_update_never_widens(mean, sd, quotes, width):
    prior = FilterState(mean, sd * sd, 0.0)
    post = measurement_update(prior, _meas(quotes, [width] * len(quotes)), 1.3)
    assert post.var <= prior.var


def test_all_tenors_invalid_is_an_error():
    with pytest.raises(ValueError):
        MeasurementVector(0, np.array([1.0]), np.array([0.1]), np.array([-1.0]), np.array([False]))


def _truncnorm_by_quad(mu, sigma):
    z = stats.norm.sf(0, mu, sigma)
    m1 = integrate.quad(lambda x: x * stats.norm.pdf(x, mu, sigma), 0, np.inf, epsabs=1e-13)[0] / z
    m2 = integrate.quad(lambda x: x * x * stats.norm.pdf(x, mu, sigma), 0, np.inf, epsabs=1e-13)[0] / z
    return m1, m2


def test_truncated_normal_worked_example():
    m1, m2 = truncnorm_moments(1.0, 1.0)
    q1, q2 = _truncnorm_by_quad(1.0, 1.0)
    assert m1 == pytest.approx(1.2876, abs=1e-4)
    assert m1 == pytest.approx(q1, rel=1e-10)
    assert m2 == pytest.approx(q2, rel=1e-10)
    mu, sigma = truncnorm_from_moments(m1, m2)
    assert mu == pytest.approx(1.0, abs=1e-10)
    assert sigma == pytest.approx(1.0, abs=1e-10)


def test_brownian_predict_far_from_barrier():
    sigma, beta = 0.3, -0.5
    pred = Predictor(TimeChangeSpec.brownian(), sigma, beta, WEEK)
    for mode in FilterMode:
        state = FilterState(2.0, 0.05**2, 0.0, mode)
        new, mom = predict_step(state, pred)
        mean, sd = new.moments()
        assert mean == pytest.approx(2.0 + beta * sigma**2 * WEEK, abs=1e-6)
        assert sd * sd == pytest.approx(0.05**2 + sigma**2 * WEEK, abs=1e-6)
        assert mom["log_m0"] <= 0


def _predict_by_quadrature(spec, sigma, beta, dt, mu, sd, n_nodes=48):
    """Survival mass and conditional moments of the next state, by 2-D quadrature."""
    lo, hi = max(mu - 8 * sd, 0.0), mu + 8 * sd
    nodes, weights = np.polynomial.legendre.leggauss(n_nodes)
    x = 0.5 * (hi - lo) * nodes + 0.5 * (hi + lo)
    w = 0.5 * (hi - lo) * weights * stats.norm.pdf(x, mu, sd) / stats.norm.sf(0, mu, sd)
    m = np.zeros(3)
    for xi, wi in zip(x, w):
        d = conditional_density(spec, TcbmParams(xi, sigma, beta), dt, xi)
        for j in range(3):
            m[j] += wi * d.survival * integrate.simpson(d.y**j * d.values, x=d.y)
    return m[0], m[1] / m[0], m[2] / m[0]


@pytest.mark.parametrize("mu,sd", [(0.8, 0.02), (0.3, 0.05)])
def test_vg_predict_against_double_quadrature(mu, sd):
    spec = TimeChangeSpec.vg(0.2, 1.0)
    new, mom = predict_step(FilterState(mu, sd * sd, 0.0), Predictor(spec, 0.3, -0.5, WEEK))
    m0, m1, m2 = _predict_by_quadrature(spec, 0.3, -0.5, WEEK, mu, sd)
    assert math.exp(mom["log_m0"]) == pytest.approx(m0, rel=1e-4)
    assert mom["m1"] == pytest.approx(m1, rel=1e-4)
    assert mom["m2"] == pytest.approx(m2, rel=1e-4)
    mean, s = new.moments()
    assert mean == pytest.approx(m1, rel=1e-4)


def test_quartic_fit_adequacy_along_filter(vg_panel):
    pred = Predictor(THETA.time_change("vg"), 0.3, -0.5, WEEK)
    for state in run_filter(vg_panel, THETA, "vg", FLAT).states[:-1]:
        mu, sd = state.mean, state.sd
        coef, _, _ = pred.fit(state)
        lo, hi = pred.fit_interval(state)
        x = np.linspace(lo, hi, 401)
        exact = pred.engine.moments(x)
        z = (x - mu) / sd
        fitted = np.array([np.polynomial.polynomial.polyval(z, c) for c in coef])
        g1, g1_fit = exact[1] / exact[0], fitted[1] / fitted[0]
        keep = exact[0] > 1e-3
        slope = np.max(np.abs(np.gradient(g1[keep], x[keep])))
        assert np.max(np.abs(g1[keep] - g1_fit[keep])) <= 1e-4 * (hi - lo) * slope


@pytest.mark.parametrize("degree", [0, 1, 2, 3, 4])
@pytest.mark.parametrize("mu,sigma", [(1.0, 0.3), (0.1, 0.5), (-0.5, 0.4)])
def test_polynomial_gaussian_integral(degree, mu, sigma):
    rng = np.random.default_rng(degree)
    coef = rng.standard_normal(degree + 1)
    p = np.polynomial.Polynomial(coef)
    for truncated in (True, False):
        log_mass, val = gaussian_poly_integral(coef, mu, sigma, truncated)
        lo = 0.0 if truncated else -np.inf
        ref = integrate.quad(lambda x: p(x) * stats.norm.pdf(x, mu, sigma), lo, np.inf,
                             epsabs=1e-14, epsrel=1e-13)[0]
        assert math.exp(log_mass) * val == pytest.approx(ref, abs=1e-10)


def test_single_date_loglik_is_fusion_constant(vg_panel):
    one = CdsPanel(vg_panel.dates[:1], vg_panel.tenors, vg_panel.bid[:1], vg_panel.mid[:1], vg_panel.ask[:1])
    tr = QuoteTransform(one, THETA, "vg", FLAT)
    meas = tr.measurement(0)
    mean, var, logc = fuse(meas.x_tilde, THETA.eta * meas.w_tilde)
    expected = logc - np.log(np.abs(meas.slope)).sum()
    res_k = run_filter(one, THETA, "vg", FLAT, FilterMode.KALMAN)
    assert res_k.loglik == pytest.approx(expected, rel=1e-13)
    res_t = run_filter(one, THETA, "vg", FLAT, FilterMode.TRUNCATED)
    assert res_t.loglik == pytest.approx(expected + stats.norm.logcdf(mean / math.sqrt(var)), rel=1e-13)


def test_brownian_filter_against_grid_filter():
    theta = ModelParams(1.0, -1.5, 0.6, 1.5)
    sim = simulate_panel("blackcox", theta, FLAT, 10, seed=4, x0=0.3)
    tr = QuoteTransform(sim.panel, theta, "blackcox", FLAT)
    meas = [tr.measurement(i) for i in range(10)]
    spec = theta.time_change("blackcox")
    ref = grid_filter_loglik(meas, theta.eta, spec, 0.3, -0.5, WEEK, x_hi=3.0)
    ours = run_filter(sim.panel, theta, "blackcox", FLAT, transform=tr).loglik
    assert ours == pytest.approx(ref, rel=1e-6)


def test_modes_agree_far_from_barrier(vg_panel):
    res_t = run_filter(vg_panel, THETA, "vg", FLAT, FilterMode.TRUNCATED)
    res_k = run_filter(vg_panel, THETA, "vg", FLAT, FilterMode.KALMAN)
    assert all(s.mean > 4 * s.sd for s in res_t.states)
    assert res_t.loglik == pytest.approx(res_k.loglik, rel=1e-3)
    assert np.allclose(res_t.increments.sum(), res_t.loglik, rtol=1e-12)


def test_wider_spreads_lower_every_estimate(vg_panel):
    worse = vg_panel.scaled(1.2)
    a = run_filter(vg_panel, THETA, "vg", FLAT).x_hat
    b = run_filter(worse, THETA, "vg", FLAT).x_hat
    assert np.all(b < a)


def test_naive_loglik_maximal_at_perfect_fit(vg_panel):
    tr = QuoteTransform(vg_panel, THETA, "vg", FLAT)
    from tcbm_credit.filtering import model_spreads

    x = np.nanmedian(tr.x_tilde, axis=1)
    fitted = model_spreads(tr.pricer, x, [FLAT] * vg_panel.n_dates)
    exact = CdsPanel(vg_panel.dates, vg_panel.tenors, fitted / 1e-4 - 1.0, fitted / 1e-4, fitted / 1e-4 + 1.0)
    assert rmse(exact, THETA, "vg", FLAT, x) == pytest.approx(0.0, abs=1e-9)
    best = naive_measurement_loglik(exact, THETA, "vg", FLAT, x)
    assert best > naive_measurement_loglik(exact, THETA, "vg", FLAT, x + 0.01)
    assert best > naive_measurement_loglik(exact, THETA, "vg", FLAT, x - 0.01)


def test_rmse_formula_by_hand():
    fitted = np.array([[100.0, 200.0], [110.0, 190.0]])
    quoted = np.array([[102.0, 197.0], [110.0, 194.0]])
    widths = np.array([[4.0, 6.0], [5.0, 8.0]])
    # errors in width units: 0.5, 0.5, 0, 0.5
    assert rmse_of(fitted, quoted, widths) == pytest.approx(math.sqrt(0.75 / 4), rel=1e-15)


def test_survival_factor_never_exceeds_one(vg_panel):
    res = run_filter(vg_panel, THETA, "vg", FLAT)
    pred = Predictor(THETA.time_change("vg"), 0.3, -0.5, WEEK)
    for s in res.states[:-1]:
        _, mom = predict_step(s, pred)
        assert mom["log_m0"] <= 0.0

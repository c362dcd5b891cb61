import json
import math

import mpmath as mp
import numpy as np
import pytest

from bandit_certify.bounds import (BoundSettings, LambdaGrid, catoni_bound, catoni_objective,
                                   cbb_bound, cbb_bound_multi, cbb_terms, evaluate_bound, g_fn,
                                   gaussian_kl, lambda_grid, ls_bound)
from bandit_certify.data import LoggedDataset, convert_supervised, make_synthetic
from bandit_certify.estimators import clipping_terms
from bandit_certify.policies import (GaussianPrior, LigParams, McSettings, SoftmaxParams, draw_eps,
                                     lig_propensities, train_logging_policy)

from conftest import prior_for, random_lig, uniform_logged

mp.mp.dps = 40


# -- g ---------------------------------------------------------------------------------


def test_g_examples():
    assert g_fn(0.0) == 0.5
    assert g_fn(1.0) == pytest.approx(float(mp.e - 2), rel=1e-14)
    g2 = g_fn(2.0)
    assert g2 == pytest.approx(float((mp.e**2 - 3) / 4), rel=1e-14)
    assert g2 <= 1.1


def test_g_negative_rejected():
    with pytest.raises(ValueError):
        g_fn(-0.1)


def test_g_increasing_convex_and_continuous():
    u = np.linspace(0, 4, 1000)
    g = g_fn(u)
    assert np.all(np.diff(g) > 0)
    assert np.all(np.diff(g, 2) >= -1e-12)
    for x in (1e-7, 1e-6, 2e-6, 1e-3):
        exact = (mp.exp(mp.mpf(x)) - 1 - x) / mp.mpf(x) ** 2
        assert g_fn(x) == pytest.approx(float(exact), rel=1e-9)


# -- KL ------------------------------------------------------------------------------------


def test_kl_examples():
    mu0 = np.zeros((1, 1))
    assert gaussian_kl(LigParams(mu0, 1.0), GaussianPrior(mu0, 1.0)) == 0.0
    assert gaussian_kl(LigParams(np.ones((1, 1)), 1.0), GaussianPrior(mu0, 1.0)) == 0.5
    oracle = 2 * (mp.mpf("0.125") + mp.log(2) - mp.mpf("0.5"))
    val = gaussian_kl(LigParams(np.zeros((1, 2)), 0.5), GaussianPrior(np.zeros((1, 2)), 1.0))
    assert val == pytest.approx(float(oracle), rel=1e-14)
    assert val == pytest.approx(0.636294, abs=1e-6)


def test_kl_nonnegative_and_zero_only_at_prior():
    rng = np.random.default_rng(0)
    for _ in range(200):
        prior = GaussianPrior(rng.standard_normal((3, 2)), float(rng.uniform(0.2, 3)))
        q = LigParams(prior.mu0 + rng.standard_normal((3, 2)) * rng.random(), float(rng.uniform(0.1, 3)))
        assert gaussian_kl(q, prior) > 0
    prior = GaussianPrior(np.ones((2, 2)), 0.7)
    assert gaussian_kl(LigParams(np.ones((2, 2)), 0.7), prior) == pytest.approx(0, abs=1e-15)


def test_kl_errors():
    with pytest.raises(ValueError):
        GaussianPrior(np.zeros((1, 1)), 0.0)
    with pytest.raises(ValueError):
        gaussian_kl(LigParams(np.zeros((2, 1)), 1.0), GaussianPrior(np.zeros((1, 1))))


# -- LS and Catoni ---------------------------------------------------------------------------


def _ls_oracle(r, kl, n, tau, delta):
    r, kl, n, tau, delta = map(mp.mpf, (r, kl, n, tau, delta))
    kappa = kl + mp.log(2 * mp.sqrt(n) / delta)
    return r + 2 * kappa / (tau * n) + mp.sqrt(2 * (r + 1 / tau) * kappa / (tau * n))


def test_ls_example():
    val = ls_bound(-0.5, 0.0, 100, 0.1, 0.05)
    assert val == pytest.approx(float(_ls_oracle(-0.5, 0, 100, 0.1, 0.05)), rel=1e-13)
    assert val == pytest.approx(4.07228, abs=1e-5)


def test_ls_zero_radicand():
    n, tau, delta = 500, 0.2, 0.05
    val = ls_bound(-1 / tau, 0.0, n, tau, delta)
    assert val == pytest.approx(-1 / tau + 2 * math.log(2 * math.sqrt(n) / delta) / (tau * n))


def test_ls_negative_radicand_rejected():
    with pytest.raises(ValueError):
        ls_bound(-11.0, 0.0, 100, 0.1, 0.05)


def test_catoni_dominates_ls_on_example():
    value, lam = catoni_bound(-0.5, 0.0, 100, 0.1, 0.05)
    assert value <= ls_bound(-0.5, 0.0, 100, 0.1, 0.05)
    assert 1e-6 <= lam <= 50


def _catoni_oracle(lam, r, kl, n, tau, delta):
    lam, r, kl, n, tau, delta = map(mp.mpf, (lam, r, kl, n, tau, delta))
    kappa = kl + mp.log(2 * mp.sqrt(n) / delta)
    return (1 - mp.exp(-tau * lam * r - kappa / n)) / (tau * (mp.exp(lam) - 1))


def test_catoni_objective_matches_oracle():
    for lam in (1e-4, 0.02, 1.0, 30.0):
        assert catoni_objective(lam, -3.0, 12.0, 1000, 0.2, 0.05) == pytest.approx(
            float(_catoni_oracle(lam, -3.0, 12.0, 1000, 0.2, 0.05)), rel=1e-12)


def test_catoni_minimality():
    rng = np.random.default_rng(0)
    for _ in range(100):
        tau = float(rng.uniform(0.01, 1))
        args = (float(-rng.uniform(0, 1 / tau)), float(rng.uniform(0, 100)),
                int(rng.integers(10, 10**5)), tau, 0.05)
        value, _ = catoni_bound(*args)
        assert value <= catoni_objective(1 / 50, *args) + 1e-12
        for lam in np.exp(rng.uniform(math.log(1e-6), math.log(50), 5)):
            assert value <= catoni_objective(lam, *args) * (1 + 1e-10) + 1e-12


def test_catoni_dominance_random_tuples():
    rng = np.random.default_rng(1)
    for _ in range(500):
        tau = float(rng.uniform(0.01, 1))
        n = int(np.exp(rng.uniform(math.log(10), math.log(1e6))))
        r, kl = float(-rng.uniform(0, 1 / tau)), float(rng.uniform(0, 1e3))
        delta = float(rng.uniform(0.001, 1))
        assert catoni_bound(r, kl, n, tau, delta)[0] <= ls_bound(r, kl, n, tau, delta) + 1e-9


@pytest.mark.parametrize("fn", [ls_bound, lambda *a: catoni_bound(*a)[0]])
def test_bounds_increase_with_kl_and_confidence(fn):
    base = fn(-2.0, 5.0, 1000, 0.2, 0.05)
    assert fn(-2.0, 6.0, 1000, 0.2, 0.05) > base
    assert fn(-2.0, 5.0, 1000, 0.2, 0.01) > base


# -- lambda grid ---------------------------------------------------------------------------------


def test_lambda_grid_examples():
    n = 10_000
    grid = lambda_grid(n, 0.1, 0.05, 0.0, 100)
    assert grid.values[-1] == pytest.approx(n / 5)
    a = math.sqrt(2 * n * 0.1 * math.log(20) / 5)
    assert grid.values[0] == pytest.approx(a) and len(grid) == 100
    assert np.allclose(np.diff(grid.values), np.diff(grid.values)[0])
    half = lambda_grid(n, 0.1, 0.05, -0.5, 100)
    assert half.values[0] == pytest.approx(math.sqrt(2 * n * 0.1 * math.log(20) / (5 * 0.25)))
    assert half.values[-1] == pytest.approx(2 * n / (0.5 / 0.1 + 0.5))
    full = lambda_grid(n, 0.1, 0.05, -1.0, 100)
    assert full.values[-1] == pytest.approx(2 * n)


def test_lambda_grid_fallback():
    grid = lambda_grid(1, 1.0, 1e-6, 0.0, 10)
    assert grid.values[-1] == pytest.approx(2.0) and grid.values[0] == pytest.approx(2e-3)
    assert np.all(np.diff(grid.values) > 0)


def test_lambda_grid_type_validates():
    with pytest.raises(ValueError):
        LambdaGrid(np.array([1.0, 1.0]))
    with pytest.raises(ValueError):
        LambdaGrid(np.array([0.0, 1.0]))


def test_settings_validation():
    for kw in (dict(tau=0.0), dict(delta=1.5), dict(xi=0.5), dict(n_lambda=1), dict(kind="x")):
        with pytest.raises(ValueError):
            BoundSettings(**kw)
    assert BoundSettings().resolve(8).tau == 0.125


# -- CBB ------------------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def cbb_instance():
    labeled = make_synthetic(70, 3, 4, label_rule_seed=7, seed=7)
    logger = train_logging_policy(labeled.subset(np.arange(20)), seed=7)
    data = convert_supervised(labeled.subset(np.arange(20, 70)), logger, 1.0, seed=7)
    policy = random_lig(np.random.default_rng(7), 3, 4, spread=0.5)
    return data, policy


def _cbb_oracle(report, n, n_lambda, tau, delta, xi):
    """Direct evaluation of the display from dumped components."""
    kl, V = mp.mpf(report.kl), mp.mpf(report.second_moment)
    l = max(xi**2, (1 + xi) ** 2)
    b = (1 + xi) / tau - xi
    best = None
    for lam_app in report.grid:
        lam = mp.mpf(lam_app) / n
        u = lam * b
        g = (mp.exp(u) - 1 - u) / u**2
        val = (kl + mp.log(2 * mp.mpf(n_lambda) / delta)) / (lam * n) + lam * l * g * V
        best = val if best is None else min(best, val)
    root = mp.sqrt((kl + mp.log(4 * mp.sqrt(n) / delta)) / (2 * n))
    return mp.mpf(report.empirical_term) - xi * mp.mpf(report.conditional_bias) + root + best


def test_cbb_matches_component_oracle(cbb_instance):
    data, policy = cbb_instance
    prior = prior_for(data)
    for xi in (0.0, -0.5, -1.0):
        settings = BoundSettings("cbb", xi=xi)
        report = cbb_bound(policy, data, prior, settings, McSettings(64, 1))
        oracle = _cbb_oracle(report, 50, 100, 1 / 3, 0.05, xi)
        assert report.bound_value == pytest.approx(float(oracle), abs=1e-9)


def test_cbb_components_recomputed_directly(cbb_instance):
    data, policy = cbb_instance
    tau, xi = 1 / 3, -0.5
    mc = McSettings(64, 1)
    report = cbb_bound(policy, data, prior_for(data), BoundSettings("cbb", xi=xi), mc)
    eps = draw_eps(mc)
    P0 = data.logger_propensities(contexts=True)
    r_cv = xi
    bias = second = 0.0
    for i in range(len(data)):
        p = lig_propensities(policy, data.features[i:i + 1], eps, actions=[data.actions[i]])[0]
        r_cv += p / max(data.propensities[i], tau) * (data.costs[i] - xi) / len(data)
        P = lig_propensities(policy, data.features[i:i + 1], eps)[0]
        for a in range(3):
            bias += P[a] * (1 - P0[i, a] / tau if P0[i, a] < tau else 0.0) / len(data)
            second += P[a] * P0[i, a] / max(P0[i, a], tau) ** 2 / len(data)
    assert report.empirical_term == pytest.approx(r_cv, abs=1e-12)
    assert report.conditional_bias == pytest.approx(bias, abs=1e-12)
    assert report.second_moment == pytest.approx(second, abs=1e-12)
    assert report.kl == pytest.approx(gaussian_kl(policy, prior_for(data)), abs=1e-12)


def test_cbb_xi_zero_has_no_bias_term(cbb_instance):
    data, policy = cbb_instance
    report = cbb_bound(policy, data, prior_for(data), BoundSettings("cbb", xi=0.0), McSettings(32))
    assert report.bias_term == 0.0


def test_cbb_uniform_logger_worst_regime():
    data = uniform_logged(80, 4, 3)
    report = cbb_bound(random_lig(np.random.default_rng(2), 4, 3), data, prior_for(data),
                       BoundSettings("cbb", tau=0.25), McSettings(32))
    assert report.second_moment == pytest.approx(4.0, abs=1e-12)


def test_cbb_grid_minimality(cbb_instance):
    data, policy = cbb_instance
    report = cbb_bound(policy, data, prior_for(data), BoundSettings("cbb", xi=-0.5), McSettings(32))
    grid = LambdaGrid(np.array(report.grid))
    *_, bracket, brackets = cbb_terms(report.empirical_term, report.conditional_bias,
                                      report.second_moment, report.kl, 50, 1 / 3, 0.05, -0.5, grid)
    assert bracket <= brackets[0] and bracket <= brackets[-1]
    assert bracket == pytest.approx(report.variance_term)


def test_report_invariant_and_json(cbb_instance):
    data, policy = cbb_instance
    for xi in (0.0, -0.5, -1.0):
        report = cbb_bound(policy, data, prior_for(data), BoundSettings("cbb", xi=xi),
                           McSettings(32))
        assert report.bound_value >= report.empirical_term - abs(xi)
        doc = json.loads(json.dumps(report.to_dict()))
        assert doc["bound_value"] == report.bound_value and len(doc["grid"]) == 100


def _grouped_view(data):
    return LoggedDataset(features=data.features, actions=data.actions, costs=data.costs,
                         propensities=data.propensities, num_actions=data.num_actions,
                         groups=np.arange(len(data)), logger=data.logger)


def test_multi_equals_iid_at_m1(cbb_instance):
    data, policy = cbb_instance
    prior = prior_for(data)
    for xi in (0.0, -0.5):
        settings = BoundSettings("cbb", xi=xi)
        a = cbb_bound(policy, data, prior, settings, McSettings(32, 2))
        b = cbb_bound_multi(policy, _grouped_view(data), prior, settings, McSettings(32, 2))
        assert b.bound_value == pytest.approx(a.bound_value, abs=1e-9)
        assert b.chosen_lambda == pytest.approx(a.chosen_lambda, rel=1e-12)


def test_multi_rejects_ungrouped(cbb_instance):
    data, policy = cbb_instance
    with pytest.raises(ValueError):
        cbb_bound_multi(policy, data, prior_for(data), BoundSettings("cbb"), McSettings(8))


def test_multi_single_context_finite():
    labeled = make_synthetic(1, 3, 2, 0, 0)
    data = convert_supervised(labeled, SoftmaxParams(np.zeros((3, 2))), 1.0, m=3, seed=0)
    report = cbb_bound_multi(LigParams(np.zeros((3, 2)), 1.0), data, prior_for(data),
                             BoundSettings("cbb"), McSettings(8))
    assert math.isfinite(report.bound_value)


def test_multi_more_interactions_do_not_hurt():
    labeled = make_synthetic(2000, 4, 5, label_rule_seed=1, seed=2)
    logger = train_logging_policy(labeled.subset(np.arange(100)), seed=3)
    rest = labeled.subset(np.arange(100, 2000))
    prior = GaussianPrior.from_logger(logger.scaled(0.5))
    policy = LigParams(prior.mu0, 0.8)
    one = convert_supervised(rest, logger, 0.5, m=1, seed=4)
    two = convert_supervised(rest, logger, 0.5, m=2, seed=4)
    settings = BoundSettings("cbb", xi=-0.5)
    a = cbb_bound(policy, one, prior, settings, McSettings(64)).bound_value
    b = cbb_bound_multi(policy, two, prior, settings, McSettings(64)).bound_value
    assert b <= a + 1e-3


def test_iid_bounds_reject_grouped_data(cbb_instance):
    data, policy = cbb_instance
    labeled = make_synthetic(5, 3, 4, 0, 0)
    grouped = convert_supervised(labeled, data.logger, 1.0, m=2, seed=0)
    for kind in ("ls", "catoni"):
        with pytest.raises(ValueError):
            evaluate_bound(policy, grouped, prior_for(data), BoundSettings(kind), McSettings(8))


def test_evaluate_cips_bounds_compose(cbb_instance):
    data, policy = cbb_instance
    prior = prior_for(data)
    mc = McSettings(32, 5)
    p = lig_propensities(policy, data.features, draw_eps(mc), actions=data.actions)
    r = float(np.mean(p / np.maximum(data.propensities, 1 / 3) * data.costs))
    kl = gaussian_kl(policy, prior)
    ls = evaluate_bound(policy, data, prior, BoundSettings("ls"), mc)
    cat = evaluate_bound(policy, data, prior, BoundSettings("catoni"), mc)
    assert ls.bound_value == pytest.approx(ls_bound(r, kl, 50, 1 / 3, 0.05), abs=1e-12)
    assert cat.bound_value == pytest.approx(catoni_bound(r, kl, 50, 1 / 3, 0.05)[0], abs=1e-12)
    assert cat.bound_value <= ls.bound_value


def test_clipping_terms_formula():
    b, v = clipping_terms(np.array([[0.1, 0.5, 0.4]]), 0.25)
    assert b[0] == pytest.approx([0.6, 0.0, 0.0])
    assert v[0] == pytest.approx([0.1 / 0.0625, 2.0, 2.5])

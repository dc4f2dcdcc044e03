"""Nuisance fitting against independent numerical oracles."""

import math

import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.special import expit

from fedcausal.core import (
    DomainViolation,
    EmptyTreatmentArm,
    MultiSiteData,
    RISK_DIFFERENCE,
    RISK_RATIO,
    SiteDataset,
)
from fedcausal.nuisance import (
    DEFAULT_CONFIG,
    DensityRatioModel,
    GlmModel,
    MisspecSpec,
    NonConvergence,
    NuisanceConfig,
    RankDeficient,
    SingleClassLabels,
    TauModel,
    UnknownTarget,
    VarianceModel,
    apply_features,
    apply_misspec,
    design_matrix,
    fit_bundle,
    fit_cond_variance,
    fit_density_ratio,
    fit_linear,
    fit_linear_blocks,
    fit_logistic,
    fit_outcome_models,
    fit_propensity,
    fit_tau,
)

RNG = np.random.default_rng


# -- logistic regression ---------------------------------------------------------

LOGISTIC_X = np.array(
    [0.5, -1.2, 0.3, 2.0, -0.7, 1.5, -2.1, 0.9, -0.4, 1.1]
).reshape(-1, 1)
LOGISTIC_Y = np.array([1, 0, 1, 1, 0, 1, 0, 0, 1, 0], dtype=float)


def _oracle_logistic(design, y):
    """Independent MLE via scipy's Newton-CG on the exact likelihood."""

    def negll(beta):
        eta = design @ beta
        return float(np.sum(np.logaddexp(0.0, eta) - y * eta))

    def grad(beta):
        return design.T @ (expit(design @ beta) - y)

    def hess(beta):
        p = expit(design @ beta)
        return design.T @ ((p * (1 - p))[:, None] * design)

    res = minimize(
        negll, np.zeros(design.shape[1]), jac=grad, hess=hess,
        method="Newton-CG", options={"xtol": 1e-14, "maxiter": 500},
    )
    return res.x


def test_logistic_matches_newton_oracle():
    model = fit_logistic(LOGISTIC_X, LOGISTIC_Y)
    oracle = _oracle_logistic(design_matrix(LOGISTIC_X, "identity"), LOGISTIC_Y)
    assert np.allclose(model.coef, oracle, atol=1e-8)
    assert not model.converged_via_ridge


def test_logistic_quadratic_matches_oracle():
    rng = RNG(7)
    x = rng.normal(size=(200, 1))
    y = (rng.random(200) < expit(0.5 - 0.8 * x[:, 0] + 0.3 * x[:, 0] ** 2)).astype(float)
    model = fit_logistic(x, y, feature_map="quadratic")
    oracle = _oracle_logistic(design_matrix(x, "quadratic"), y)
    assert np.allclose(model.coef, oracle, atol=1e-7)


def test_logistic_intercept_only_closed_form():
    x = np.empty((8, 0))
    y = np.array([1, 0, 0, 0, 1, 0, 0, 0], dtype=float)
    model = fit_logistic(x, y)
    assert model.coef.shape == (1,)
    assert math.isclose(model.coef[0], math.log(0.25 / 0.75), rel_tol=0, abs_tol=1e-10)


def test_logistic_separation_falls_back_to_ridge():
    x = np.array([-2.0, -1.0, 1.0, 2.0]).reshape(-1, 1)
    y = np.array([0, 0, 1, 1], dtype=float)
    model = fit_logistic(x, y)
    assert model.converged_via_ridge
    assert np.all(np.isfinite(model.coef))


def test_logistic_constant_labels_rejected():
    with pytest.raises(SingleClassLabels):
        fit_logistic(np.ones((5, 1)), np.ones(5))


def test_logistic_duplication_invariance():
    model = fit_logistic(LOGISTIC_X, LOGISTIC_Y)
    doubled = fit_logistic(
        np.vstack([LOGISTIC_X, LOGISTIC_X]), np.concatenate([LOGISTIC_Y, LOGISTIC_Y])
    )
    assert np.allclose(model.coef, doubled.coef, rtol=1e-10, atol=1e-12)


# -- linear regression -----------------------------------------------------------


def test_linear_matches_normal_equation_oracle():
    rng = RNG(11)
    x = rng.normal(size=(20, 3))
    y = rng.normal(size=20)
    model = fit_linear(x, y)
    design = design_matrix(x, "identity")
    oracle = np.linalg.inv(design.T @ design) @ (design.T @ y)
    assert np.allclose(model.coef, oracle, atol=1e-10)


def test_linear_residual_orthogonality():
    rng = RNG(13)
    x = rng.normal(size=(50, 2))
    y = 1.0 + x @ np.array([2.0, -1.0]) + rng.normal(size=50)
    model = fit_linear(x, y)
    design = design_matrix(x, "identity")
    assert np.allclose(design.T @ (y - model.predict(x)), 0.0, atol=1e-9)


def test_linear_rank_deficient_raises():
    x = np.column_stack([np.arange(10.0), 2.0 * np.arange(10.0)])
    with pytest.raises(RankDeficient):
        fit_linear(x, np.arange(10.0))


def test_linear_blocks_match_pooled_fit():
    rng = RNG(17)
    x1, x2 = rng.normal(size=(30, 2)), rng.normal(size=(40, 2))
    y1, y2 = rng.normal(size=30), rng.normal(size=40)
    blockwise = fit_linear_blocks([(x1, y1, None), (x2, y2, None)], "identity")
    pooled = fit_linear(np.vstack([x1, x2]), np.concatenate([y1, y2]))
    assert np.allclose(blockwise.coef, pooled.coef, atol=1e-9)


def test_linear_blocks_weighted_oracle():
    rng = RNG(19)
    x = rng.normal(size=(60, 1))
    y = rng.normal(size=60)
    w = rng.uniform(0.5, 2.0, size=60)
    model = fit_linear_blocks([(x, y, w)], "identity")
    design = design_matrix(x, "identity")
    oracle = np.linalg.solve(design.T @ (w[:, None] * design), design.T @ (w * y))
    assert np.allclose(model.coef, oracle, atol=1e-10)


# -- feature maps ----------------------------------------------------------------


def test_feature_maps():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(apply_features(x, "identity"), x)
    quad = apply_features(x, "quadratic")
    assert np.array_equal(quad, np.array([[1, 2, 1, 4], [3, 4, 9, 16]], dtype=float))
    assert np.array_equal(apply_features(x, "drop_last"), x[:, :1])
    assert np.allclose(apply_features(x, "exponentiate"), np.exp(x))
    # drop_last on one covariate leaves the intercept-only design
    assert design_matrix(np.ones((3, 1)), "drop_last").shape == (3, 1)


# -- density ratio ---------------------------------------------------------------


def _two_site_density_data(n, seed):
    """Sites 0 and 2 of the reference generative model, prior odds 0.1:0.5."""
    rng = RNG(seed)
    s = rng.choice([0, 2], size=n, p=[1.0 / 6.0, 5.0 / 6.0])
    x = np.where(s == 0, rng.normal(2.0, 1.0, size=n), rng.normal(2.0, 2.0, size=n))
    sites = {}
    for k in (0, 2):
        mask = s == k
        xk = x[mask].reshape(-1, 1)
        a = rng.integers(0, 2, size=mask.sum())
        a[:2] = (0, 1)  # guarantee both arms
        sites[k] = SiteDataset(k, np.zeros(mask.sum()), a, xk)
    return MultiSiteData(sites)


def _true_q_site2(x):
    from scipy.stats import norm

    return (0.1 * norm.pdf(x, 2.0, 1.0)) / (0.5 * norm.pdf(x, 2.0, 2.0))


def test_density_ratio_matches_analytic_gaussian_oracle():
    data = _two_site_density_data(20000, seed=101)
    model = fit_density_ratio(data, 2)
    grid = np.linspace(-1.0, 5.0, 121).reshape(-1, 1)
    fitted = model.q(grid)
    truth = _true_q_site2(grid[:, 0])
    rel = np.abs(fitted - truth) / truth
    assert np.median(rel) < 0.10
    # exact quadratic logit: log(0.4) - 1.5 + 1.5 x - 0.375 x^2
    expected = np.array([math.log(0.4) - 1.5, 1.5, -0.375])
    assert np.allclose(model.model.coef, expected, atol=0.2)
    assert math.isclose(
        model.prior_correction,
        math.log(data.sites[0].n / data.sites[2].n),
    )


def test_density_ratio_predictions_clipped_positive():
    data = _two_site_density_data(500, seed=5)
    model = fit_density_ratio(data, 2)
    wild = np.linspace(-50.0, 50.0, 200).reshape(-1, 1)
    q = model.q(wild)
    assert np.all(q >= 1e-3) and np.all(q <= 1e3)
    assert np.all(np.isfinite(q))


# -- propensity ------------------------------------------------------------------


def _single_site(seed, n=400, slope=0.5, intercept=-1.0):
    rng = RNG(seed)
    x = rng.normal(2.0, 1.0, size=(n, 1))
    a = (rng.random(n) < expit(intercept + slope * x[:, 0])).astype(int)
    a[:2] = (0, 1)
    y = x[:, 0] + rng.normal(size=n)
    return MultiSiteData({0: SiteDataset(0, y, a, x)})


def test_propensity_clips_predictions():
    data = _single_site(23, slope=6.0, intercept=-2.0)
    model = fit_propensity(data, 0)
    probe = np.array([[-100.0], [100.0]])
    p = model.predict(probe)
    assert p[0] == 0.01 and p[1] == 0.99


def test_propensity_requires_both_arms():
    x = np.ones((10, 1))
    data = MultiSiteData({0: SiteDataset(0, np.zeros(10), np.ones(10, dtype=int), x)})
    with pytest.raises(EmptyTreatmentArm):
        fit_propensity(data, 0)


# -- outcome models and variance --------------------------------------------------


def test_outcome_models_fit_each_arm():
    rng = RNG(29)
    n = 500
    x = rng.normal(size=(n, 1))
    a = rng.integers(0, 2, size=n)
    y = np.where(a == 1, 2.0 + 3.0 * x[:, 0], 1.0 + x[:, 0]) + 0.01 * rng.normal(size=n)
    data = MultiSiteData({0: SiteDataset(0, y, a, x)})
    mu0, mu1 = fit_outcome_models(data, 0)
    assert np.allclose(mu0.coef, [1.0, 1.0], atol=0.01)
    # treated fit uses the quadratic map; the square term should vanish
    assert np.allclose(mu1.coef, [2.0, 3.0, 0.0], atol=0.01)


def test_cond_variance_constant_and_floor():
    rng = RNG(31)
    n = 4000
    x = rng.normal(size=(n, 1))
    a = np.tile([0, 1], n // 2)
    y = 2.0 * x[:, 0]  # no noise: variance collapses to the floor
    data = MultiSiteData({0: SiteDataset(0, y, a, x)})
    mu0, _ = fit_outcome_models(data, 0)
    var = fit_cond_variance(data, 0, 0, mu0)
    assert np.allclose(var.variance(x), 1e-4)

    y2 = 2.0 * x[:, 0] + rng.normal(0.0, 2.0, size=n)
    data2 = MultiSiteData({0: SiteDataset(0, y2, a, x)})
    mu0b, _ = fit_outcome_models(data2, 0)
    var2 = fit_cond_variance(data2, 0, 0, mu0b)
    assert abs(var2.value - 4.0) < 0.5


# -- effect function ---------------------------------------------------------------


def _exact_multiplicative_site(k, seed, n=300, tau_coef=(0.7, 0.4)):
    """Noise-free site where mu1 = mu0 * tau exactly, mu0 = 1.5 + 0.5 x > 0."""
    rng = RNG(seed)
    x = rng.uniform(0.0, 4.0, size=(n, 1))
    a = np.tile([0, 1], n // 2)
    mu0 = 1.5 + 0.5 * x[:, 0]
    tau = tau_coef[0] + tau_coef[1] * x[:, 0]
    y = np.where(a == 1, mu0 * tau, mu0)
    return SiteDataset(k, y, a, x)


@pytest.mark.parametrize("weighting", ["mu0_squared", "plain"])
def test_tau_roundtrip_recovery_rr(weighting):
    data = MultiSiteData(
        {0: _exact_multiplicative_site(0, 41), 1: _exact_multiplicative_site(1, 43)}
    )
    config = NuisanceConfig(tau_weighting=weighting)
    model = fit_tau(data, (0, 1), RISK_RATIO, config)
    assert np.allclose(model.coef, [0.7, 0.4], atol=1e-8)
    assert model.weighting == ("mu0_squared" if weighting == "mu0_squared" else "plain")


def test_tau_roundtrip_recovery_rd():
    rng = RNG(47)
    n = 400
    x = rng.uniform(-2.0, 2.0, size=(n, 1))
    a = np.tile([0, 1], n // 2)
    mu0 = 1.0 + 2.0 * x[:, 0]
    tau = -0.3 + 0.9 * x[:, 0]
    y = np.where(a == 1, mu0 + tau, mu0)
    data = MultiSiteData({0: SiteDataset(0, y, a, x)})
    model = fit_tau(data, (0,), RISK_DIFFERENCE, DEFAULT_CONFIG)
    assert np.allclose(model.coef, [-0.3, 0.9], atol=1e-8)


def test_tau_plain_weighting_rejects_mu0_near_zero():
    # exact linear control outcome through the origin: the fitted mu0 at the
    # x = 0 row lands inside the 1e-10 singularity floor
    x = np.linspace(-2.0, 2.0, 201).reshape(-1, 1)
    a = np.zeros(201, dtype=int)
    a[::2] = 1
    y = x[:, 0].copy()
    data = MultiSiteData({0: SiteDataset(0, y, a, x)})
    config = NuisanceConfig(tau_weighting="plain")
    with pytest.raises(DomainViolation):
        fit_tau(data, (0,), RISK_RATIO, config)
    # the default weighting never divides, so the same data fit cleanly
    fit_tau(data, (0,), RISK_RATIO, DEFAULT_CONFIG)


# -- misspecification and bundle ---------------------------------------------------


def _three_site_data(seed, n=900):
    rng = RNG(seed)
    sites = {}
    for k, (loc, scale, b_mu) in enumerate([(2.0, 1.0, 0.0), (1.0, 2.0, 1.0), (2.0, 2.0, -1.0)]):
        m = n // 3
        x = rng.normal(loc, scale, size=(m, 1))
        a = (rng.random(m) < expit(0.5 * x[:, 0] - 1.0)).astype(int)
        a[:2] = (0, 1)
        mu0 = x[:, 0] + b_mu
        tau = x[:, 0]
        y = np.where(a == 1, mu0 * tau, mu0) + rng.normal(size=m)
        sites[k] = SiteDataset(k, y, a, x)
    return MultiSiteData(sites)


def test_fit_bundle_structure():
    data = _three_site_data(61)
    bundle = fit_bundle(data, measure=RISK_RATIO, need_pooled=True)
    assert bundle.sites == (0, 1, 2)
    assert set(bundle.propensity) == {0, 1, 2}
    assert set(bundle.density_ratio) == {1, 2}
    assert bundle.tau_model is not None
    assert bundle.mu1_pooled is not None and bundle.mu0_pooled is not None
    x = data.sites[0].x
    assert np.allclose(bundle.q(0, x), 1.0)
    probs = bundle.site_prob(x, (0, 1, 2))
    assert np.allclose(probs[0] + probs[1] + probs[2], 1.0)
    assert all(np.all(v > 0) for v in probs.values())


def test_fit_bundle_subset_of_sites():
    data = _three_site_data(67)
    bundle = fit_bundle(data, sites=(0, 2))
    assert bundle.sites == (0, 2)
    assert set(bundle.density_ratio) == {2}


def test_apply_misspec_refits_only_targets():
    data = _three_site_data(71)
    bundle = fit_bundle(data)
    spec = MisspecSpec(targets={"pi:0", "q:1"})
    distorted = apply_misspec(data, bundle, spec)
    assert distorted.propensity[0].feature_map == "exponentiate"
    assert distorted.density_ratio[1].model.feature_map == "exponentiate"
    # untouched models are the same objects
    assert distorted.propensity[1] is bundle.propensity[1]
    assert distorted.mu0[0] is bundle.mu0[0]
    assert distorted.tau_model is bundle.tau_model


def test_misspec_fit_bundle_agrees_with_apply_misspec():
    data = _three_site_data(73)
    spec = MisspecSpec(targets={"mu0:0", "tau"})
    direct = fit_bundle(data, misspec=spec)
    indirect = apply_misspec(data, fit_bundle(data), spec)
    assert np.allclose(direct.mu0[0].coef, indirect.mu0[0].coef)
    assert np.allclose(direct.tau_model.coef, indirect.tau_model.coef)
    assert direct.mu0[0].feature_map == "exponentiate"


def test_unknown_misspec_targets_rejected():
    with pytest.raises(UnknownTarget):
        MisspecSpec(targets={"bogus:1"})
    data = _three_site_data(79)
    bundle = fit_bundle(data)
    with pytest.raises(UnknownTarget):
        apply_misspec(data, bundle, MisspecSpec(targets={"q:0"}))
    with pytest.raises(UnknownTarget):
        apply_misspec(data, bundle, MisspecSpec(targets={"pi:9"}))


# -- serialization -----------------------------------------------------------------


def test_model_serialization_roundtrips():
    glm = GlmModel("logistic", np.array([0.1, -2.3]), "quadratic", clip=(0.01, 0.99))
    assert GlmModel.from_dict(glm.to_dict()).to_dict() == glm.to_dict()

    dr = DensityRatioModel(2, GlmModel("logistic", np.array([0.3])), 0.25)
    back = DensityRatioModel.from_dict(dr.to_dict())
    assert back.k == 2 and back.prior_correction == 0.25
    assert np.array_equal(back.model.coef, dr.model.coef)

    tau = TauModel(np.array([1.0, 2.0]), "identity", "rr", "mu0_squared")
    back_tau = TauModel.from_dict(tau.to_dict())
    assert np.array_equal(back_tau.coef, tau.coef)

    var = VarianceModel("constant", value=2.5)
    assert VarianceModel.from_dict(var.to_dict()).value == 2.5

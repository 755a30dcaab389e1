import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from trajmix.data import Cohort
from trajmix.errors import SchemaError
from trajmix.gbtm import MixtureParams, ModelSpec
from trajmix.gbtm.em import InitStrategy, fit
from trajmix.gbtm.model import (
    AgeTransform,
    FittedModel,
    bic,
    canonical_order,
    covariance_or_none,
    loglik,
    param_vector,
    params_from_vector,
    posterior,
    predict_mean,
    raw_coefficients,
    relabel,
    score_and_hessian,
    trajectory_band,
    trajectory_se,
    transformed_coefficients,
)

from conftest import GRID, random_cohort, random_params, two_curve_cohort


def _brute_force(spec, params, cohort):
    """Per-subject density sums evaluated with scalar math only."""
    tr = spec.transform
    lls, posts = [], []
    for row in cohort.values:
        terms = []
        for k in range(spec.n_groups):
            s = float(params.sigma[0] if params.sigma.size == 1 else params.sigma[k])
            dens = params.pi[k]
            for age, y in zip(cohort.grid, row):
                if math.isnan(y):
                    continue
                a = (age - tr.center) / tr.scale
                mu = sum(float(b) * a**j for j, b in enumerate(params.betas[k]))
                dens *= math.exp(-0.5 * ((y - mu) / s) ** 2) / (s * math.sqrt(2 * math.pi))
            terms.append(dens)
        tot = sum(terms)
        lls.append(math.log(tot))
        posts.append([t / tot for t in terms])
    return sum(lls), np.array(posts)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("sigma_mode", ["shared", "per-group"])
def test_loglik_and_posterior_match_brute_force(seed, sigma_mode):
    rng = np.random.default_rng(seed)
    spec = ModelSpec(2, tuple(rng.integers(0, 3, 2)), sigma_mode=sigma_mode,
                     transform=AgeTransform.from_grid(GRID))
    params = random_params(rng, spec)
    cohort = random_cohort(rng, 5, miss=0.3)
    ll_ref, post_ref = _brute_force(spec, params, cohort)
    assert abs(loglik(spec, params, cohort) - ll_ref) <= 1e-10
    np.testing.assert_allclose(posterior(spec, params, cohort).probs, post_ref, atol=1e-10, rtol=0)


def test_single_gaussian_closed_form(rng):
    cohort = random_cohort(rng, 40, miss=0.0)
    y = cohort.values.ravel()
    mean, sd = y.mean(), y.std()
    spec = ModelSpec.uniform(1, 0, GRID)
    ll = loglik(spec, MixtureParams((np.array([mean]),), [1.0], [sd]), cohort)
    expected = -0.5 * y.size * (math.log(2 * math.pi * sd**2) + 1.0)
    assert ll == pytest.approx(expected, rel=1e-12)


def test_degenerate_mixture_equals_single_group(rng, spec2):
    cohort = random_cohort(rng, 30)
    p = random_params(rng, spec2)
    two = MixtureParams(p.betas, [1.0, 0.0], p.sigma)
    one = MixtureParams(p.betas[:1], [1.0], p.sigma)
    spec1 = ModelSpec(1, spec2.degrees[:1], transform=spec2.transform)
    assert loglik(spec2, two, cohort) == pytest.approx(loglik(spec1, one, cohort), rel=1e-13)


def test_loglik_errors(rng, spec2):
    p = random_params(rng, spec2)
    cohort = random_cohort(rng, 5)
    with pytest.raises(ValueError):
        loglik(spec2, MixtureParams(p.betas, p.pi, [0.0]), cohort)
    empty = Cohort(("a",), GRID, np.full((1, 3), np.nan))
    with pytest.raises(ValueError):
        loglik(spec2, p, empty)


def test_bic_arithmetic():
    assert bic(0.0, 1, math.e**2) == pytest.approx(-1.0)
    assert bic(-10.0, 5, 100) < bic(-10.0, 4, 100)
    with pytest.raises(ValueError):
        bic(0.0, 1, 0)


def test_closed_form_single_group_fit_and_bic(rng):
    cohort = random_cohort(rng, 60, miss=0.25)
    y = cohort.values[cohort.mask]
    model = fit(ModelSpec.uniform(1, 0, GRID), cohort)
    assert model.params.betas[0][0] == pytest.approx(y.mean(), rel=1e-12)
    assert model.params.sigma[0] == pytest.approx(y.std(), rel=1e-10)
    ll = -0.5 * y.size * (math.log(2 * math.pi * y.var()) + 1.0)
    assert model.bic == pytest.approx(ll - 0.5 * 2 * math.log(60), rel=1e-10)


def test_n_params_formula():
    assert ModelSpec(3, (2, 1, 0)).n_params == 6 + 2 + 1
    assert ModelSpec(3, (2, 1, 0), sigma_mode="per-group").n_params == 6 + 2 + 3


@pytest.mark.parametrize("bad", [dict(n_groups=0, degrees=()), dict(n_groups=2, degrees=(1,)),
                                 dict(n_groups=1, degrees=(3,)), dict(n_groups=1, degrees=(1,), sigma_mode="x")])
def test_spec_validation(bad):
    with pytest.raises(ValueError):
        ModelSpec(**bad)


def test_quadratic_not_identifiable_on_two_ages():
    with pytest.raises(ValueError):
        ModelSpec.uniform(1, 2, (2, 3)).check_grid((2, 3))


def test_posterior_symmetry_and_single_group(rng):
    spec = ModelSpec.uniform(2, 0, GRID)
    p = MixtureParams((np.array([10.0]), np.array([12.0])), [0.5, 0.5], [1.0])
    cohort = Cohort(("mid",), GRID, [[11.0, 11.0, np.nan]])
    np.testing.assert_allclose(posterior(spec, p, cohort).probs, [[0.5, 0.5]], atol=1e-15)
    one = ModelSpec.uniform(1, 1, GRID)
    post = posterior(one, MixtureParams((np.array([11.0, 0.1]),), [1.0], [0.7]), random_cohort(rng, 20))
    assert np.all(post.probs == 1.0)


@given(st.integers(0, 2**32 - 1))
def test_posterior_rows_are_probabilities(seed):
    rng = np.random.default_rng(seed)
    K = int(rng.integers(1, 6))
    spec = ModelSpec(K, tuple(rng.integers(0, 3, K)), transform=AgeTransform.from_grid(GRID))
    p = random_params(rng, spec)
    probs = posterior(spec, p, random_cohort(rng, 25, scale=3.0)).probs
    assert np.all((probs >= 0) & (probs <= 1))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)


def _fd_gradient(spec, theta, cohort, h=1e-5):
    g = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (loglik(spec, params_from_vector(spec, theta + e), cohort)
                - loglik(spec, params_from_vector(spec, theta - e), cohort)) / (2 * h)
    return g


def mixture_gradient_error(seed):
    """Largest relative gap between analytic and central-difference scores at a random point."""
    rng = np.random.default_rng(seed)
    K = int(rng.integers(1, 4))
    mode = "shared" if rng.random() < 0.5 else "per-group"
    spec = ModelSpec(K, tuple(rng.integers(0, 3, K)), sigma_mode=mode, transform=AgeTransform.from_grid(GRID))
    params = random_params(rng, spec)
    cohort = random_cohort(rng, 30, miss=0.2)
    theta = param_vector(spec, params)
    g, _ = score_and_hessian(spec, params, cohort)
    fd = _fd_gradient(spec, theta, cohort)
    return float(np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1.0)))


@pytest.mark.parametrize("seed", range(20))
def test_score_matches_finite_differences(seed):
    assert mixture_gradient_error(seed) < 1e-4


def test_hessian_matches_differenced_score(rng, spec2):
    params = random_params(rng, spec2)
    cohort = random_cohort(rng, 40)
    theta = param_vector(spec2, params)
    _, H = score_and_hessian(spec2, params, cohort)
    h = 1e-6
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        gp, _ = score_and_hessian(spec2, params_from_vector(spec2, theta + e), cohort)
        gm, _ = score_and_hessian(spec2, params_from_vector(spec2, theta - e), cohort)
        np.testing.assert_allclose(H[:, i], (gp - gm) / (2 * h), rtol=1e-4, atol=1e-3)


def test_param_vector_roundtrip(rng, spec2):
    p = random_params(rng, spec2)
    q = params_from_vector(spec2, param_vector(spec2, p))
    np.testing.assert_allclose(q.pi, p.pi, rtol=1e-13)
    for a, b in zip(p.betas, q.betas):
        np.testing.assert_array_equal(a, b)


@given(st.integers(0, 2**32 - 1), st.permutations(range(4)))
def test_group_permutation_leaves_loglik_unchanged(seed, order):
    rng = np.random.default_rng(seed)
    spec = ModelSpec(4, tuple(rng.integers(0, 3, 4)), sigma_mode="per-group",
                     transform=AgeTransform.from_grid(GRID))
    p = random_params(rng, spec)
    cohort = random_cohort(rng, 15)
    spec_p = spec.with_degrees([spec.degrees[k] for k in order])
    assert loglik(spec_p, p.permuted(order), cohort) == pytest.approx(loglik(spec, p, cohort), rel=1e-12)
    # canonical order is a function of the group set, not of its labelling
    c1 = canonical_order(spec, p, GRID)
    c2 = canonical_order(spec_p, p.permuted(order), GRID)
    assert [order[k] for k in c2] == c1


def test_raw_coefficient_roundtrip(rng):
    tr = AgeTransform.from_grid(GRID)
    assert (tr.center, tr.scale) == (3.75, 1.75)
    beta = rng.normal(size=3)
    raw = raw_coefficients(beta, tr)
    ages = np.array(GRID)
    np.testing.assert_allclose(np.polynomial.polynomial.polyval(ages, raw),
                               np.polynomial.polynomial.polyval(tr.apply(ages), beta), rtol=1e-12)
    np.testing.assert_allclose(transformed_coefficients(raw, tr), beta, rtol=1e-10, atol=1e-12)


def _toy_model(rng, n=300, **kw):
    cohort, _ = two_curve_cohort(rng, n=n, sigma=0.5)
    spec = ModelSpec.uniform(2, 1, GRID)
    return fit(spec, cohort, InitStrategy(starts=4, seed=1), **kw), cohort


def test_degree_zero_prediction_is_flat():
    spec = ModelSpec.uniform(1, 0, GRID)
    model = FittedModel(spec, MixtureParams((np.array([11.5]),), [1.0], [0.5]), GRID, 0.0, 10, True, 1)
    np.testing.assert_array_equal(predict_mean(model, 0, [2.0, 3.0, 4.2, 5.5]), 11.5)


def test_band_brackets_mean_and_needs_covariance(rng):
    model, _ = _toy_model(rng)
    ages = np.linspace(2, 5.5, 8)
    lo, hi = trajectory_band(model, 0, ages)
    mean = predict_mean(model, 0, ages)
    assert np.all(lo < mean) and np.all(mean < hi)
    np.testing.assert_allclose((hi - lo) / 2, 1.959963984540054 * trajectory_se(model, 0, ages), rtol=1e-12)
    lo, hi = trajectory_band(relabel(model, [1, 0]), 0, ages)
    assert np.all(np.isnan(lo)) and np.all(np.isnan(hi))


def test_singular_information_gives_no_covariance():
    assert covariance_or_none(np.array([[1.0, 1.0], [1.0, 1.0]])) is None
    assert covariance_or_none(np.array([[np.nan, 0.0], [0.0, 1.0]])) is None
    np.testing.assert_allclose(covariance_or_none(np.diag([4.0, 0.25])), np.diag([0.25, 4.0]))


def test_model_json_roundtrip(rng):
    model, cohort = _toy_model(rng)
    d = json.loads(json.dumps(model.to_dict()))
    back = FittedModel.from_dict(d)
    assert back.to_dict() == model.to_dict()
    assert back.loglik_on(cohort) == pytest.approx(model.loglik, rel=1e-12)
    with pytest.raises(SchemaError):
        FittedModel.from_dict({**d, "format": "other"})


@pytest.mark.slow
def test_delta_method_se_matches_parametric_bootstrap():
    rng = np.random.default_rng(77)
    model, cohort = _toy_model(rng, n=400)
    ages = np.array(GRID)
    se = np.array([trajectory_se(model, k, ages) for k in range(2)])
    sig = model.params.sigma[0]
    mu = model.mean_matrix()
    mask = cohort.mask
    n = cohort.n_subjects
    draws = []
    for _ in range(500):
        lab = rng.choice(2, size=n, p=model.pi)
        vals = mu[lab] + sig * rng.standard_normal((n, 3))
        vals[~mask] = np.nan
        boot = Cohort(cohort.subject_ids, GRID, vals)
        refit = fit(model.spec, boot, InitStrategy(starts=0, params=model.params), tol=1e-10)
        draws.append(refit.mean_matrix())
    boot_se = np.std(np.array(draws), axis=0, ddof=1)
    np.testing.assert_allclose(se, boot_se, rtol=0.15)

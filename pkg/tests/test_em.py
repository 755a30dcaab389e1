from unittest import mock

import numpy as np
import pytest

from trajmix.data import Cohort
from trajmix.errors import EmptyGroupError, EstimationError
from trajmix.gbtm import ModelSpec
from trajmix.gbtm import em
from trajmix.gbtm.em import InitStrategy, fit, monotone_violations
from trajmix.gbtm.model import AgeTransform, loglik

from conftest import GRID, random_cohort, two_curve_cohort


def toy_fit(seed):
    """A short random EM fit with its per-iteration trace."""
    rng = np.random.default_rng(seed)
    K = int(rng.integers(1, 4))
    spec = ModelSpec(K, tuple(rng.integers(0, 3, K)),
                     sigma_mode="per-group" if rng.random() < 0.3 else "shared",
                     transform=AgeTransform.from_grid(GRID))
    cohort, _ = two_curve_cohort(rng, n=int(rng.integers(60, 200)), sigma=float(rng.uniform(0.3, 1.2)))
    return fit(spec, cohort, InitStrategy(starts=2, seed=seed), keep_trace=True, max_iter=300)


@pytest.mark.parametrize("seed", range(25))
def test_loglik_never_decreases(seed):
    model = toy_fit(seed)
    assert len(model.trace) >= 1
    assert monotone_violations(model.trace) == 0
    assert model.loglik >= model.trace[0] - 1e-9


def test_violation_counter():
    assert monotone_violations([-10.0, -9.0, -9.5, -9.0]) == 1
    assert monotone_violations([-10.0]) == 0


def test_single_group_recovers_sample_moments(rng):
    cohort = random_cohort(rng, 80, miss=0.3)
    y = cohort.values[cohort.mask]
    model = fit(ModelSpec.uniform(1, 0, GRID), cohort)
    assert model.converged
    assert model.params.betas[0][0] == pytest.approx(y.mean(), rel=1e-13)
    assert model.params.sigma[0] == pytest.approx(y.std(), rel=1e-12)


def test_subject_order_does_not_matter(rng):
    cohort, _ = two_curve_cohort(rng, n=250, sigma=0.6)
    perm = rng.permutation(cohort.n_subjects)
    shuffled = cohort.subset(perm)
    spec = ModelSpec.uniform(2, 1, GRID)
    a = fit(spec, cohort, InitStrategy(starts=3, seed=5))
    b = fit(spec, shuffled, InitStrategy(starts=3, seed=5))
    assert abs(a.loglik - b.loglik) <= 1e-10
    for x, y in zip(a.params.betas, b.params.betas):
        np.testing.assert_allclose(x, y, atol=1e-10, rtol=0)
    np.testing.assert_allclose(a.pi, b.pi, atol=1e-10, rtol=0)


def test_threaded_starts_match_sequential(rng):
    cohort, _ = two_curve_cohort(rng, n=200, sigma=0.7)
    spec = ModelSpec.uniform(3, 1, GRID)
    a = fit(spec, cohort, InitStrategy(starts=6, seed=2))
    b = fit(spec, cohort, InitStrategy(starts=6, seed=2), n_jobs=3)
    assert a.to_dict() == b.to_dict()


def test_same_seed_same_fit(rng):
    cohort, _ = two_curve_cohort(rng, n=150, sigma=0.8)
    spec = ModelSpec.uniform(2, 2, GRID)
    assert fit(spec, cohort, InitStrategy(seed=11)).to_dict() == fit(spec, cohort, InitStrategy(seed=11)).to_dict()


def test_recovers_separated_groups(rng):
    cohort, labels = two_curve_cohort(rng, n=500, sigma=0.3)
    model = fit(ModelSpec.uniform(2, 1, GRID), cohort, InitStrategy(starts=4, seed=0))
    assert model.converged
    np.testing.assert_allclose(model.pi, np.bincount(labels) / labels.size, atol=0.01)
    assert model.covariance is not None
    # canonical labelling: increasing fitted mean at the first age
    assert model.mean_matrix()[0, 0] < model.mean_matrix()[1, 0]


def test_non_convergence_is_flagged_not_raised(rng):
    cohort, _ = two_curve_cohort(rng, n=200, sigma=1.0)
    model = fit(ModelSpec.uniform(2, 1, GRID), cohort, InitStrategy(starts=1, seed=0), max_iter=2, tol=1e-14)
    assert not model.converged
    assert model.iterations == 2


def test_restart_budget_exhaustion_raises(rng):
    cohort, _ = two_curve_cohort(rng, n=100)
    with mock.patch.object(em, "_run_em", side_effect=em._GroupCollapse("lost a group")):
        with pytest.raises(EmptyGroupError):
            fit(ModelSpec.uniform(2, 1, GRID), cohort, InitStrategy(starts=2, seed=0, restart_budget=3))


def test_restart_draws_new_initialisation(rng):
    cohort, _ = two_curve_cohort(rng, n=100)
    real = em._run_em
    calls = []

    def flaky(*args, **kw):
        calls.append(args[4].pi.copy())
        if len(calls) == 1:
            raise em._GroupCollapse("lost a group")
        return real(*args, **kw)

    with mock.patch.object(em, "_run_em", side_effect=flaky):
        model = fit(ModelSpec.uniform(2, 1, GRID), cohort, InitStrategy(starts=1, seed=0, restart_budget=2))
    assert len(calls) == 2 and not np.array_equal(calls[0], calls[1])
    assert model.converged


def test_fit_rejects_bad_input(rng):
    with pytest.raises(EstimationError):
        fit(ModelSpec.uniform(1, 0, GRID), Cohort((), GRID, np.empty((0, 3))))
    blank = Cohort(("a", "b"), GRID, [[1.0, 2.0, 3.0], [np.nan] * 3])
    with pytest.raises(EstimationError):
        fit(ModelSpec.uniform(1, 0, GRID), blank)
    with pytest.raises(ValueError):
        fit(ModelSpec.uniform(1, 2, (2, 3)), Cohort(("a",), (2, 3), [[1.0, 2.0]]))


def test_warm_start_is_used(rng):
    cohort, _ = two_curve_cohort(rng, n=300, sigma=0.4)
    spec = ModelSpec.uniform(2, 1, GRID)
    base = fit(spec, cohort, InitStrategy(starts=2, seed=0))
    warm = fit(spec, cohort, InitStrategy(starts=0, params=base.params))
    assert warm.loglik == pytest.approx(base.loglik, rel=1e-10)
    assert warm.iterations <= 3


def test_censored_variant_close_to_plain_when_bounds_are_far(rng):
    cohort, _ = two_curve_cohort(rng, n=200, sigma=0.4)
    plain = fit(ModelSpec.uniform(2, 1, GRID), cohort, InitStrategy(starts=2, seed=0))
    cens = fit(ModelSpec(2, (1, 1), transform=AgeTransform.from_grid(GRID), censor=(0.0, 24.0)),
               cohort, InitStrategy(starts=2, seed=0))
    assert cens.loglik == pytest.approx(plain.loglik, abs=1e-4)
    assert cens.loglik == pytest.approx(loglik(cens.spec, cens.params, cohort), rel=1e-12)


@pytest.mark.slow
def test_single_group_data_prefers_single_group():
    wins = 0
    for seed in range(10):
        rng = np.random.default_rng(1000 + seed)
        g = np.asarray(GRID)
        values = 11.0 - 0.1 * (g - 2) + 0.7 * rng.standard_normal((2000, 3))
        cohort = Cohort(tuple(f"u{i:05d}" for i in range(2000)), g, values)
        one = fit(ModelSpec.uniform(1, 1, GRID), cohort)
        two = fit(ModelSpec.uniform(2, 1, GRID), cohort, InitStrategy(starts=5, seed=seed))
        wins += one.bic >= two.bic
    assert wins >= 9

"""Maximum-likelihood fitting of the trajectory mixture by EM with multiple starts."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy import optimize
from scipy.cluster.vq import kmeans2

from .. import _kernels
from ..data import Cohort
from ..errors import EmptyGroupError, EstimationError
from .model import (
    FittedModel,
    MixtureParams,
    ModelSpec,
    canonical_order,
    cohort_arrays,
    covariance_or_none,
    group_designs,
    loglik,
    mean_matrix,
    observed_information,
    param_vector,
    params_from_vector,
)

log = logging.getLogger(__name__)

PI_FLOOR = 1e-4
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 2000
DEFAULT_STARTS = 20
MONOTONE_RTOL = 1e-9


@dataclass(frozen=True)
class InitStrategy:
    """How EM is started.

    With ``params`` set, that single warm start is tried first and the
    randomized starts only run if it loses a group.
    """

    starts: int = DEFAULT_STARTS
    seed: int | None = 0
    restart_budget: int = 20
    params: MixtureParams | None = None

    def resolved_seed(self) -> int:
        if self.seed is not None:
            return int(self.seed)
        return int(np.random.SeedSequence().entropy % (2**63))


class _GroupCollapse(Exception):
    pass


@dataclass
class _EMRun:
    params: MixtureParams
    loglik: float
    iterations: int
    converged: bool
    trace: list
    start: int


def m_step(spec: ModelSpec, xs, S, R, Q, weight_totals, n_total_obs) -> MixtureParams:
    """Closed-form maximizer of the expected complete-data log-likelihood."""
    K = spec.n_groups
    betas, resid = [], np.empty(K)
    for k in range(K):
        A = (xs[k].T * S[k]) @ xs[k]
        b = xs[k].T @ R[k]
        try:
            beta = np.linalg.solve(A, b)
        except np.linalg.LinAlgError:
            raise _GroupCollapse(f"singular normal equations in group {k}") from None
        mu = xs[k] @ beta
        resid[k] = max(float(np.sum(Q[k] - 2.0 * mu * R[k] + mu * mu * S[k])), 0.0)
        betas.append(beta)
    if spec.sigma_mode == "shared":
        sigma = np.array([np.sqrt(resid.sum() / n_total_obs)])
    else:
        sigma = np.sqrt(resid / S.sum(axis=1))
    if not np.all(np.isfinite(sigma)) or np.any(sigma <= 1e-10):
        raise _GroupCollapse("residual scale collapsed")
    pi = weight_totals / weight_totals.sum()
    return MixtureParams(tuple(betas), pi, sigma)


def _params_from_weights(spec, W, y, m, xs) -> MixtureParams:
    S, R, Q = W.T @ m, W.T @ y, W.T @ (y * y)
    return m_step(spec, xs, S, R, Q, W.sum(axis=0), m.sum())


def _run_em(spec, y, m, xs, params, tol, max_iter, pi_floor, start=-1) -> _EMRun:
    n = y.shape[0]
    n_obs = m.sum()
    ll_prev = None
    trace = []
    for it in range(1, max_iter + 1):
        mu = np.ascontiguousarray(np.vstack([x @ b for x, b in zip(xs, params.betas)]))
        with np.errstate(divide="ignore"):
            log_pi = np.log(params.pi)
        ll, W, S, R, Q = _kernels.em_pass(y, m, mu, params.sigma_per_group(), log_pi)
        if not np.isfinite(ll):
            raise _GroupCollapse("non-finite log-likelihood")
        trace.append(ll)
        if ll_prev is not None and abs(ll - ll_prev) <= tol * abs(ll_prev):
            return _EMRun(params, ll, it, True, trace, start)
        ll_prev = ll
        totals = W.sum(axis=0)
        if totals.min() / n < pi_floor:
            raise _GroupCollapse("mixing proportion below floor")
        params = m_step(spec, xs, S, R, Q, totals, n_obs)
    return _EMRun(params, ll_prev, max_iter, False, trace, start)


# ---------------------------------------------------------------------------
# initialization


def subject_features(y, m, a_grid) -> np.ndarray:
    """Per-subject OLS intercept and slope in transformed age (slope 0 with one observation)."""
    n_obs = m.sum(axis=1)
    a = np.broadcast_to(a_grid, y.shape)
    mean_a = (m * a).sum(axis=1) / n_obs
    mean_y = (m * y).sum(axis=1) / n_obs
    da = m * (a - mean_a[:, None])
    sxx = (da * da).sum(axis=1)
    sxy = (da * (y - mean_y[:, None])).sum(axis=1)
    slope = np.divide(sxy, sxx, out=np.zeros_like(sxy), where=sxx > 0)
    return np.column_stack([mean_y - slope * mean_a, slope])


def _labels_to_weights(labels, K, smooth=0.1):
    W = np.full((labels.size, K), smooth / K)
    W[np.arange(labels.size), labels] += 1.0 - smooth
    return W


def _initial_weights(start: int, K: int, feats: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = feats.shape[0]
    if start % 2 == 0:
        sd = feats.std(axis=0)
        z = feats / np.where(sd > 0, sd, 1.0)
        _, labels = kmeans2(z, K, minit="++", rng=rng, missing="warn")
    else:
        level = feats[:, 0]
        score = level + rng.normal(0.0, 0.5 * (level.std() or 1.0), n)
        props = 0.5 * rng.dirichlet(np.full(K, 2.0)) + 0.5 / K
        cuts = np.quantile(score, np.cumsum(props)[:-1])
        labels = np.searchsorted(cuts, score, side="right")
    return _labels_to_weights(np.asarray(labels, dtype=int), K)


# ---------------------------------------------------------------------------
# public API


def fit(
    spec: ModelSpec,
    cohort: Cohort,
    init: InitStrategy | None = None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    pi_floor: float = PI_FLOOR,
    n_jobs: int = 1,
    keep_trace: bool = False,
) -> FittedModel:
    """Fit ``spec`` to ``cohort`` by EM; best final log-likelihood over starts wins.

    Subjects are processed in subject-id order so results do not depend on
    input order. Groups of the returned model are relabeled canonically.
    A run that does not reach ``tol`` within ``max_iter`` is returned with
    ``converged=False``.
    """
    init = init or InitStrategy()
    spec.check_grid(cohort.grid)
    if cohort.n_subjects == 0:
        raise EstimationError("no subjects to fit")
    if np.any(cohort.n_observed == 0):
        raise EstimationError("every subject needs at least one observation")
    data, _ = cohort.canonical()
    y, m = cohort_arrays(data)
    xs = group_designs(spec, data.grid)
    seed = init.resolved_seed()
    K = spec.n_groups

    runs: list[_EMRun] = []
    if init.params is not None:
        init.params.validate(spec)
        try:
            runs.append(_run_em(spec, y, m, xs, init.params, tol, max_iter, pi_floor, start=-1))
        except _GroupCollapse as exc:
            log.debug("warm start failed: %s", exc)

    if not runs and K == 1:
        W = np.ones((data.n_subjects, 1))
        runs.append(_run_em(spec, y, m, xs, _params_from_weights(spec, W, y, m, xs), tol, max_iter, pi_floor, 0))
    elif not runs:
        if init.starts < 1:
            raise EmptyGroupError("warm start lost a group and no random starts are allowed")
        feats = subject_features(y, m, spec.transform.apply(data.grid))
        runs = _multistart(spec, y, m, xs, feats, seed, init, tol, max_iter, pi_floor, n_jobs)

    best = max(runs, key=lambda r: (r.loglik, -r.start))
    order = canonical_order(spec, best.params, data.grid)
    spec_c = spec.with_degrees([spec.degrees[k] for k in order])
    params_c = best.params.permuted(order)
    model = FittedModel(
        spec=spec_c,
        params=params_c,
        grid=data.grid,
        loglik=best.loglik,
        n_subjects=data.n_subjects,
        converged=best.converged,
        iterations=best.iterations,
        seed=seed,
        trace=tuple(best.trace) if keep_trace else (),
        tol=tol,
        max_iter=max_iter,
    )
    if spec.censor is not None:
        model = _refine_censored(model, data)
    cov = covariance_or_none(observed_information(model.spec, model.params, data))
    return replace(model, covariance=cov)


def _multistart(spec, y, m, xs, feats, seed, init, tol, max_iter, pi_floor, n_jobs):
    K = spec.n_groups

    def one(start: int):
        failures = []
        for attempt in range(init.restart_budget + 1):
            rng = np.random.default_rng([seed, K, *spec.degrees, start, attempt])
            W = _initial_weights(start, K, feats, rng)
            try:
                p0 = _params_from_weights(spec, W, y, m, xs)
                return _run_em(spec, y, m, xs, p0, tol, max_iter, pi_floor, start), failures
            except _GroupCollapse as exc:
                failures.append(str(exc))
        return None, failures

    if n_jobs != 1 and init.starts > 1:
        with ThreadPoolExecutor(max_workers=None if n_jobs < 0 else n_jobs) as ex:
            results = list(ex.map(one, range(init.starts)))
    else:
        results = [one(s) for s in range(init.starts)]
    runs = [r for r, _ in results if r is not None]
    if not runs:
        raise EmptyGroupError(
            f"all {init.starts} starts lost a group within the restart budget ({init.restart_budget})"
        )
    return runs


def _refine_censored(model: FittedModel, data: Cohort) -> FittedModel:
    """Maximize the censored-Normal likelihood starting from the uncensored EM solution."""
    spec = model.spec
    theta0 = param_vector(spec, model.params)
    ns = spec.n_sigma
    sig_at = sum(d + 1 for d in spec.degrees)

    def unpack(z):
        th = z.copy()
        th[sig_at : sig_at + ns] = np.exp(z[sig_at : sig_at + ns])
        return th

    def nll(z):
        return -loglik(spec, params_from_vector(spec, unpack(z)), data)

    z0 = theta0.copy()
    z0[sig_at : sig_at + ns] = np.log(theta0[sig_at : sig_at + ns])
    res = optimize.minimize(nll, z0, method="BFGS", options={"gtol": 1e-6, "maxiter": 500})
    params = params_from_vector(spec, unpack(res.x))
    order = canonical_order(spec, params, data.grid)
    return replace(
        model,
        spec=spec.with_degrees([spec.degrees[k] for k in order]),
        params=params.permuted(order),
        loglik=-float(res.fun),
        converged=bool(res.success),
        iterations=model.iterations + int(res.nit),
    )


def monotone_violations(trace, rtol: float = MONOTONE_RTOL) -> int:
    t = np.asarray(trace, dtype=float)
    if t.size < 2:
        return 0
    return int(np.sum(t[1:] < t[:-1] - rtol * np.abs(t[:-1])))

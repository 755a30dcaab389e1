"""Search over group counts and polynomial orders, and the complete-case sensitivity refit."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy.optimize import linear_sum_assignment

from ..data import Cohort
from ..errors import EmptyGroupError, EstimationError
from .em import DEFAULT_MAX_ITER, DEFAULT_TOL, InitStrategy, fit
from .model import FittedModel, MixtureParams, ModelSpec

PRUNE_ALPHA = 0.05
PARSIMONY_DELTA = 2.0
DEGREE_POLICIES = ("prune", "fixed")


@dataclass(frozen=True, eq=False)
class Candidate:
    model: FittedModel
    final: bool
    round: int


@dataclass(frozen=True, eq=False)
class SearchResult:
    best: FittedModel
    candidates: tuple[Candidate, ...]
    degree_policy: str
    parsimony_delta: float

    def table(self) -> list[dict]:
        rows = []
        for c in self.candidates:
            m = c.model
            rows.append(
                {
                    "n_groups": m.n_groups,
                    "degrees": "-".join(str(d) for d in m.spec.degrees),
                    "round": c.round,
                    "final": c.final,
                    "n_params": m.n_params,
                    "loglik": m.loglik,
                    "bic": m.bic,
                    "converged": m.converged,
                    "selected": m is self.best,
                }
            )
        return rows


def _truncate(params: MixtureParams, degrees) -> MixtureParams:
    return MixtureParams(tuple(b[: d + 1] for b, d in zip(params.betas, degrees)), params.pi, params.sigma)


def _search_one_k(cohort, K, degree, degree_policy, sigma_mode, init, tol, max_iter, alpha, max_groups):
    spec = ModelSpec.uniform(K, min(degree, cohort.grid.size - 1), cohort.grid,
                             sigma_mode=sigma_mode, max_groups=max_groups)
    model = fit(spec, cohort, init, tol=tol, max_iter=max_iter)
    out = []
    rnd = 0
    if degree_policy == "prune":
        while True:
            p = model.leading_wald_p()
            degrees = list(model.spec.degrees)
            drop = [k for k, d in enumerate(degrees) if d > 0 and np.isfinite(p[k]) and p[k] > alpha]
            if not drop:
                break
            out.append(Candidate(model, False, rnd))
            for k in drop:
                degrees[k] -= 1
            warm = InitStrategy(init.starts, init.seed, init.restart_budget,
                                _truncate(model.params, degrees))
            model = fit(model.spec.with_degrees(degrees), cohort, warm, tol=tol, max_iter=max_iter)
            rnd += 1
    out.append(Candidate(model, True, rnd))
    return out


def select_best(finals: Iterable[FittedModel], parsimony_delta: float = PARSIMONY_DELTA) -> FittedModel:
    """Highest BIC, except that a model with fewer parameters within ``parsimony_delta`` wins."""
    pool = [m for m in finals if m.converged]
    if not pool:
        raise EstimationError("no candidate model converged")
    top = max(m.bic for m in pool)
    near = [m for m in pool if m.bic >= top - parsimony_delta]
    return min(near, key=lambda m: (m.n_params, -m.bic, m.n_groups))


def model_search(
    cohort: Cohort,
    k_range: Iterable[int] = range(2, 6),
    degree_policy: str = "prune",
    degree: int = 2,
    sigma_mode: str = "shared",
    init: InitStrategy | None = None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    parsimony_delta: float = PARSIMONY_DELTA,
    alpha: float = PRUNE_ALPHA,
    max_groups: int = 10,
    n_jobs: int = 1,
) -> SearchResult:
    """Fit every group count in ``k_range`` and pick the BIC-preferred model.

    Under ``degree_policy="prune"`` each group starts at ``degree`` and the
    highest-order term of any group whose leading coefficient has Wald
    p > ``alpha`` is removed, refitting until nothing changes.
    """
    if degree_policy not in DEGREE_POLICIES:
        raise ValueError(f"degree_policy must be one of {DEGREE_POLICIES}")
    ks = sorted(set(int(k) for k in k_range))
    if not ks or ks[0] < 1 or ks[-1] > max_groups:
        raise ValueError(f"group counts must lie in 1..{max_groups}")
    init = init or InitStrategy()
    if init.seed is None:
        init = InitStrategy(init.starts, init.resolved_seed(), init.restart_budget)

    def run(K):
        try:
            return _search_one_k(cohort, K, degree, degree_policy, sigma_mode, init, tol, max_iter,
                                 alpha, max_groups)
        except EmptyGroupError:
            return []

    if n_jobs != 1 and len(ks) > 1:
        with ThreadPoolExecutor(max_workers=None if n_jobs < 0 else n_jobs) as ex:
            per_k = list(ex.map(run, ks))
    else:
        per_k = [run(K) for K in ks]
    cands = [c for group in per_k for c in group]
    if not cands:
        raise EstimationError("every group count lost a group in all starts")
    best = select_best([c.model for c in cands if c.final], parsimony_delta)
    cands.sort(key=lambda c: (-c.model.bic, c.model.n_groups, c.round))
    return SearchResult(best, tuple(cands), degree_policy, parsimony_delta)


# ---------------------------------------------------------------------------
# sensitivity


def match_groups(a: FittedModel, b: FittedModel) -> list[tuple[int, int]]:
    """Pair groups of two models by least squared distance between fitted curves on the grid."""
    ma, mb = a.mean_matrix(), b.mean_matrix()
    cost = ((ma[:, None, :] - mb[None, :, :]) ** 2).sum(axis=2)
    rows, cols = linear_sum_assignment(cost)
    return sorted(zip(rows.tolist(), cols.tolist()))


@dataclass(frozen=True, eq=False)
class SensitivityReport:
    n_full: int
    n_complete: int
    full: FittedModel
    complete: FittedModel
    same_n_groups: bool
    pairs: tuple[tuple[int, int], ...]
    shape_agreement: tuple[bool, ...]
    prevalence_delta: tuple[float, ...]
    prevalence_tolerance: float
    adequacy_full: bool | None = None
    adequacy_complete: bool | None = None
    search: SearchResult | None = field(default=None, repr=False)

    @property
    def shapes_agree(self) -> bool:
        return self.same_n_groups and all(self.shape_agreement)

    @property
    def max_prevalence_delta(self) -> float:
        return max((abs(d) for d in self.prevalence_delta), default=float("nan"))

    @property
    def no_notable_difference(self) -> bool:
        ok = self.same_n_groups and self.shapes_agree and self.max_prevalence_delta <= self.prevalence_tolerance
        if self.adequacy_full is not None and self.adequacy_complete is not None:
            ok = ok and self.adequacy_full == self.adequacy_complete
        return ok

    def to_dict(self) -> dict:
        return {
            "n_full": self.n_full,
            "n_complete": self.n_complete,
            "n_groups_full": self.full.n_groups,
            "n_groups_complete": self.complete.n_groups,
            "same_n_groups": self.same_n_groups,
            "pairs": [[i + 1, j + 1] for i, j in self.pairs],
            "shapes_full": [list(s) for s in self.full.shapes()],
            "shapes_complete": [list(s) for s in self.complete.shapes()],
            "shape_agreement": list(self.shape_agreement),
            "prevalence_full": self.full.pi.tolist(),
            "prevalence_complete": self.complete.pi.tolist(),
            "prevalence_delta": list(self.prevalence_delta),
            "prevalence_tolerance": self.prevalence_tolerance,
            "adequacy_full": self.adequacy_full,
            "adequacy_complete": self.adequacy_complete,
            "no_notable_difference": self.no_notable_difference,
        }


def sensitivity_refit(
    cohort: Cohort,
    full: SearchResult | FittedModel,
    k_range: Iterable[int] | None = None,
    prevalence_tolerance: float = 0.03,
    adequacy=None,
    **search_kwargs,
) -> SensitivityReport:
    """Repeat the selection procedure on subjects observed at every grid age and compare.

    ``full`` is the result obtained on all eligible subjects. When it is a
    :class:`SearchResult` the same search is rerun on complete cases; a bare
    model is refit with its own spec. ``adequacy`` is an optional callable
    ``(model, cohort) -> bool`` recording criterion compliance for both fits.
    """
    complete = cohort.complete_cases()
    if complete.n_subjects == 0:
        raise EstimationError("no complete cases")
    search = None
    if isinstance(full, SearchResult):
        full_model = full.best
        if k_range is None:
            k_range = sorted({c.model.n_groups for c in full.candidates})
        search_kwargs.setdefault("degree_policy", full.degree_policy)
        search_kwargs.setdefault("parsimony_delta", full.parsimony_delta)
        search = model_search(complete, k_range, **search_kwargs)
        cc_model = search.best
    else:
        full_model = full
        init = search_kwargs.get("init") or InitStrategy(seed=full.seed)
        cc_model = fit(full.spec, complete, init,
                       tol=search_kwargs.get("tol", DEFAULT_TOL),
                       max_iter=search_kwargs.get("max_iter", DEFAULT_MAX_ITER))
    same = full_model.n_groups == cc_model.n_groups
    pairs = match_groups(full_model, cc_model)
    sf, sc = full_model.shapes(), cc_model.shapes()
    agree = tuple(sf[i] == sc[j] for i, j in pairs)
    delta = tuple(float(cc_model.pi[j] - full_model.pi[i]) for i, j in pairs)
    adeq_f = adeq_c = None
    if adequacy is not None:
        adeq_f = bool(adequacy(full_model, cohort))
        adeq_c = bool(adequacy(cc_model, complete))
    return SensitivityReport(
        n_full=cohort.n_subjects,
        n_complete=complete.n_subjects,
        full=full_model,
        complete=cc_model,
        same_n_groups=same,
        pairs=tuple(pairs),
        shape_agreement=agree,
        prevalence_delta=delta,
        prevalence_tolerance=prevalence_tolerance,
        adequacy_full=adeq_f,
        adequacy_complete=adeq_c,
        search=search,
    )

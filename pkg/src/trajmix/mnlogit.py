"""Multinomial logistic regression of covariates on assigned trajectory class.

Coefficients are estimated by Newton-Raphson; odds ratios carry Wald
intervals and each factor's joint effect is tested by a likelihood-ratio
test across all non-reference classes. A two-stage workflow screens factors
one at a time before the multivariable fit.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from .diagnostics import Assignment
from .errors import RankDeficiencyError, SchemaError, SeparationError, SingularMatrixError
from .gbtm.model import FittedModel
from .preprocess import MISSING, CovariateTable

INTERCEPT = "(intercept)"
SCORE_TOL = 1e-8
STEP_TOL = 1e-4
MAX_ITER = 100
COEF_BOUND = 30.0
SCREEN_ALPHA = 0.20
DEFAULT_FORCED = ("education", "income", "center")
DEFAULT_REF_BAND = (11.0, 11.5)


# ---------------------------------------------------------------------------
# design matrix


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    X: np.ndarray
    columns: tuple[str, ...]
    factors: dict
    subject_ids: tuple[str, ...]
    levels: dict = field(default_factory=dict)

    @property
    def n_columns(self) -> int:
        return self.X.shape[1]

    def factor_of(self, col: int) -> str:
        for name, idx in self.factors.items():
            if col in idx:
                return name
        raise KeyError(col)

    def keep_factors(self, names: Iterable[str]) -> "DesignMatrix":
        names = [n for n in self.factors if n in set(names) or n == INTERCEPT]
        cols, factors, pos = [], {}, 0
        for n in names:
            idx = self.factors[n]
            cols.extend(idx)
            factors[n] = tuple(range(pos, pos + len(idx)))
            pos += len(idx)
        return DesignMatrix(
            self.X[:, cols],
            tuple(self.columns[c] for c in cols),
            factors,
            self.subject_ids,
            {n: self.levels[n] for n in names if n in self.levels},
        )

    def drop_factor(self, name: str) -> "DesignMatrix":
        if name not in self.factors:
            raise KeyError(name)
        return self.keep_factors([n for n in self.factors if n != name])


def _check_rank(X: np.ndarray, columns: Sequence[str]) -> None:
    if np.linalg.matrix_rank(X) == X.shape[1]:
        return
    bad, kept = [], []
    for j in range(X.shape[1]):
        trial = X[:, kept + [j]]
        if np.linalg.matrix_rank(trial) == len(kept) + 1:
            kept.append(j)
        else:
            bad.append(columns[j])
    raise RankDeficiencyError(f"design matrix is rank deficient; redundant columns: {bad}", bad)


def build_design(table: CovariateTable, factors: Sequence[str] | None = None, intercept: bool = True) -> DesignMatrix:
    """Dummy-code categorical factors (declared reference omitted); continuous ones enter raw."""
    names = list(factors) if factors is not None else table.names
    n = len(table.subject_ids)
    cols, col_names, fac_idx, levels = [], [], {}, {}
    if intercept:
        cols.append(np.ones(n))
        col_names.append(INTERCEPT)
        fac_idx[INTERCEPT] = (0,)
    for name in names:
        spec = table.spec(name)
        vals = table.cells[name]
        if any(v is MISSING for v in vals):
            raise SchemaError(f"column {name!r} has missing cells; impute before regression")
        start = len(cols)
        if spec.kind == "categorical":
            ref = spec.reference_level
            others = tuple(lv for lv in spec.levels if lv != ref)
            for lv in others:
                cols.append(np.array([v == lv for v in vals], dtype=float))
                col_names.append(f"{name}[{lv}]")
            levels[name] = (ref, others)
        else:
            cols.append(np.asarray(vals, dtype=float))
            col_names.append(name)
        fac_idx[name] = tuple(range(start, len(cols)))
    X = np.column_stack(cols) if cols else np.empty((n, 0))
    _check_rank(X, col_names)
    return DesignMatrix(X, tuple(col_names), fac_idx, table.subject_ids, levels)


# ---------------------------------------------------------------------------
# likelihood


def _one_hot(y: np.ndarray, K: int) -> np.ndarray:
    Y = np.zeros((y.size, K))
    Y[np.arange(y.size), y] = 1.0
    return Y


def _linear_predictor(X, coef, K, reference) -> np.ndarray:
    eta = np.zeros((X.shape[0], K))
    nonref = [c for c in range(K) if c != reference]
    eta[:, nonref] = X @ coef.T
    return eta


def loglik(coef: np.ndarray, X: np.ndarray, y: np.ndarray, K: int, reference: int) -> float:
    eta = _linear_predictor(X, np.asarray(coef).reshape(K - 1, X.shape[1]), K, reference)
    return float(eta[np.arange(y.size), y].sum() - logsumexp(eta, axis=1).sum())


def score_and_hessian(coef, X, y, K, reference):
    """Gradient and Hessian w.r.t. the flattened ((K-1) x P, row-major) coefficient vector."""
    P = X.shape[1]
    B = np.asarray(coef).reshape(K - 1, P)
    eta = _linear_predictor(X, B, K, reference)
    prob = np.exp(eta - logsumexp(eta, axis=1, keepdims=True))
    nonref = [c for c in range(K) if c != reference]
    Y = _one_hot(y, K)
    resid = Y[:, nonref] - prob[:, nonref]
    grad = (resid.T @ X).ravel()
    H = np.empty(((K - 1) * P, (K - 1) * P))
    pn = prob[:, nonref]
    for a in range(K - 1):
        for b in range(a, K - 1):
            w = pn[:, a] * ((a == b) - pn[:, b])
            blk = -(X.T * w) @ X
            H[a * P:(a + 1) * P, b * P:(b + 1) * P] = blk
            H[b * P:(b + 1) * P, a * P:(a + 1) * P] = blk.T
    ll = float(eta[np.arange(y.size), y].sum() - logsumexp(eta, axis=1).sum())
    return ll, grad, H


# ---------------------------------------------------------------------------
# fit


@dataclass(frozen=True, eq=False)
class MnlogitFit:
    design: DesignMatrix
    n_classes: int
    reference: int
    coef: np.ndarray
    covariance: np.ndarray
    loglik: float
    converged: bool
    iterations: int
    y: np.ndarray = field(repr=False)

    @property
    def nonreference(self) -> list[int]:
        return [c for c in range(self.n_classes) if c != self.reference]

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0, None)).reshape(self.coef.shape)

    def class_coef(self, c: int) -> np.ndarray:
        if c == self.reference:
            return np.zeros(self.coef.shape[1])
        return self.coef[self.nonreference.index(c)]

    def predict_proba(self, X: np.ndarray | None = None) -> np.ndarray:
        X = self.design.X if X is None else X
        eta = _linear_predictor(X, self.coef, self.n_classes, self.reference)
        return np.exp(eta - logsumexp(eta, axis=1, keepdims=True))


def _labels(y, design: DesignMatrix) -> np.ndarray:
    if isinstance(y, Assignment):
        if tuple(y.subject_ids) != tuple(design.subject_ids):
            raise SchemaError("assignment and design matrix rows refer to different subjects")
        return np.asarray(y.groups, dtype=int)
    y = np.asarray(y, dtype=int)
    if y.size != design.X.shape[0]:
        raise SchemaError("outcome length does not match design rows")
    return y


def fit_mnlogit(
    X: DesignMatrix,
    y,
    reference: int,
    n_classes: int | None = None,
    tol: float = SCORE_TOL,
    max_iter: int = MAX_ITER,
    bound: float = COEF_BOUND,
    start: np.ndarray | None = None,
) -> MnlogitFit:
    labels = _labels(y, X)
    K = int(n_classes if n_classes is not None else (getattr(y, "n_groups", None) or labels.max() + 1))
    if K < 2:
        raise ValueError("multinomial regression needs at least two classes")
    if not 0 <= reference < K:
        raise ValueError(f"reference class {reference} outside 0..{K - 1}")
    counts = np.bincount(labels, minlength=K)
    if np.any(counts == 0):
        raise ValueError(f"classes without members: {np.flatnonzero(counts == 0).tolist()}")
    Xm = X.X
    P = Xm.shape[1]
    nonref = [c for c in range(K) if c != reference]
    if start is not None:
        theta = np.array(start, dtype=float).ravel()
    else:
        theta = np.zeros((K - 1) * P)
        if INTERCEPT in X.factors:
            j = X.factors[INTERCEPT][0]
            for a, c in enumerate(nonref):
                theta[a * P + j] = np.log(counts[c] / counts[reference])

    ll, g, H = score_and_hessian(theta, Xm, labels, K, reference)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        try:
            step = np.linalg.solve(-H, g)
        except np.linalg.LinAlgError:
            raise SingularMatrixError("singular Hessian in multinomial-logit fit") from None
        # a separated coefficient keeps taking unit-size steps while its score vanishes
        if np.max(np.abs(g)) < tol and np.max(np.abs(step)) < STEP_TOL:
            converged = True
            break
        t = 1.0
        while True:
            cand = theta + t * step
            ll_c = loglik(cand, Xm, labels, K, reference)
            if ll_c >= ll - 1e-12 * abs(ll) or t < 1e-10:
                break
            t *= 0.5
        theta = cand
        _guard_separation(theta, X, nonref, bound)
        ll, g, H = score_and_hessian(theta, Xm, labels, K, reference)
    else:
        converged = bool(np.max(np.abs(g)) < tol)
    info = -H
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        raise SingularMatrixError("observed information is singular") from None
    if not np.all(np.isfinite(cov)) or np.linalg.cond(info) > 1e14:
        raise SingularMatrixError("observed information is numerically singular")
    return MnlogitFit(X, K, reference, theta.reshape(K - 1, P), 0.5 * (cov + cov.T), ll, converged, it, labels)


def _guard_separation(theta, X: DesignMatrix, nonref, bound):
    P = X.X.shape[1]
    big = np.flatnonzero(np.abs(theta) > bound)
    if big.size:
        j = int(big[0] % P)
        c = nonref[int(big[0] // P)]
        factor = X.factor_of(j)
        raise SeparationError(
            f"coefficient of {X.columns[j]!r} for class {c + 1} exceeded |{bound}|; "
            f"factor {factor!r} separates the classes",
            factor=factor,
        )


# ---------------------------------------------------------------------------
# reporting


@dataclass(frozen=True)
class OddsRatio:
    factor: str
    column: str
    level: str | None
    cls: int
    beta: float
    se: float
    odds_ratio: float
    ci_low: float
    ci_high: float
    p_wald: float


def odds_ratios(fit: MnlogitFit, level: float = 0.95) -> list[OddsRatio]:
    z = stats.norm.ppf(0.5 + level / 2.0)
    se = fit.se
    out = []
    for j, col in enumerate(fit.design.columns):
        factor = fit.design.factor_of(j)
        if factor == INTERCEPT:
            continue
        lv = col[len(factor) + 1:-1] if col.startswith(factor + "[") else None
        for a, c in enumerate(fit.nonreference):
            b, s = float(fit.coef[a, j]), float(se[a, j])
            out.append(OddsRatio(factor, col, lv, c, b, s, float(np.exp(b)), float(np.exp(b - z * s)),
                                 float(np.exp(b + z * s)), float(2 * stats.norm.sf(abs(b) / s))))
    return out


@dataclass(frozen=True)
class GlobalTest:
    factor: str
    statistic: float
    df: int
    p_value: float


def global_test(fit: MnlogitFit, factor: str) -> GlobalTest:
    """Likelihood-ratio test of dropping every column of ``factor`` for all non-reference classes."""
    if factor not in fit.design.factors or factor == INTERCEPT:
        raise KeyError(f"unknown factor {factor!r}")
    reduced = fit.design.drop_factor(factor)
    idx = [j for j in range(fit.design.n_columns) if j not in fit.design.factors[factor]]
    start = fit.coef[:, idx]
    red = fit_mnlogit(reduced, fit.y, fit.reference, fit.n_classes, start=start)
    if not red.converged:
        from .errors import EstimationError

        raise EstimationError(f"reduced model without {factor!r} did not converge")
    stat = max(2.0 * (fit.loglik - red.loglik), 0.0)
    df = len(fit.design.factors[factor]) * (fit.n_classes - 1)
    return GlobalTest(factor, stat, df, float(stats.chi2.sf(stat, df)))


def global_p(fit: MnlogitFit, factor: str) -> float:
    return global_test(fit, factor).p_value


def stars(p: float) -> str:
    if p is None or not np.isfinite(p):
        return ""
    if p <= 0.001:
        return "***"
    if p <= 0.01:
        return "**"
    if p <= 0.05:
        return "*"
    return ""


def select_reference(model: FittedModel, band: tuple[float, float] = DEFAULT_REF_BAND) -> int:
    """Group whose grid-averaged fitted mean is nearest the band midpoint; in-band groups win."""
    lo, hi = band
    mid = 0.5 * (lo + hi)
    avg = model.mean_matrix().mean(axis=1)
    inside = (avg >= lo) & (avg <= hi)
    pool = np.flatnonzero(inside) if inside.any() else np.arange(avg.size)
    return int(pool[np.argmin(np.abs(avg[pool] - mid))])


@dataclass(frozen=True)
class ScreenRow:
    factor: str
    statistic: float
    df: int
    p_value: float
    forced: bool
    retained: bool


def screen_unadjusted(
    table: CovariateTable,
    y,
    reference: int,
    alpha: float = SCREEN_ALPHA,
    forced: Sequence[str] = DEFAULT_FORCED,
    n_classes: int | None = None,
    n_jobs: int = 1,
) -> list[ScreenRow]:
    """One-factor models per covariate; retain when the global p is below ``alpha`` or forced."""
    forced = set(forced)

    def one(name):
        fit = fit_mnlogit(build_design(table, [name]), y, reference, n_classes)
        t = global_test(fit, name)
        return ScreenRow(name, t.statistic, t.df, t.p_value, name in forced, name in forced or t.p_value < alpha)

    if n_jobs != 1:
        with ThreadPoolExecutor(max_workers=None if n_jobs < 0 else n_jobs) as ex:
            return list(ex.map(one, table.names))
    return [one(name) for name in table.names]


@dataclass(frozen=True, eq=False)
class RegressionResult:
    reference: int
    screening: tuple[ScreenRow, ...]
    fit: MnlogitFit
    global_tests: dict

    def retained(self) -> list[str]:
        return [r.factor for r in self.screening if r.retained]


def two_stage(
    table: CovariateTable,
    y,
    reference: int,
    alpha: float = SCREEN_ALPHA,
    forced: Sequence[str] = DEFAULT_FORCED,
    n_classes: int | None = None,
    n_jobs: int = 1,
) -> RegressionResult:
    """Unadjusted screening followed by the multivariable model on retained factors."""
    screening = screen_unadjusted(table, y, reference, alpha, forced, n_classes, n_jobs)
    keep = [r.factor for r in screening if r.retained]
    design = build_design(table, keep)
    fit = fit_mnlogit(design, y, reference, n_classes)
    tests = {f: global_test(fit, f) for f in keep}
    return RegressionResult(reference, tuple(screening), fit, tests)


def factor_report_rows(result: RegressionResult, level: float = 0.95, class_names=None) -> list[dict]:
    """Rows mirroring a published OR table: one per factor level, classes side by side."""
    fit = result.fit
    names = class_names or [f"group{c + 1}" for c in range(fit.n_classes)]
    ors = {(o.column, o.cls): o for o in odds_ratios(fit, level)}
    rows = []
    for factor, idx in fit.design.factors.items():
        if factor == INTERCEPT:
            continue
        g = result.global_tests.get(factor)
        gp = g.p_value if g else float("nan")
        entries = []
        if factor in fit.design.levels:
            ref, others = fit.design.levels[factor]
            entries.append((ref, None))
            entries += [(lv, f"{factor}[{lv}]") for lv in others]
        else:
            entries.append(("", factor))
        for lv, col in entries:
            row = {"factor": factor, "level": lv, "reference_level": col is None}
            for c in fit.nonreference:
                key = names[c]
                if col is None:
                    row.update({f"{key}_or": "", f"{key}_ci_low": "", f"{key}_ci_high": "", f"{key}_stars": ""})
                else:
                    o = ors[(col, c)]
                    row.update({f"{key}_or": o.odds_ratio, f"{key}_ci_low": o.ci_low,
                                f"{key}_ci_high": o.ci_high, f"{key}_stars": stars(o.p_wald)})
            first = lv == entries[0][0]
            row["global_p"] = gp if first else ""
            row["global_stars"] = stars(gp) if first else ""
            rows.append(row)
    return rows

"""Finite mixture of polynomial trajectories: parameters and likelihood.

Group k's mean at age ``t`` is a polynomial in the transformed age
``a = (t - center) / scale``; coefficients are held in that basis and
back-transformed to raw-age polynomials for reporting. Outcomes are Normal
with a residual standard deviation shared across groups (default) or per
group. Mixing proportions are parameterized by logits relative to group 0
wherever derivatives are needed.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numpy.polynomial import Polynomial
from scipy import stats
from scipy.special import logsumexp

from .. import _kernels
from ..data import Cohort
from ..errors import SchemaError

MAX_DEGREE = 2
BIC_CONVENTION = "loglik - (n_params / 2) * ln(n_subjects); larger is better"
SIGMA_MODES = ("shared", "per-group")
MODEL_FORMAT = "trajmix.model/1"


@dataclass(frozen=True)
class AgeTransform:
    center: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("age scale must be positive")

    @classmethod
    def from_grid(cls, grid: Sequence[float]) -> "AgeTransform":
        g = np.asarray(grid, dtype=float)
        lo, hi = float(g.min()), float(g.max())
        half = (hi - lo) / 2.0
        return cls(center=(lo + hi) / 2.0, scale=half if half > 0 else 1.0)

    def apply(self, age):
        return (np.asarray(age, dtype=float) - self.center) / self.scale


@dataclass(frozen=True)
class ModelSpec:
    n_groups: int
    degrees: tuple[int, ...]
    sigma_mode: str = "shared"
    transform: AgeTransform = AgeTransform()
    censor: tuple[float | None, float | None] | None = None
    max_groups: int = 10

    def __post_init__(self):
        object.__setattr__(self, "degrees", tuple(int(d) for d in self.degrees))
        if not 1 <= self.n_groups <= self.max_groups:
            raise ValueError(f"group count {self.n_groups} outside 1..{self.max_groups}")
        if len(self.degrees) != self.n_groups:
            raise ValueError("one polynomial degree per group is required")
        if any(d < 0 or d > MAX_DEGREE for d in self.degrees):
            raise ValueError(f"degrees must lie in 0..{MAX_DEGREE}")
        if self.sigma_mode not in SIGMA_MODES:
            raise ValueError(f"sigma_mode must be one of {SIGMA_MODES}")
        if self.censor is not None:
            lo, hi = self.censor
            if lo is not None and hi is not None and not lo < hi:
                raise ValueError("censoring bounds must satisfy lower < upper")

    @classmethod
    def uniform(cls, n_groups: int, degree: int, grid: Sequence[float], **kw) -> "ModelSpec":
        return cls(n_groups, (degree,) * n_groups, transform=AgeTransform.from_grid(grid), **kw)

    @property
    def n_sigma(self) -> int:
        return 1 if self.sigma_mode == "shared" else self.n_groups

    @property
    def n_params(self) -> int:
        return sum(d + 1 for d in self.degrees) + (self.n_groups - 1) + self.n_sigma

    def check_grid(self, grid: Sequence[float]) -> None:
        if max(self.degrees) > len(grid) - 1:
            raise ValueError(
                f"degree {max(self.degrees)} is not identifiable on a {len(grid)}-point grid"
            )

    def with_degrees(self, degrees: Sequence[int]) -> "ModelSpec":
        return replace(self, degrees=tuple(degrees))

    def to_dict(self) -> dict:
        return {
            "n_groups": self.n_groups,
            "degrees": list(self.degrees),
            "sigma_mode": self.sigma_mode,
            "age_transform": {"center": self.transform.center, "scale": self.transform.scale},
            "censor": None if self.censor is None else list(self.censor),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        at = d.get("age_transform", {})
        censor = d.get("censor")
        return cls(
            n_groups=int(d["n_groups"]),
            degrees=tuple(d["degrees"]),
            sigma_mode=d.get("sigma_mode", "shared"),
            transform=AgeTransform(float(at.get("center", 0.0)), float(at.get("scale", 1.0))),
            censor=None if censor is None else tuple(censor),
            max_groups=max(10, int(d["n_groups"])),
        )


@dataclass(frozen=True, eq=False)
class MixtureParams:
    """``betas[k]`` holds transformed-age coefficients in increasing powers."""

    betas: tuple[np.ndarray, ...]
    pi: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(np.array(b, dtype=float) for b in self.betas))
        object.__setattr__(self, "pi", np.array(self.pi, dtype=float))
        object.__setattr__(self, "sigma", np.atleast_1d(np.array(self.sigma, dtype=float)))

    def sigma_per_group(self) -> np.ndarray:
        k = len(self.betas)
        return np.ascontiguousarray(np.broadcast_to(self.sigma, (k,)), dtype=float)

    def validate(self, spec: ModelSpec) -> None:
        if len(self.betas) != spec.n_groups or self.pi.shape != (spec.n_groups,):
            raise ValueError("parameter shapes do not match the model spec")
        for b, d in zip(self.betas, spec.degrees):
            if b.shape != (d + 1,):
                raise ValueError("coefficient vector length does not match degree")
        if self.sigma.shape != (spec.n_sigma,):
            raise ValueError("sigma shape does not match sigma_mode")
        if not np.all(self.sigma > 0):
            raise ValueError("sigma must be positive")
        if np.any(self.pi < 0) or abs(self.pi.sum() - 1.0) > 1e-9:
            raise ValueError("mixing proportions must be non-negative and sum to 1")

    def permuted(self, order: Sequence[int]) -> "MixtureParams":
        order = list(order)
        sigma = self.sigma if self.sigma.size == 1 else self.sigma[order]
        return MixtureParams(tuple(self.betas[k] for k in order), self.pi[order], sigma)


@dataclass(frozen=True)
class GroupParameters:
    beta: np.ndarray
    raw_coefficients: np.ndarray
    pi: float
    sigma: float


@dataclass(frozen=True, eq=False)
class PosteriorMatrix:
    subject_ids: tuple[str, ...]
    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if p.ndim != 2 or p.shape[0] != len(self.subject_ids):
            raise ValueError("posterior shape does not match subjects")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def n_groups(self) -> int:
        return self.probs.shape[1]


# ---------------------------------------------------------------------------
# basic algebra


def design(a, degree: int) -> np.ndarray:
    return np.vander(np.atleast_1d(np.asarray(a, dtype=float)), degree + 1, increasing=True)


def group_designs(spec: ModelSpec, grid) -> list[np.ndarray]:
    a = spec.transform.apply(grid)
    return [design(a, d) for d in spec.degrees]


def mean_matrix(spec: ModelSpec, params: MixtureParams, grid) -> np.ndarray:
    xs = group_designs(spec, grid)
    return np.ascontiguousarray(np.vstack([x @ b for x, b in zip(xs, params.betas)]))


def raw_coefficients(beta, transform: AgeTransform) -> np.ndarray:
    """Express ``sum_j beta_j * ((age - c) / s)**j`` as a polynomial in raw age."""
    inner = Polynomial([-transform.center / transform.scale, 1.0 / transform.scale])
    out = Polynomial(np.asarray(beta, dtype=float))(inner).coef
    n = len(beta)
    return np.pad(out, (0, max(0, n - out.size)))[:n]


def transformed_coefficients(raw, transform: AgeTransform) -> np.ndarray:
    inner = Polynomial([transform.center, transform.scale])
    out = Polynomial(np.asarray(raw, dtype=float))(inner).coef
    n = len(raw)
    return np.pad(out, (0, max(0, n - out.size)))[:n]


def bic(loglik: float, n_params: int, n_subjects: int) -> float:
    if n_subjects < 1:
        raise ValueError("n_subjects must be >= 1")
    return float(loglik) - 0.5 * n_params * np.log(n_subjects)


def cohort_arrays(cohort: Cohort) -> tuple[np.ndarray, np.ndarray]:
    """Measurements with zeros at missing cells, and the 0/1 mask, both C-contiguous."""
    m = cohort.mask.astype(float)
    y = np.where(cohort.mask, cohort.values, 0.0)
    return np.ascontiguousarray(y), np.ascontiguousarray(m)


def _check_inputs(spec: ModelSpec, params: MixtureParams, cohort: Cohort) -> None:
    params.validate(spec)
    if np.any(cohort.n_observed == 0):
        bad = [s for s, n in zip(cohort.subject_ids, cohort.n_observed) if n == 0]
        raise ValueError(f"subjects without observations: {bad[:5]}")


def log_joint(spec: ModelSpec, params: MixtureParams, cohort: Cohort) -> np.ndarray:
    """``log pi_k + log f_k(Y_i)`` for every subject and group."""
    _check_inputs(spec, params, cohort)
    y, m = cohort_arrays(cohort)
    mu = mean_matrix(spec, params, cohort.grid)
    with np.errstate(divide="ignore"):
        log_pi = np.log(params.pi)
    if spec.censor is not None:
        return _censored_log_joint(spec, params, cohort, mu) + log_pi[None, :]
    return _kernels.log_joint(y, m, mu, params.sigma_per_group(), log_pi)


def loglik(spec: ModelSpec, params: MixtureParams, cohort: Cohort) -> float:
    return float(logsumexp(log_joint(spec, params, cohort), axis=1).sum())


def posterior(spec: ModelSpec, params: MixtureParams, cohort: Cohort) -> PosteriorMatrix:
    a = log_joint(spec, params, cohort)
    w = np.exp(a - logsumexp(a, axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    return PosteriorMatrix(cohort.subject_ids, w)


def _censored_log_joint(spec, params, cohort, mu) -> np.ndarray:
    lo, hi = spec.censor
    sig = params.sigma_per_group()[:, None]
    y = cohort.values
    obs = cohort.mask
    out = np.zeros((cohort.n_subjects, spec.n_groups))
    for k in range(spec.n_groups):
        z = (y - mu[k][None, :]) / sig[k]
        dens = stats.norm.logpdf(z) - np.log(sig[k])
        if lo is not None:
            dens = np.where(y <= lo, stats.norm.logcdf((lo - mu[k][None, :]) / sig[k]), dens)
        if hi is not None:
            dens = np.where(y >= hi, stats.norm.logsf((hi - mu[k][None, :]) / sig[k]), dens)
        out[:, k] = np.where(obs, dens, 0.0).sum(axis=1)
    return out


# ---------------------------------------------------------------------------
# parameter vector, score and Hessian


def param_vector(spec: ModelSpec, params: MixtureParams) -> np.ndarray:
    with np.errstate(divide="ignore"):
        eta = np.log(params.pi[1:]) - np.log(params.pi[0])
    return np.concatenate([*params.betas, params.sigma, eta])


def params_from_vector(spec: ModelSpec, theta) -> MixtureParams:
    theta = np.asarray(theta, dtype=float)
    betas, pos = [], 0
    for d in spec.degrees:
        betas.append(theta[pos : pos + d + 1])
        pos += d + 1
    sigma = theta[pos : pos + spec.n_sigma]
    pos += spec.n_sigma
    eta = np.concatenate([[0.0], theta[pos:]])
    pi = np.exp(eta - logsumexp(eta))
    return MixtureParams(tuple(betas), pi, sigma)


def _layout(spec: ModelSpec):
    beta_slices, pos = [], 0
    for d in spec.degrees:
        beta_slices.append(slice(pos, pos + d + 1))
        pos += d + 1
    sigma_idx = [pos + (0 if spec.sigma_mode == "shared" else k) for k in range(spec.n_groups)]
    pos += spec.n_sigma
    eta_slice = slice(pos, pos + spec.n_groups - 1)
    return beta_slices, sigma_idx, eta_slice, pos + spec.n_groups - 1


def score_and_hessian(spec: ModelSpec, params: MixtureParams, cohort: Cohort):
    """Analytic gradient and Hessian of the (uncensored) log-likelihood w.r.t. ``param_vector``."""
    if spec.censor is not None:
        raise NotImplementedError("analytic derivatives are available for the uncensored model only")
    _check_inputs(spec, params, cohort)
    y, m = cohort_arrays(cohort)
    n, K = cohort.n_subjects, spec.n_groups
    xs = group_designs(spec, cohort.grid)
    mu = mean_matrix(spec, params, cohort.grid)
    sig = params.sigma_per_group()
    with np.errstate(divide="ignore"):
        log_pi = np.log(params.pi)
    a = _kernels.log_joint(y, m, mu, sig, log_pi)
    w = np.exp(a - logsumexp(a, axis=1, keepdims=True))
    nobs = m.sum(axis=1)

    beta_sl, sig_idx, eta_sl, P = _layout(spec)
    r = m[:, None, :] * (y[:, None, :] - mu[None, :, :])  # N,K,T
    ss = np.einsum("ikt,ikt->ik", r, r)
    S = np.zeros((n, K, P))
    H = np.zeros((P, P))
    wsum_t = w.T @ m  # K,T
    for k in range(K):
        s2 = sig[k] ** 2
        rx = r[:, k, :] @ xs[k]  # N,p_k
        S[:, k, beta_sl[k]] = rx / s2
        S[:, k, sig_idx[k]] = -nobs / sig[k] + ss[:, k] / (s2 * sig[k])
        H[beta_sl[k], beta_sl[k]] -= (xs[k].T * wsum_t[k]) @ xs[k] / s2
        cross = -2.0 * (w[:, k] @ rx) / (s2 * sig[k])
        H[beta_sl[k], sig_idx[k]] += cross
        H[sig_idx[k], beta_sl[k]] += cross
        H[sig_idx[k], sig_idx[k]] += w[:, k] @ (nobs / s2 - 3.0 * ss[:, k] / (s2 * s2))
    if K > 1:
        pi = params.pi
        S[:, :, eta_sl] = np.eye(K)[:, 1:][None, :, :] - pi[1:][None, None, :]
        H[eta_sl, eta_sl] -= n * (np.diag(pi[1:]) - np.outer(pi[1:], pi[1:]))
    ws = w[:, :, None] * S
    sbar = ws.sum(axis=1)
    grad = sbar.sum(axis=0)
    H += np.einsum("ikp,ikq->pq", ws, S) - sbar.T @ sbar
    return grad, H


def score(spec: ModelSpec, params: MixtureParams, cohort: Cohort) -> np.ndarray:
    return score_and_hessian(spec, params, cohort)[0]


def numeric_hessian(fun, theta, step: float = 1e-4) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    p = theta.size
    h = step * np.maximum(1.0, np.abs(theta))
    H = np.empty((p, p))
    f0 = fun(theta)
    for i in range(p):
        for j in range(i, p):
            if i == j:
                e = np.zeros(p)
                e[i] = h[i]
                H[i, i] = (fun(theta + e) - 2 * f0 + fun(theta - e)) / h[i] ** 2
            else:
                ei = np.zeros(p)
                ej = np.zeros(p)
                ei[i] = h[i]
                ej[j] = h[j]
                H[i, j] = H[j, i] = (
                    fun(theta + ei + ej) - fun(theta + ei - ej) - fun(theta - ei + ej) + fun(theta - ei - ej)
                ) / (4 * h[i] * h[j])
    return H


def observed_information(spec: ModelSpec, params: MixtureParams, cohort: Cohort) -> np.ndarray:
    if spec.censor is None:
        return -score_and_hessian(spec, params, cohort)[1]
    theta = param_vector(spec, params)
    return -numeric_hessian(lambda th: loglik(spec, params_from_vector(spec, th), cohort), theta)


def covariance_or_none(info: np.ndarray) -> np.ndarray | None:
    """Inverse of a positive-definite information matrix, or None when it is singular."""
    if not np.all(np.isfinite(info)):
        return None
    sym = 0.5 * (info + info.T)
    try:
        c = np.linalg.cholesky(sym)
    except np.linalg.LinAlgError:
        return None
    if np.min(np.diag(c)) ** 2 < 1e-12 * np.max(np.diag(sym)):
        return None
    inv_c = np.linalg.solve(c, np.eye(len(sym)))
    return inv_c.T @ inv_c


# ---------------------------------------------------------------------------
# fitted model


@dataclass(frozen=True, eq=False)
class FittedModel:
    spec: ModelSpec
    params: MixtureParams
    grid: np.ndarray
    loglik: float
    n_subjects: int
    converged: bool
    iterations: int
    seed: int | None = None
    covariance: np.ndarray | None = None
    trace: tuple[float, ...] = field(default=(), repr=False)
    tol: float | None = None
    max_iter: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "grid", np.array(self.grid, dtype=float))

    @property
    def n_groups(self) -> int:
        return self.spec.n_groups

    @property
    def n_params(self) -> int:
        return self.spec.n_params

    @property
    def bic(self) -> float:
        return bic(self.loglik, self.n_params, self.n_subjects)

    @property
    def pi(self) -> np.ndarray:
        return self.params.pi

    @property
    def groups(self) -> list[GroupParameters]:
        sig = self.params.sigma_per_group()
        return [
            GroupParameters(b, raw_coefficients(b, self.spec.transform), float(p), float(s))
            for b, p, s in zip(self.params.betas, self.params.pi, sig)
        ]

    def mean_matrix(self) -> np.ndarray:
        return mean_matrix(self.spec, self.params, self.grid)

    def loglik_on(self, cohort: Cohort) -> float:
        return loglik(self.spec, self.params, cohort)

    def posterior(self, cohort: Cohort) -> PosteriorMatrix:
        return posterior(self.spec, self.params, cohort)

    def leading_wald_p(self) -> np.ndarray:
        """Two-sided Wald p-value of each group's highest-order coefficient (NaN for degree 0)."""
        out = np.full(self.n_groups, np.nan)
        if self.covariance is None:
            return out
        beta_sl, _, _, _ = _layout(self.spec)
        for k, d in enumerate(self.spec.degrees):
            if d == 0:
                continue
            idx = beta_sl[k].stop - 1
            se = np.sqrt(self.covariance[idx, idx])
            out[k] = 2.0 * stats.norm.sf(abs(self.params.betas[k][-1]) / se)
        return out

    def shapes(self) -> list[tuple[int, int]]:
        """(degree, sign of leading coefficient) per group; sign is 0 for flat groups."""
        out = []
        for b, d in zip(self.params.betas, self.spec.degrees):
            out.append((d, 0 if d == 0 else int(np.sign(b[-1]))))
        return out

    def in_grid_hull(self, age) -> np.ndarray:
        a = np.asarray(age, dtype=float)
        return (a >= self.grid.min() - 1e-12) & (a <= self.grid.max() + 1e-12)

    def to_dict(self) -> dict:
        sig = self.params.sigma
        return {
            "format": MODEL_FORMAT,
            "spec": self.spec.to_dict(),
            "grid": self.grid.tolist(),
            "groups": [
                {
                    "group": k + 1,
                    "degree": d,
                    "pi": float(g.pi),
                    "coefficients_raw_age": g.raw_coefficients.tolist(),
                    "coefficients_transformed_age": g.beta.tolist(),
                }
                for k, (d, g) in enumerate(zip(self.spec.degrees, self.groups))
            ],
            "sigma": sig.tolist(),
            "loglik": float(self.loglik),
            "bic": float(self.bic),
            "bic_convention": BIC_CONVENTION,
            "n_params": self.n_params,
            "n_subjects": self.n_subjects,
            "convergence": {
                "converged": bool(self.converged),
                "iterations": int(self.iterations),
                "tol": self.tol,
                "max_iter": self.max_iter,
            },
            "seed": self.seed,
            "covariance": None if self.covariance is None else self.covariance.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedModel":
        if d.get("format") != MODEL_FORMAT:
            raise SchemaError(f"unsupported model format {d.get('format')!r}")
        spec = ModelSpec.from_dict(d["spec"])
        groups = sorted(d["groups"], key=lambda g: g["group"])
        params = MixtureParams(
            tuple(np.array(g["coefficients_transformed_age"]) for g in groups),
            np.array([g["pi"] for g in groups]),
            np.array(d["sigma"]),
        )
        params.validate(spec)
        conv = d.get("convergence", {})
        cov = d.get("covariance")
        return cls(
            spec=spec,
            params=params,
            grid=np.array(d["grid"]),
            loglik=float(d["loglik"]),
            n_subjects=int(d["n_subjects"]),
            converged=bool(conv.get("converged", True)),
            iterations=int(conv.get("iterations", 0)),
            seed=d.get("seed"),
            covariance=None if cov is None else np.array(cov),
            tol=conv.get("tol"),
            max_iter=conv.get("max_iter"),
        )


def predict_mean(model: FittedModel, k: int, age) -> np.ndarray:
    b = model.params.betas[k]
    return design(model.spec.transform.apply(age), len(b) - 1) @ b


def trajectory_se(model: FittedModel, k: int, age) -> np.ndarray:
    """Delta-method standard error of group k's mean; NaN when the covariance is unavailable."""
    a = np.atleast_1d(np.asarray(age, dtype=float))
    if model.covariance is None:
        return np.full(a.shape, np.nan)
    beta_sl, _, _, _ = _layout(model.spec)
    x = design(model.spec.transform.apply(a), model.spec.degrees[k])
    c = model.covariance[beta_sl[k], beta_sl[k]]
    return np.sqrt(np.einsum("ij,jk,ik->i", x, c, x))


def trajectory_band(model: FittedModel, k: int, age, level: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise ``level`` confidence band of group k's mean trajectory.

    Returns NaN bounds when the information matrix was singular.
    """
    z = stats.norm.ppf(0.5 + level / 2.0)
    mean = predict_mean(model, k, age)
    se = trajectory_se(model, k, age)
    return mean - z * se, mean + z * se


def relabel(model: FittedModel, order: Sequence[int]) -> FittedModel:
    """Permute groups; the covariance is dropped because the logit baseline changes."""
    spec = model.spec.with_degrees([model.spec.degrees[k] for k in order])
    return replace(model, spec=spec, params=model.params.permuted(order), covariance=None)


def canonical_order(spec: ModelSpec, params: MixtureParams, grid) -> list[int]:
    """Groups in increasing order of fitted mean at the first grid age (later ages break ties)."""
    mu = mean_matrix(spec, params, grid)
    keys = [tuple(np.round(mu[k], 12)) + (k,) for k in range(spec.n_groups)]
    return [k[-1] for k in sorted(keys)]

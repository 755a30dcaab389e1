"""Synthetic cohorts with known latent trajectory groups.

A cohort is generated in four independent random streams (covariates,
group labels, residual noise, missingness) derived from one seed, so that
changing e.g. the missingness settings leaves the other draws untouched.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .data import Cohort
from .preprocess import ColumnSpec, CovariateTable

MISSINGNESS_MODES = ("none", "mcar", "mar", "pattern")


@dataclass(frozen=True)
class GroupCurve:
    name: str
    prevalence: float
    coefficients: tuple[float, ...]  # raw age, increasing powers

    def mean(self, ages) -> np.ndarray:
        return np.polynomial.polynomial.polyval(np.asarray(ages, dtype=float), self.coefficients)


@dataclass(frozen=True)
class CovariateGenerator:
    name: str
    type: str
    levels: tuple[str, ...] = ()
    probs: tuple[float, ...] = ()
    reference: str | None = None
    mean: float = 0.0
    sd: float = 1.0
    lower: float | None = None
    upper: float | None = None
    unit: str | None = None

    def column_spec(self) -> ColumnSpec:
        return ColumnSpec(self.name, self.type, tuple(self.levels), self.reference, self.unit)

    def draw(self, n: int, rng: np.random.Generator) -> list:
        if self.type == "categorical":
            idx = rng.choice(len(self.levels), size=n, p=np.asarray(self.probs) / np.sum(self.probs))
            return [self.levels[i] for i in idx]
        x = rng.normal(self.mean, self.sd, n)
        if self.lower is not None or self.upper is not None:
            x = np.clip(x, self.lower, self.upper)
        return x.tolist()


@dataclass(frozen=True)
class GeneratorConfig:
    n_subjects: int
    grid: tuple[float, ...]
    groups: tuple[GroupCurve, ...]
    sigma: float
    seed: int = 0
    missingness: dict = field(default_factory=lambda: {"mode": "none"})
    covariates: tuple[CovariateGenerator, ...] = ()
    covariate_missing_rate: float = 0.0
    membership: dict | None = None
    name: str = "custom"

    def __post_init__(self):
        prev = np.array([g.prevalence for g in self.groups])
        if len(self.groups) == 0:
            raise ValueError("at least one group is required")
        if np.any(prev < 0) or abs(prev.sum() - 1.0) > 1e-9:
            raise ValueError("group prevalences must be non-negative and sum to 1")
        if not self.sigma >= 0:
            raise ValueError("sigma must be non-negative")
        mode = self.missingness.get("mode", "none")
        if mode not in MISSINGNESS_MODES:
            raise ValueError(f"missingness mode must be one of {MISSINGNESS_MODES}")
        rates = np.asarray(self.missingness.get("rates", []), dtype=float)
        if rates.size and (np.any(rates < 0) or np.any(rates >= 1)):
            raise ValueError("missingness rates must lie in [0, 1)")
        if not 0 <= self.covariate_missing_rate < 1:
            raise ValueError("covariate_missing_rate must lie in [0, 1)")

    @property
    def group_names(self) -> list[str]:
        return [g.name for g in self.groups]

    def with_(self, **changes) -> "GeneratorConfig":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(changes)
        return GeneratorConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(
            n_subjects=int(d["n_subjects"]),
            grid=tuple(float(a) for a in d["grid"]),
            groups=tuple(
                GroupCurve(g["name"], float(g["prevalence"]), tuple(float(c) for c in g["coefficients"]))
                for g in d["groups"]
            ),
            sigma=float(d["sigma"]),
            seed=int(d.get("seed", 0)),
            missingness=dict(d.get("missingness") or {"mode": "none"}),
            covariates=tuple(
                CovariateGenerator(**{**c, "levels": tuple(c.get("levels", ())), "probs": tuple(c.get("probs", ()))})
                for c in d.get("covariates", ())
            ),
            covariate_missing_rate=float(d.get("covariate_missing_rate", 0.0)),
            membership=d.get("membership"),
            name=d.get("name", "custom"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


@dataclass(frozen=True, eq=False)
class SimulatedCohort:
    cohort: Cohort
    covariates: CovariateTable | None
    labels: np.ndarray
    config: GeneratorConfig

    @property
    def group_names(self) -> list[str]:
        return self.config.group_names


def eden_preset(**overrides) -> GeneratorConfig:
    """Five-trajectory preset shaped after the published night-sleep groups."""
    text = resources.files("trajmix.presets").joinpath("eden.json").read_text(encoding="utf-8")
    cfg = GeneratorConfig.from_dict(json.loads(text))
    return cfg.with_(**overrides) if overrides else cfg


PRESETS = {"eden": eden_preset}


# ---------------------------------------------------------------------------
# membership model


def membership_logits(config: GeneratorConfig, cov: dict[str, list]) -> np.ndarray:
    """N x K linear predictors of the membership model (reference group fixed at 0)."""
    mem = config.membership
    n = config.n_subjects
    names = config.group_names
    eta = np.zeros((n, len(names)))
    for gname, terms in mem["coefficients"].items():
        k = names.index(gname)
        for term, coef in terms.items():
            if term == "intercept":
                eta[:, k] += coef
            elif "=" in term:
                var, level = term.split("=", 1)
                eta[:, k] += coef * np.array([v == level for v in cov[var]], dtype=float)
            else:
                eta[:, k] += coef * np.asarray(cov[term], dtype=float)
    return eta


def _draw_covariates(config: GeneratorConfig, n: int, rng) -> dict[str, list]:
    return {c.name: c.draw(n, rng) for c in config.covariates}


def calibrate_intercepts(config: GeneratorConfig, n: int = 200_000, seed: int = 12345, rounds: int = 30) -> dict:
    """Adjust membership intercepts so the marginal group shares match the configured prevalences."""
    mem = json.loads(json.dumps(config.membership))
    target = np.array([g.prevalence for g in config.groups])
    big = config.with_(n_subjects=n, membership=mem)
    cov = _draw_covariates(big, n, np.random.default_rng(seed))
    names = config.group_names
    ref = names.index(mem["reference"])
    for _ in range(rounds):
        eta = membership_logits(big.with_(membership=mem), cov)
        p = np.exp(eta - logsumexp(eta, axis=1, keepdims=True)).mean(axis=0)
        for k, gname in enumerate(names):
            if k == ref:
                continue
            terms = mem["coefficients"].setdefault(gname, {})
            adj = np.log(target[k] / p[k]) - np.log(target[ref] / p[ref])
            terms["intercept"] = float(terms.get("intercept", 0.0) + adj)
    return mem


# ---------------------------------------------------------------------------
# generation


def _scaled_counts(counts: dict[str, int], n: int) -> dict[str, int]:
    total = sum(counts.values())
    if total == n:
        return dict(counts)
    raw = {k: v * n / total for k, v in counts.items()}
    out = {k: int(np.floor(v)) for k, v in raw.items()}
    short = n - sum(out.values())
    for k in sorted(raw, key=lambda k: (-(raw[k] - out[k]), k))[:short]:
        out[k] += 1
    return out


def _missing_mask(config: GeneratorConfig, labels: np.ndarray, rng) -> np.ndarray:
    """True where the measurement is removed."""
    n, T = labels.size, len(config.grid)
    spec = config.missingness
    mode = spec.get("mode", "none")
    if mode == "none":
        return np.zeros((n, T), dtype=bool)
    if mode == "mcar":
        rates = np.broadcast_to(np.asarray(spec["rates"], dtype=float), (T,))
        return rng.random((n, T)) < rates[None, :]
    if mode == "mar":
        rates = np.asarray(spec["rates"], dtype=float)  # K x T
        return rng.random((n, T)) < rates[labels]
    counts = _scaled_counts({k: int(v) for k, v in spec["counts"].items()}, n)
    patterns = []
    for key in sorted(counts):
        if len(key) != T or set(key) - {"0", "1"}:
            raise ValueError(f"pattern {key!r} does not match a {T}-point grid")
        patterns += [key] * counts[key]
    patterns = [patterns[i] for i in rng.permutation(n)]
    return np.array([[c == "0" for c in p] for p in patterns], dtype=bool)


def generate_cohort(config: GeneratorConfig) -> SimulatedCohort:
    n, K = config.n_subjects, len(config.groups)
    grid = np.asarray(config.grid, dtype=float)
    ss = np.random.SeedSequence(config.seed)
    rng_cov, rng_lab, rng_noise, rng_miss, rng_covmiss = (np.random.default_rng(s) for s in ss.spawn(5))

    cov = _draw_covariates(config, n, rng_cov)
    if config.membership is not None:
        eta = membership_logits(config, cov)
        prob = np.exp(eta - logsumexp(eta, axis=1, keepdims=True))
        u = rng_lab.random(n)
        labels = (u[:, None] > np.cumsum(prob, axis=1)).sum(axis=1)
    else:
        prev = np.array([g.prevalence for g in config.groups])
        labels = rng_lab.choice(K, size=n, p=prev / prev.sum())
    labels = np.minimum(labels, K - 1)

    means = np.vstack([g.mean(grid) for g in config.groups])
    values = means[labels] + config.sigma * rng_noise.standard_normal((n, grid.size))
    values[_missing_mask(config, labels, rng_miss)] = np.nan

    width = len(str(n))
    ids = tuple(f"S{i + 1:0{width}d}" for i in range(n))
    table = None
    if config.covariates:
        cells = {}
        for c in config.covariates:
            col = list(cov[c.name])
            if config.covariate_missing_rate > 0:
                drop = rng_covmiss.random(n) < config.covariate_missing_rate
                col = [None if d else v for v, d in zip(col, drop)]
            cells[c.name] = col
        table = CovariateTable(ids, tuple(c.column_spec() for c in config.covariates), cells)
    return SimulatedCohort(Cohort(ids, grid, values), table, labels.astype(int), config)


def eligible(sim: SimulatedCohort, min_observed: int = 2) -> SimulatedCohort:
    """Restrict a simulated cohort to subjects observed at least ``min_observed`` times."""
    keep = sim.cohort.n_observed >= min_observed
    cohort = sim.cohort.subset(keep)
    table = sim.covariates.select(cohort.subject_ids) if sim.covariates is not None else None
    return SimulatedCohort(cohort, table, sim.labels[keep], sim.config)


def curve_coefficients(ages: Sequence[float], values: Sequence[float], degree: int) -> tuple[float, ...]:
    """Raw-age polynomial of ``degree`` through (or least squares to) the given points."""
    c = np.polynomial.polynomial.polyfit(np.asarray(ages, float), np.asarray(values, float), degree)
    return tuple(float(x) for x in c)

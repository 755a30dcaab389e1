import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from trajmix.data import Cohort
from trajmix.gbtm import MixtureParams, ModelSpec
from trajmix.gbtm.model import AgeTransform

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

GRID = (2.0, 3.0, 5.5)


def random_cohort(rng, n, grid=GRID, miss=0.2, loc=11.0, scale=1.0):
    values = rng.normal(loc, scale, (n, len(grid)))
    drop = rng.random(values.shape) < miss
    drop[np.arange(n), rng.integers(0, len(grid), n)] = False  # keep one observation per row
    values[drop] = np.nan
    ids = tuple(f"s{i:04d}" for i in range(n))
    return Cohort(ids, grid, values)


def random_params(rng, spec):
    betas = tuple(rng.normal(11.0, 0.8, d + 1) * np.r_[1.0, np.full(d, 0.3)] for d in spec.degrees)
    pi = rng.dirichlet(np.full(spec.n_groups, 3.0))
    sigma = rng.uniform(0.4, 1.0, spec.n_sigma)
    return MixtureParams(betas, pi, sigma)


def two_curve_cohort(rng, n=400, sigma=0.3, grid=GRID, pis=(0.4, 0.6)):
    """Two well-separated linear groups; returns (cohort, labels)."""
    labels = rng.choice(2, size=n, p=pis)
    g = np.asarray(grid)
    means = np.vstack([10.0 + 0.1 * (g - 2), 12.0 - 0.2 * (g - 2)])
    values = means[labels] + sigma * rng.standard_normal((n, g.size))
    return Cohort(tuple(f"p{i:04d}" for i in range(n)), g, values), labels


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def spec2():
    return ModelSpec(2, (1, 2), transform=AgeTransform.from_grid(GRID))


def covariate_table(rng, n, effects=None, K=3, reference=0):
    """Covariates plus class labels drawn from a known multinomial logit.

    ``effects`` maps a design column to its (K,) coefficient vector; the
    reference entry is ignored. Returns (table, labels, design columns used).
    """
    from trajmix.preprocess import ColumnSpec, CovariateTable

    cols = (
        ColumnSpec("education", "categorical", ("low", "mid", "high"), reference="high"),
        ColumnSpec("income", "categorical", ("<1500", "1501-3000", ">3000"), reference=">3000"),
        ColumnSpec("center", "categorical", ("A", "B"), reference="A"),
        ColumnSpec("x", "continuous"),
        ColumnSpec("null", "continuous"),
    )
    cells = {
        "education": rng.choice(["low", "mid", "high"], n, p=[0.3, 0.3, 0.4]).tolist(),
        "income": rng.choice(["<1500", "1501-3000", ">3000"], n).tolist(),
        "center": rng.choice(["A", "B"], n).tolist(),
        "x": rng.normal(0, 1, n).tolist(),
        "null": rng.normal(5, 2, n).tolist(),
    }
    table = CovariateTable(tuple(f"c{i:05d}" for i in range(n)), cols, cells)
    eta = np.zeros((n, K))
    eta[:, [c for c in range(K) if c != reference]] = rng.normal(0, 0.1, K - 1) if effects is None else 0.0
    for col, coef in (effects or {}).items():
        if "[" in col:
            name, lv = col[:-1].split("[")
            xcol = np.array([v == lv for v in cells[name]], dtype=float)
        elif col == "(intercept)":
            xcol = np.ones(n)
        else:
            xcol = np.asarray(cells[col], dtype=float)
        c = np.asarray(coef, dtype=float).copy()
        c[reference] = 0.0
        eta += xcol[:, None] * c[None, :]
    p = np.exp(eta - eta.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    u = rng.random(n)
    labels = np.minimum((u[:, None] > np.cumsum(p, axis=1)).sum(axis=1), K - 1)
    return table, labels


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def criterion_log():
    """Collects one verdict line per acceptance criterion for the terminal summary."""
    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

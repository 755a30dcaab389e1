"""Hard assignment and model-adequacy criteria for a fitted trajectory mixture.

Three criteria are checked per group: average posterior probability of
assigned members (AvePP >= 0.7), odds of correct classification
(OCC >= 5), and agreement between the estimated mixing proportion and the
share of subjects actually assigned to the group.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .gbtm.model import FittedModel, PosteriorMatrix

AVEPP_MIN = 0.7
OCC_MIN = 5.0
PREVALENCE_TOL = 0.02
TIE_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Assignment:
    subject_ids: tuple[str, ...]
    groups: np.ndarray
    tie_flags: np.ndarray
    n_groups: int

    def counts(self) -> np.ndarray:
        return np.bincount(self.groups, minlength=self.n_groups)

    def proportions(self) -> np.ndarray:
        return self.counts() / max(len(self.groups), 1)

    def as_dict(self) -> dict[str, int]:
        return dict(zip(self.subject_ids, self.groups.tolist()))


def assign(posterior: PosteriorMatrix, tie_tol: float = TIE_TOL) -> Assignment:
    """Row-wise argmax; ties go to the lower group index and are flagged."""
    p = posterior.probs
    groups = np.argmax(p, axis=1)
    if p.shape[1] > 1:
        top2 = np.sort(p, axis=1)[:, -2:]
        ties = (top2[:, 1] - top2[:, 0]) <= tie_tol
    else:
        ties = np.zeros(p.shape[0], dtype=bool)
    return Assignment(posterior.subject_ids, groups, ties, p.shape[1])


def avepp(posterior: PosteriorMatrix, assignment: Assignment) -> np.ndarray:
    """Mean own-group posterior among members; NaN for groups with no members."""
    p = posterior.probs
    out = np.full(p.shape[1], np.nan)
    for k in range(p.shape[1]):
        members = assignment.groups == k
        if members.any():
            out[k] = p[members, k].mean()
    return out


def occ(avepp_k: float, pi_hat_k: float) -> float:
    """Odds of correct classification; ``inf`` when AvePP is 1."""
    if not 0.0 < pi_hat_k < 1.0:
        raise ValueError(f"estimated prevalence must lie in (0, 1), got {pi_hat_k}")
    if avepp_k >= 1.0:
        return math.inf
    return (avepp_k / (1.0 - avepp_k)) / (pi_hat_k / (1.0 - pi_hat_k))


@dataclass(frozen=True)
class PrevalenceCheck:
    estimated: np.ndarray
    assigned: np.ndarray
    differences: np.ndarray
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.all(np.abs(self.differences) <= self.tolerance))


def prevalence_check(model: FittedModel, assignment: Assignment, tolerance: float = PREVALENCE_TOL) -> PrevalenceCheck:
    est = np.asarray(model.pi, dtype=float)
    got = assignment.proportions()
    return PrevalenceCheck(est, got, got - est, tolerance)


@dataclass(frozen=True)
class GroupAdequacy:
    group: int
    n_assigned: int
    pi_hat: float
    assigned_proportion: float
    avepp: float
    occ: float
    avepp_ok: bool
    occ_ok: bool
    prevalence_ok: bool


@dataclass(frozen=True, eq=False)
class AdequacyReport:
    groups: tuple[GroupAdequacy, ...]
    avepp_min: float
    occ_min: float
    prevalence_tol: float
    n_ties: int

    @property
    def avepp_pass(self) -> bool:
        return all(g.avepp_ok for g in self.groups)

    @property
    def occ_pass(self) -> bool:
        return all(g.occ_ok for g in self.groups)

    @property
    def prevalence_pass(self) -> bool:
        return all(g.prevalence_ok for g in self.groups)

    @property
    def passed(self) -> bool:
        return self.avepp_pass and self.occ_pass and self.prevalence_pass

    def to_dict(self) -> dict:
        def num(x):
            if isinstance(x, float) and math.isinf(x):
                return "inf"
            if isinstance(x, float) and math.isnan(x):
                return None
            return x

        return {
            "thresholds": {"avepp_min": self.avepp_min, "occ_min": self.occ_min,
                           "prevalence_tol": self.prevalence_tol},
            "groups": [
                {
                    "group": g.group + 1,
                    "n_assigned": g.n_assigned,
                    "pi_hat": g.pi_hat,
                    "assigned_proportion": g.assigned_proportion,
                    "avepp": num(g.avepp),
                    "occ": num(g.occ),
                    "avepp_ok": g.avepp_ok,
                    "occ_ok": g.occ_ok,
                    "prevalence_ok": g.prevalence_ok,
                }
                for g in self.groups
            ],
            "verdicts": {"avepp": self.avepp_pass, "occ": self.occ_pass,
                         "prevalence": self.prevalence_pass, "overall": self.passed},
            "n_ties": self.n_ties,
        }

    def to_table(self) -> str:
        head = f"{'group':>5} {'n':>6} {'pi_hat':>7} {'assigned':>8} {'AvePP':>6} {'OCC':>8}  checks"
        lines = [head, "-" * len(head)]
        for g in self.groups:
            occ_s = "inf" if math.isinf(g.occ) else ("n/a" if math.isnan(g.occ) else f"{g.occ:8.2f}")
            av_s = "n/a" if math.isnan(g.avepp) else f"{g.avepp:6.3f}"
            flags = "".join("+" if ok else "-" for ok in (g.avepp_ok, g.occ_ok, g.prevalence_ok))
            lines.append(f"{g.group + 1:>5} {g.n_assigned:>6} {g.pi_hat:7.3f} {g.assigned_proportion:8.3f} "
                         f"{av_s:>6} {occ_s:>8}  {flags}")
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"AvePP>={self.avepp_min}: {self.avepp_pass}  OCC>={self.occ_min}: {self.occ_pass}  "
                     f"|pi_hat-assigned|<={self.prevalence_tol}: {self.prevalence_pass}  overall: {verdict}")
        return "\n".join(lines)


def adequacy(
    model: FittedModel,
    posterior: PosteriorMatrix,
    assignment: Assignment | None = None,
    avepp_min: float = AVEPP_MIN,
    occ_min: float = OCC_MIN,
    prevalence_tol: float = PREVALENCE_TOL,
) -> AdequacyReport:
    assignment = assignment or assign(posterior)
    app = avepp(posterior, assignment)
    chk = prevalence_check(model, assignment, prevalence_tol)
    counts = assignment.counts()
    rows = []
    for k in range(model.n_groups):
        pi_k = float(model.pi[k])
        if np.isnan(app[k]):
            o = math.nan
        elif model.n_groups == 1:
            o = math.inf
        else:
            o = occ(float(app[k]), pi_k)
        rows.append(
            GroupAdequacy(
                group=k,
                n_assigned=int(counts[k]),
                pi_hat=pi_k,
                assigned_proportion=float(chk.assigned[k]),
                avepp=float(app[k]),
                occ=float(o),
                avepp_ok=bool(app[k] >= avepp_min),
                occ_ok=bool(o >= occ_min),
                prevalence_ok=bool(abs(chk.differences[k]) <= prevalence_tol),
            )
        )
    return AdequacyReport(tuple(rows), avepp_min, occ_min, prevalence_tol, int(assignment.tie_flags.sum()))

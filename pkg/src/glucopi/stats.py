"""Cohort-level statistics over fitted excursion parameters.

Subjects contribute different numbers of excursions, so per-subject
parameter values are first collapsed to bootstrap means (resampling
excursions with replacement, seeded per subject for reproducibility).
Cohort cells aggregate those subject means by study and excursion kind;
normality is judged by the Shapiro-Wilk test on standard-normalized
subject means, with the hypoglycemic delay scale additionally checked on
a log axis where it is expected to be log-normal.
"""

from __future__ import annotations

import hashlib
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .fit import FitResult
from .shapiro import shapiro_wilk

__all__ = [
    "PARAMETERS",
    "CohortRow",
    "CohortTable",
    "bootstrap_subject_means",
    "build_cohort",
    "normality_report",
    "g_range",
]

PARAMETERS = ("a1", "a2", "lam")

BOOTSTRAP_RESAMPLES_DEFAULT = 10_000

# Log-normal checks use base-10 logs so the reported magnitudes match the
# per-minute rate read directly (lam ~ 0.04 -> log_lam ~ -1.4).
LOG_BASE = 10.0

MIN_SUBJECTS = 3


def _subject_rng(subject_id: str, seed: int) -> np.random.Generator:
    digest = hashlib.sha256(subject_id.encode()).digest()
    key = int.from_bytes(digest[:8], "big")
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, key]))


def bootstrap_subject_means(
    fits_by_subject: Mapping[str, Sequence[FitResult]],
    resamples: int = BOOTSTRAP_RESAMPLES_DEFAULT,
    seed: int = 0,
) -> dict[str, dict[str, float]]:
    """Per-subject bootstrap means of each fitted parameter.

    For every subject the excursion values are resampled with replacement
    ``resamples`` times and the mean of the resample means is reported.
    The resampling stream is keyed to the subject id (not the excursion
    order), and values are canonicalized by sorting, so permuting a
    subject's excursions cannot change the output.
    """
    if not fits_by_subject:
        raise ValueError("no subjects to bootstrap")
    if resamples < 1:
        raise ValueError(f"resamples must be >= 1, got {resamples}")
    out: dict[str, dict[str, float]] = {}
    for subject in sorted(fits_by_subject):
        fits = fits_by_subject[subject]
        if not fits:
            raise ValueError(f"subject {subject!r} has no fits")
        n = len(fits)
        rng = _subject_rng(subject, seed)
        idx = rng.integers(0, n, size=(resamples, n))
        means: dict[str, float] = {}
        for param in PARAMETERS:
            vals = np.sort(np.array([getattr(f.params, param) for f in fits]))
            if n == 1:
                means[param] = float(vals[0])
            else:
                means[param] = float(vals[idx].mean(axis=1).mean())
        out[subject] = means
    return out


@dataclass(frozen=True)
class CohortRow:
    study: str
    kind: str
    parameter: str
    mean: float
    sd: float
    count: int
    cov: float
    p_value: float | None = None


@dataclass(frozen=True)
class CohortTable:
    """Aggregated cohort grid plus the per-subject means behind it.

    ``subject_means[(subject, kind)]`` maps parameter name to that
    subject's bootstrap mean; rows carry one (study, kind, parameter)
    cell each, with "overall" rows aggregating every study.  Counts are
    numbers of contributing subjects, never excursions.
    """

    rows: tuple[CohortRow, ...]
    subject_means: dict[tuple[str, str], dict[str, float]]
    study_of: dict[str, str]
    resamples: int
    seed: int

    def cell(self, study: str, kind: str, parameter: str) -> CohortRow:
        for row in self.rows:
            if (row.study, row.kind, row.parameter) == (study, kind, parameter):
                return row
        raise KeyError((study, kind, parameter))

    def scatter_rows(self) -> list[tuple[str, str, float, float]]:
        """(subject, kind, a1_mean, a2_mean) rows for the clustering scatter."""
        return [(subject, kind, means["a1"], means["a2"])
                for (subject, kind), means in sorted(self.subject_means.items())]


def _kind_groups(fits: Iterable[FitResult]) -> dict[str, dict[str, list[FitResult]]]:
    groups: dict[str, dict[str, list[FitResult]]] = {"peak": defaultdict(list),
                                                     "trough": defaultdict(list)}
    for f in fits:
        groups[f.kind][f.subject_id].append(f)
    return groups


def build_cohort(
    fits: Sequence[FitResult],
    study_of: Mapping[str, str] | None = None,
    resamples: int = BOOTSTRAP_RESAMPLES_DEFAULT,
    seed: int = 0,
) -> CohortTable:
    """Cohort grid from a batch of fits.

    ``study_of`` maps subject ids to study labels; unmapped subjects fall
    into "unlabelled".  Requires at least one fit.
    """
    if not fits:
        raise ValueError("no fits supplied")
    study_map = dict(study_of or {})
    subject_means: dict[tuple[str, str], dict[str, float]] = {}
    rows: list[CohortRow] = []
    for kind, by_subject in _kind_groups(fits).items():
        if not by_subject:
            continue
        means = bootstrap_subject_means(by_subject, resamples=resamples, seed=seed)
        for subject, m in means.items():
            subject_means[(subject, kind)] = dict(m)
            if kind == "trough":
                subject_means[(subject, kind)]["log_lam"] = math.log(m["lam"], LOG_BASE)
        studies = sorted({study_map.get(s, "unlabelled") for s in means})
        params = list(PARAMETERS) + (["log_lam"] if kind == "trough" else [])
        p_values = _normality_p_values(subject_means, kind)
        for study in studies + ["overall"]:
            subjects = [s for s in means
                        if study == "overall" or study_map.get(s, "unlabelled") == study]
            for param in params:
                vals = np.array([subject_means[(s, kind)][param] for s in subjects])
                mean = float(vals.mean())
                sd = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
                rows.append(CohortRow(
                    study=study, kind=kind, parameter=param,
                    mean=mean, sd=sd, count=len(vals),
                    cov=abs(sd / mean) if mean != 0 else math.inf,
                    p_value=p_values.get(param) if study == "overall" else None,
                ))
    return CohortTable(rows=tuple(rows), subject_means=subject_means,
                       study_of=study_map, resamples=resamples, seed=seed)


def _normality_p_values(subject_means: dict[tuple[str, str], dict[str, float]],
                        kind: str) -> dict[str, float]:
    by_param: dict[str, list[float]] = defaultdict(list)
    for (subject, k), means in subject_means.items():
        if k == kind:
            for param, val in means.items():
                by_param[param].append(val)
    out: dict[str, float] = {}
    for param, vals in by_param.items():
        if len(vals) < MIN_SUBJECTS:
            continue
        arr = np.asarray(vals)
        if arr.std() == 0:
            continue
        z = (arr - arr.mean()) / arr.std(ddof=1)
        out[param] = shapiro_wilk(z).pvalue
    return out


def normality_report(cohort: CohortTable) -> dict[tuple[str, str], float]:
    """Shapiro-Wilk p-values per (kind, parameter) on normalized subject means.

    Subject means are standardized to zero mean and unit variance before
    testing (W itself is affine-invariant, so this changes nothing but
    keeps the reported pipeline explicit); hypoglycemic fits also test the
    base-10 log of the delay scale.  Requires >= 3 subjects per cell and
    non-constant values.
    """
    out: dict[tuple[str, str], float] = {}
    for kind in ("peak", "trough"):
        vals_by_param: dict[str, list[float]] = defaultdict(list)
        for (subject, k), means in cohort.subject_means.items():
            if k == kind:
                for param, val in means.items():
                    vals_by_param[param].append(val)
        for param, vals in vals_by_param.items():
            if not vals:
                continue
            if len(vals) < MIN_SUBJECTS:
                raise ValueError(
                    f"normality test needs >= {MIN_SUBJECTS} subjects for "
                    f"{kind}/{param}, got {len(vals)}")
            arr = np.asarray(vals)
            sd = arr.std(ddof=1)
            if sd == 0:
                raise ValueError(f"constant subject means for {kind}/{param}")
            z = (arr - arr.mean()) / sd
            out[(kind, param)] = shapiro_wilk(z).pvalue
    return out


def g_range(fits: Sequence[FitResult]) -> tuple[float, float]:
    """Extrema of the net input g(t) = -a3 + F(t) over all fitted pulses.

    Far from its pulse every F decays to zero, so each fit contributes the
    interval between -a3 and -a3 + amplitude; the cohort range is the
    union's envelope.
    """
    if not fits:
        raise ValueError("no fits supplied")
    g_min = math.inf
    g_max = -math.inf
    for f in fits:
        amp = f.pulse.amplitude
        g_min = min(g_min, -f.params.a3 + min(0.0, amp))
        g_max = max(g_max, -f.params.a3 + max(0.0, amp))
    return g_min, g_max

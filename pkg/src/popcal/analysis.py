"""Cohort formation, group-level reports, significance tests, genre profiles."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .dataset import ItemCatalog, RatingsTable, _scalar
from .metrics import UserAudit, popularity_lift
from .recommenders.base import RecommendationSet

_log = logging.getLogger(__name__)

ALPHA = 0.05


class ReportError(ValueError):
    pass


@dataclass(frozen=True)
class Cohort:
    label: str
    members: tuple
    mean_profile_gap: float

    def __len__(self) -> int:
        return len(self.members)


def form_cohorts(profile_gaps: Mapping, k: int = 10) -> list[Cohort]:
    """Split users into ``k`` contiguous blocks by ascending profile popularity.

    Ties in popularity fall back to ascending user id. When the count does
    not divide evenly, the lowest-popularity blocks take one extra user.
    """
    if k < 2:
        raise ValueError("need at least 2 cohorts")
    if len(profile_gaps) < k:
        raise ValueError(f"cannot form {k} cohorts from {len(profile_gaps)} users")
    ordered = sorted(profile_gaps, key=lambda u: (profile_gaps[u], u))
    base, extra = divmod(len(ordered), k)
    cohorts = []
    start = 0
    for g in range(k):
        size = base + (1 if g < extra else 0)
        members = tuple(ordered[start : start + size])
        start += size
        gap = float(np.mean([profile_gaps[u] for u in members]))
        cohorts.append(Cohort(f"G{g + 1}", members, gap))
    return cohorts


@dataclass(frozen=True)
class CohortRow:
    algorithm: str
    cohort: str
    n: int
    gap_p: float
    gap_q: float
    pl: float
    mc_mean: float
    precision_mean: float


@dataclass(frozen=True)
class SignificanceResult:
    welch_p: float
    mannwhitney_p: float

    @property
    def significant(self) -> bool:
        return self.welch_p < ALPHA


@dataclass(frozen=True)
class SignificanceRow:
    algorithm: str
    metric: str
    g_low: str
    g_high: str
    result: SignificanceResult


@dataclass
class CohortReport:
    rows: list[CohortRow] = field(default_factory=list)
    significance: list[SignificanceRow] = field(default_factory=list)

    @property
    def algorithms(self) -> list[str]:
        return list(dict.fromkeys(r.algorithm for r in self.rows))

    def row(self, algorithm: str, cohort: str) -> CohortRow:
        for r in self.rows:
            if r.algorithm == algorithm and r.cohort == cohort:
                return r
        raise KeyError((algorithm, cohort))

    def for_algorithm(self, algorithm: str) -> list[CohortRow]:
        return [r for r in self.rows if r.algorithm == algorithm]

    def test(self, algorithm: str, metric: str) -> SignificanceRow:
        for s in self.significance:
            if s.algorithm == algorithm and s.metric == metric:
                return s
        raise KeyError((algorithm, metric))

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["algorithm", "cohort", "n", "gap_p", "gap_q", "pl", "mc_mean", "precision_mean"])
        for r in self.rows:
            w.writerow([r.algorithm, r.cohort, r.n, _fmt(r.gap_p), _fmt(r.gap_q), _fmt(r.pl),
                        _fmt(r.mc_mean), _fmt(r.precision_mean)])
        return out.getvalue()

    def significance_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["algorithm", "metric", "g_low", "g_high", "welch_p", "mannwhitney_p",
                    "significant_at_0.05"])
        for s in self.significance:
            w.writerow([s.algorithm, s.metric, s.g_low, s.g_high, _fmt(s.result.welch_p),
                        _fmt(s.result.mannwhitney_p), str(s.result.significant).lower()])
        return out.getvalue()


def _fmt(x: float) -> str:
    return "" if x is None or math.isnan(x) else repr(float(x))


def welch_t_test(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Two-sided Welch unequal-variance t-test; returns ``(t, p)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each sample needs at least 2 values")
    va = a.var(ddof=1) / len(a)
    vb = b.var(ddof=1) / len(b)
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0:
        return (0.0, 1.0) if diff == 0 else (math.copysign(math.inf, diff), 0.0)
    t = diff / math.sqrt(se2)
    # Welch-Satterthwaite, written in variance shares so tiny variances cannot underflow
    ra, rb = va / se2, vb / se2
    df = 1.0 / (ra * ra / (len(a) - 1) + rb * rb / (len(b) - 1))
    return float(t), float(2.0 * stats.t.sf(abs(t), df))


def significance_test(sample_a: Sequence[float], sample_b: Sequence[float]) -> SignificanceResult:
    """Welch t-test p-value, with a two-sided Mann-Whitney U p-value alongside.

    Samples with no spread at all (every value in both identical) give p = 1.
    The Welch p-value is NaN, and never significant, when a side has fewer
    than 2 values.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("significance test needs two non-empty samples")
    both = np.concatenate([a, b])
    if (both == both[0]).all():
        return SignificanceResult(1.0, 1.0)
    p = welch_t_test(a, b)[1] if min(len(a), len(b)) >= 2 else math.nan
    u = stats.mannwhitneyu(a, b, alternative="two-sided")
    return SignificanceResult(p, float(u.pvalue))


def cohort_report(
    cohorts: Sequence[Cohort],
    audits: Mapping[str, Iterable[UserAudit]],
) -> CohortReport:
    """Group-level GAP, lift, MC and precision per (algorithm, cohort).

    ``audits`` maps algorithm name to its per-user audits; algorithms are
    reported in mapping order. The extreme cohorts are compared with
    :func:`significance_test` on per-user lift and per-user MC.
    """
    report = CohortReport()
    for algorithm, user_audits in audits.items():
        by_user = {a.user: a for a in user_audits}
        per_cohort = []
        for c in cohorts:
            if not c.members:
                raise ReportError(f"cohort {c.label} is empty")
            missing = [u for u in c.members if u not in by_user]
            if missing:
                raise ReportError(f"{algorithm}: no audit for users {missing[:5]} in {c.label}")
            members = [by_user[u] for u in c.members]
            per_cohort.append(members)
            gap_p = float(np.mean([a.profile_gap for a in members]))
            gap_q = float(np.mean([a.rec_gap for a in members]))
            precs = [a.precision for a in members if a.precision is not None]
            report.rows.append(
                CohortRow(
                    algorithm,
                    c.label,
                    len(members),
                    gap_p,
                    gap_q,
                    popularity_lift(gap_q, gap_p),
                    float(np.mean([a.mc for a in members])),
                    float(np.mean(precs)) if precs else math.nan,
                )
            )
        low, high = per_cohort[0], per_cohort[-1]
        for metric, get in (("pl", lambda a: a.lift), ("mc", lambda a: a.mc)):
            result = significance_test([get(a) for a in low], [get(a) for a in high])
            report.significance.append(
                SignificanceRow(algorithm, metric, cohorts[0].label, cohorts[-1].label, result)
            )
    return report


@dataclass(frozen=True)
class GenreFrequencyProfile:
    source: str
    freq: dict[str, float]
    counts: dict[str, int]

    def __getitem__(self, genre: str) -> float:
        return self.freq[genre]

    def top(self) -> str:
        return max(self.freq, key=lambda g: (self.freq[g], -list(self.freq).index(g)))


def _interaction_items(source) -> list:
    if isinstance(source, RatingsTable):
        return [_scalar(i) for i in source.items]
    if isinstance(source, RecommendationSet):
        return [_scalar(i) for i in source.items]
    return list(source)


def genre_frequency(source, catalog: ItemCatalog, tag: str | None = None) -> GenreFrequencyProfile:
    """Genre shares over all interactions (or recommendation slots) in ``source``.

    Each interaction adds mass 1 split evenly over its item's genres.
    ``counts`` are unsplit: the number of interactions touching each genre.
    """
    items = _interaction_items(source)
    if not items:
        raise ValueError("genre frequency of an empty source")
    if tag is None:
        tag = "ratings" if isinstance(source, RatingsTable) else "recommendations"
    mass = {c: 0.0 for c in catalog.categories}
    counts = {c: 0 for c in catalog.categories}
    for item in items:
        labels = catalog.items[item]
        for c in labels:
            mass[c] += 1.0 / len(labels)
            counts[c] += 1
    total = math.fsum(mass.values())
    return GenreFrequencyProfile(tag, {c: m / total for c, m in mass.items()}, counts)


def amplification_profile(
    ratings_profile: GenreFrequencyProfile, rec_profile: GenreFrequencyProfile
) -> dict[str, float | None]:
    """Relative change of each genre's share, ``None`` where the rating share is 0."""
    if set(ratings_profile.freq) != set(rec_profile.freq):
        raise ValueError("profiles cover different genre sets")
    out: dict[str, float | None] = {}
    for g, base in ratings_profile.freq.items():
        out[g] = None if base == 0 else (rec_profile.freq[g] - base) / base
    return out


def genre_frequency_csv(profiles: Sequence[GenreFrequencyProfile]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["source", "genre", "proportion", "count"])
    for p in profiles:
        for g, v in p.freq.items():
            w.writerow([p.source, g, repr(float(v)), p.counts[g]])
    return out.getvalue()

"""Per-user and per-group audit quantities: calibration, popularity, precision."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataset import ItemCatalog, PopularityIndex, RatingsTable, _scalar, coerce_ids, popularity
from .recommenders.base import RecommendationSet, SchemaError

_log = logging.getLogger(__name__)


class UndefinedDistributionError(ValueError):
    pass


class UndefinedLiftError(ZeroDivisionError):
    pass


@dataclass(frozen=True, eq=False)
class CategoryDistribution:
    categories: tuple[str, ...]
    mass: np.ndarray

    def __getitem__(self, category: str) -> float:
        return float(self.mass[self.categories.index(category)])

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.categories, map(float, self.mass)))

    @classmethod
    def from_mapping(cls, mass: Mapping[str, float], categories: Sequence[str] | None = None):
        cats = tuple(categories) if categories is not None else tuple(mass)
        return cls(cats, np.array([float(mass.get(c, 0.0)) for c in cats]))


def category_distribution(items: Iterable, catalog: ItemCatalog) -> CategoryDistribution:
    """Share of category mass over ``items``.

    Each item carries weight ``1/len(items)``, split evenly across its
    categories, so the result always sums to 1 even for multi-genre items.
    """
    items = list(items)
    if not items:
        raise UndefinedDistributionError("category distribution of an empty item set")
    mass = catalog.mass_matrix(items).mean(axis=0)
    return CategoryDistribution(catalog.categories, mass)


def hellinger(p, q) -> float:
    """||sqrt(p) - sqrt(q)||_2 / sqrt(2) for distributions over the same categories."""
    if isinstance(p, CategoryDistribution) or isinstance(q, CategoryDistribution):
        if not (isinstance(p, CategoryDistribution) and isinstance(q, CategoryDistribution)):
            raise ValueError("cannot mix CategoryDistribution with raw vectors")
        if p.categories != q.categories:
            raise ValueError("distributions are over different category universes")
        p, q = p.mass, q.mass
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    if (p < 0).any() or (q < 0).any():
        raise ValueError("distributions must be non-negative")
    d = np.sqrt(p) - np.sqrt(q)
    return float(min(1.0, math.sqrt(float(d @ d) / 2.0)))


def miscalibration(profile: Iterable, recommendations: Iterable, catalog: ItemCatalog) -> float:
    recs = list(recommendations)
    if not recs:
        raise UndefinedDistributionError("empty recommendation list")
    return hellinger(category_distribution(profile, catalog), category_distribution(recs, catalog))


def mean_popularity(items: Sequence, theta: PopularityIndex) -> float:
    if len(items) == 0:
        raise ValueError("mean popularity of an empty list")
    return float(np.mean([theta[i] for i in items]))


def group_gap(users: Iterable, item_lists: Mapping, theta: PopularityIndex) -> float:
    """Mean over users of the mean popularity of each user's list (mean of means)."""
    users = list(users)
    if not users:
        raise ValueError("group average popularity of an empty group")
    return float(np.mean([mean_popularity(item_lists[u], theta) for u in users]))


def popularity_lift(gap_q: float, gap_p: float) -> float:
    if gap_p == 0:
        raise UndefinedLiftError("popularity lift undefined for zero profile popularity")
    return (gap_q - gap_p) / gap_p


def precision_at_n(recommended: Sequence, relevant: Iterable, n: int | None = None) -> float:
    """Share of the ``n`` list slots holding a relevant item; ``n`` defaults to the list length."""
    n = len(recommended) if n is None else n
    if n < 1:
        raise ValueError("precision needs n >= 1")
    rel = set(relevant)
    return sum(1 for i in recommended if i in rel) / n


@dataclass(frozen=True)
class UserAudit:
    user: object
    p_u: CategoryDistribution | None
    q_u: CategoryDistribution | None
    mc: float
    profile_gap: float
    rec_gap: float
    precision: float | None
    n_profile: int
    n_recs: int

    @property
    def lift(self) -> float:
        return popularity_lift(self.rec_gap, self.profile_gap)


@dataclass(frozen=True)
class AuditResult:
    audits: list[UserAudit]
    skipped: dict  # user -> reason

    def by_user(self) -> dict:
        return {a.user: a for a in self.audits}


def audit_users(
    train: RatingsTable,
    test: RatingsTable | None,
    recs: RecommendationSet,
    catalog: ItemCatalog,
    theta: PopularityIndex | None = None,
    relevance_threshold: float | None = None,
    keep_distributions: bool = False,
) -> AuditResult:
    """Audit every user appearing in ``recs`` against their training profile.

    Precision is ``None`` for users with no relevant test interactions.
    """
    theta = popularity(train) if theta is None else theta
    lists = recs.lists
    item_pos = {}
    all_items = list(train.item_ids) + [i for il in lists.values() for i in il]
    for it in all_items:
        item_pos.setdefault(_scalar(it), len(item_pos))
    universe = list(item_pos)
    mass = catalog.mass_matrix(universe)
    th = np.array([theta[i] for i in universe])

    relevant: dict = {}
    if test is not None:
        keep = np.ones(len(test), dtype=bool)
        if relevance_threshold is not None:
            keep = test.values >= relevance_threshold
        for u, i in zip(test.users[keep], test.items[keep]):
            relevant.setdefault(_scalar(u), set()).add(_scalar(i))

    audits = []
    skipped = {}
    profiles = train.user_index
    for user, rec_items in lists.items():
        if user not in profiles:
            skipped[user] = "user not in training data"
            continue
        if not rec_items:
            skipped[user] = "empty recommendation list"
            continue
        prof = [item_pos[_scalar(i)] for i in profiles[user]]
        rpos = [item_pos[i] for i in rec_items]
        p = mass[prof].mean(axis=0)
        q = mass[rpos].mean(axis=0)
        prec = None
        if user in relevant:
            prec = precision_at_n(rec_items, relevant[user], recs.n)
        audits.append(
            UserAudit(
                user=user,
                p_u=CategoryDistribution(catalog.categories, p) if keep_distributions else None,
                q_u=CategoryDistribution(catalog.categories, q) if keep_distributions else None,
                mc=hellinger(p, q),
                profile_gap=float(th[prof].mean()),
                rec_gap=float(th[rpos].mean()),
                precision=prec,
                n_profile=len(prof),
                n_recs=len(rpos),
            )
        )
    if skipped:
        _log.warning("skipped %d users during audit", len(skipped))
    return AuditResult(audits, skipped)


AUDIT_HEADER = ["user_id", "profile_gap", "rec_gap", "mc", "precision", "n_profile", "n_recs"]


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return repr(float(x))


def audits_to_csv(audits: Sequence[UserAudit]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(AUDIT_HEADER)
    for a in audits:
        w.writerow(
            [a.user, _fmt(a.profile_gap), _fmt(a.rec_gap), _fmt(a.mc), _fmt(a.precision),
             a.n_profile, a.n_recs]
        )
    return out.getvalue()


def read_audits(source) -> list[UserAudit]:
    """Parse a per-user audit CSV written by :func:`audits_to_csv`."""
    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source, encoding="utf-8") as f:
            text = f.read()
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != AUDIT_HEADER:
        raise SchemaError(f"expected header {AUDIT_HEADER}, got {header!r}", 1)
    rows = []
    for row in reader:
        if not row:
            continue
        if len(row) != len(AUDIT_HEADER):
            raise SchemaError(f"expected {len(AUDIT_HEADER)} fields", reader.line_num)
        try:
            rows.append(
                (row[0], float(row[1]), float(row[2]), float(row[3]),
                 float(row[4]) if row[4] else None, int(row[5]), int(row[6]), reader.line_num)
            )
        except ValueError:
            raise SchemaError("non-numeric audit field", reader.line_num) from None
    ids = coerce_ids([r[0] for r in rows]) if rows else []
    return [
        UserAudit(_scalar(u), None, None, r[3], r[1], r[2], r[4], r[5], r[6])
        for u, r in zip(ids, rows)
    ]

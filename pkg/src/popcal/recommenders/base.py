from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator

import numpy as np

from ..dataset import RatingsTable, _scalar, coerce_ids

_log = logging.getLogger(__name__)

ALGORITHMS = ("user-knn", "item-knn", "most-popular", "bmf", "svdpp")
SIMILARITIES = ("pearson", "cosine")

_DEFAULTS = {
    "user-knn": dict(similarity="pearson", neighborhood_size=50),
    "item-knn": dict(similarity="cosine", neighborhood_size=50),
    "most-popular": {},
    "bmf": dict(factors=50, learning_rate=0.005, regularization=0.02, epochs=30),
    "svdpp": dict(factors=30, learning_rate=0.005, regularization=0.02, epochs=20),
}

# rows of users scored at once; bounds the dense score block to ~30 MB on ML-1M
SCORE_BLOCK = 1024


class ConfigError(ValueError):
    """Invalid model or pipeline configuration."""


@dataclass(frozen=True)
class ModelConfig:
    algorithm: str
    neighborhood_size: int | None = None
    similarity: str | None = None
    factors: int | None = None
    learning_rate: float | None = None
    regularization: float | None = None
    epochs: int | None = None
    seed: int = 0

    def resolved(self) -> "ModelConfig":
        """Fill algorithm defaults and validate."""
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(
                f"unknown algorithm {self.algorithm!r}; valid names: {', '.join(ALGORITHMS)}"
            )
        filled = {k: v for k, v in _DEFAULTS[self.algorithm].items() if getattr(self, k) is None}
        cfg = replace(self, **filled)
        cfg._validate()
        return cfg

    def _validate(self) -> None:
        if self.algorithm in ("user-knn", "item-knn"):
            if self.neighborhood_size is None or self.neighborhood_size < 1:
                raise ConfigError("neighborhood_size must be a positive integer")
            if self.similarity not in SIMILARITIES:
                raise ConfigError(f"similarity must be one of {SIMILARITIES}")
        if self.algorithm in ("bmf", "svdpp"):
            if self.epochs is None or self.epochs < 0:
                raise ConfigError("epochs must be a non-negative integer")
            if self.factors is None or self.factors < 0 or (self.factors == 0 and self.epochs > 0):
                raise ConfigError("factors must be a positive integer")
            if not self.learning_rate or self.learning_rate <= 0:
                raise ConfigError("learning_rate must be positive")
            if self.regularization is None or self.regularization < 0:
                raise ConfigError("regularization must be non-negative")

    def relevant(self) -> dict:
        """Only the fields that matter for this algorithm."""
        keys = set(_DEFAULTS[self.algorithm]) | {"algorithm", "seed"}
        return {k: v for k, v in asdict(self).items() if k in keys}


class FittedModel:
    """Base class for trained recommenders.

    Subclasses implement ``score_block`` returning dense scores for a set of
    user codes over every training item column.
    """

    algorithm: str = ""

    def __init__(self, train: RatingsTable, config: ModelConfig):
        self.train = train
        self.config = config

    def score_block(self, user_codes: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def fallback_score(self, user_code: int) -> float:
        raise NotImplementedError

    def score(self, user, item) -> float:
        try:
            u = self.train.user_lookup[_scalar(user)]
        except KeyError:
            raise KeyError(f"user {user!r} not seen in training") from None
        i = self.train.item_lookup.get(_scalar(item))
        if i is None:
            return self.fallback_score(u)
        return float(self.score_block(np.array([u]))[0, i])

    def summary(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "config": self.config.relevant(),
            "train_sha256": self.train.content_hash(),
            "n_users": self.train.n_users,
            "n_items": self.train.n_items,
        }

    @staticmethod
    def _freeze(*arrays: np.ndarray) -> None:
        for a in arrays:
            a.setflags(write=False)


@dataclass(frozen=True)
class RecommendationSet:
    """Per-user ranked lists, stored flat and sorted by (user, rank)."""

    users: np.ndarray
    items: np.ndarray
    ranks: np.ndarray
    scores: np.ndarray
    n: int
    short_users: frozenset = field(default_factory=frozenset)

    def __len__(self) -> int:
        return len(self.items)

    @property
    def lists(self) -> dict:
        """user -> list of recommended item ids in rank order."""
        out: dict = {}
        for u, i in zip(self.users, self.items):
            out.setdefault(_scalar(u), []).append(_scalar(i))
        return out

    def iter_rows(self) -> Iterator[tuple]:
        for u, i, r, s in zip(self.users, self.items, self.ranks, self.scores):
            yield _scalar(u), _scalar(i), int(r), float(s)

    def to_tsv(self) -> str:
        out = io.StringIO()
        out.write("user_id\titem_id\trank\tscore\n")
        for u, i, r, s in self.iter_rows():
            out.write(f"{u}\t{i}\t{r}\t{s!r}\n")
        return out.getvalue()


class SchemaError(ValueError):
    """An input file does not follow its documented schema."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        super().__init__(f"row {row}: {message}" if row is not None else message)


def read_recommendations(source, n: int | None = None) -> RecommendationSet:
    """Parse a ``user_id item_id rank score`` TSV; validates ranks are 1..len per user."""
    if isinstance(source, (bytes, bytearray)):
        text = source.decode("utf-8")
    elif hasattr(source, "read"):
        text = source.read()
        text = text.decode("utf-8") if isinstance(text, bytes) else text
    else:
        with open(source, encoding="utf-8") as f:
            text = f.read()
    reader = csv.reader(io.StringIO(text), delimiter="\t")
    header = next(reader, None)
    if header != ["user_id", "item_id", "rank", "score"]:
        raise SchemaError(f"expected header user_id, item_id, rank, score; got {header!r}", 1)
    users, items, ranks, scores = [], [], [], []
    finished: set[str] = set()
    for row in reader:
        rowno = reader.line_num
        if not row:
            continue
        if len(row) != 4:
            raise SchemaError(f"expected 4 fields, got {len(row)}", rowno)
        try:
            rank = int(row[2])
            score = float(row[3])
        except ValueError:
            raise SchemaError("rank must be an integer and score a number", rowno) from None
        continuing = bool(users) and users[-1] == row[0]
        if not continuing:
            if users:
                finished.add(users[-1])
            if row[0] in finished:
                raise SchemaError(f"rows for user {row[0]!r} are not contiguous", rowno)
        expected = ranks[-1] + 1 if continuing else 1
        if rank != expected:
            raise SchemaError(f"rank {rank} out of sequence (expected {expected})", rowno)
        users.append(row[0])
        items.append(row[1])
        ranks.append(rank)
        scores.append(score)
    user_arr = coerce_ids(users)
    longest = max(ranks) if ranks else 0
    size = n if n is not None else longest
    counts: dict = {}
    for u in user_arr:
        counts[_scalar(u)] = counts.get(_scalar(u), 0) + 1
    short = frozenset(u for u, c in counts.items() if c < size)
    return RecommendationSet(
        user_arr,
        coerce_ids(items),
        np.array(ranks, dtype=np.int64),
        np.array(scores, dtype=np.float64),
        size,
        short,
    )


def recommend_top_n(model: FittedModel, n: int = 10) -> RecommendationSet:
    """Rank every unseen training item per user by descending score.

    Ties go to the smaller item identifier (columns are id-sorted and the
    sort is stable). Users with fewer than ``n`` candidates get a short list
    and are listed in ``short_users``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    train = model.train
    m = train.matrix
    n_users = train.n_users
    out_u, out_i, out_r, out_s = [], [], [], []
    short = []
    for start in range(0, n_users, SCORE_BLOCK):
        codes = np.arange(start, min(start + SCORE_BLOCK, n_users))
        scores = np.array(model.score_block(codes), dtype=np.float64, copy=True)
        if not np.isfinite(scores).all():
            raise FloatingPointError(f"{model.algorithm} produced non-finite scores")
        block = m[codes]
        rows = np.repeat(np.arange(len(codes)), np.diff(block.indptr))
        scores[rows, block.indices] = -np.inf
        order = np.argsort(-scores, axis=1, kind="stable")[:, :n]
        top = np.take_along_axis(scores, order, axis=1)
        for r, u in enumerate(codes):
            keep = np.isfinite(top[r])
            k = int(keep.sum())
            if k < n:
                short.append(_scalar(train.user_ids[u]))
            out_u.append(np.full(k, u))
            out_i.append(order[r, :k])
            out_r.append(np.arange(1, k + 1))
            out_s.append(top[r, :k])
    if out_u:
        uc = np.concatenate(out_u)
        ic = np.concatenate(out_i)
        ranks = np.concatenate(out_r)
        scores = np.concatenate(out_s)
    else:
        uc = ic = ranks = np.zeros(0, dtype=np.int64)
        scores = np.zeros(0)
    if short:
        _log.warning("%d users have fewer than %d candidate items", len(short), n)
    return RecommendationSet(
        train.user_ids[uc], train.item_ids[ic], ranks.astype(np.int64), scores, n, frozenset(short)
    )

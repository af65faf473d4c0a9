"""Rating and item-catalog ingestion, popularity, and reproducible splits."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
import os
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import BinaryIO, Iterable, Mapping, Sequence, Union

import numpy as np
import scipy.sparse as sp

_log = logging.getLogger(__name__)

FORMATS = ("movielens-dat", "csv")
UNKNOWN_CATEGORY = "Unknown"
SPLIT_GENERATOR = "numpy.random.PCG64"

Source = Union[str, os.PathLike, bytes, BinaryIO]

_INT_RE = re.compile(r"^[+-]?\d+$")


class ParseError(ValueError):
    """A malformed input line."""

    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class DataError(ValueError):
    """Input is well-formed but violates a data invariant."""

    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


def _read_text(source: Source, encoding: str) -> str:
    if isinstance(source, (bytes, bytearray)):
        raw = bytes(source)
    elif isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as f:
            raw = f.read()
    else:
        raw = source.read()
        if isinstance(raw, str):
            return raw
    if encoding == "latin-1":
        return raw.decode("latin-1")
    try:
        return raw.decode("utf-8-sig")
    except UnicodeDecodeError:
        return raw.decode("latin-1")


def coerce_ids(raw: Sequence[str]) -> np.ndarray:
    """Integer ids when every token is an integer, strings otherwise."""
    if all(_INT_RE.match(r) for r in raw):
        return np.array([int(r) for r in raw], dtype=np.int64)
    return np.array(raw, dtype=object)


def format_number(x: float) -> str:
    x = float(x)
    if x.is_integer() and abs(x) < 2**53:
        return str(int(x))
    return repr(x)


@dataclass(frozen=True, eq=False)
class Rating:
    user: object
    item: object
    value: float
    timestamp: int | None = None


@dataclass(frozen=True, eq=False)
class RatingsTable:
    """Explicit ratings held as parallel arrays in input order.

    Users and items are indexed in ascending identifier order, so an item's
    column index doubles as its deterministic tie-break rank.
    """

    users: np.ndarray
    items: np.ndarray
    values: np.ndarray
    timestamps: np.ndarray | None = None

    def __post_init__(self):
        for name in ("users", "items", "values", "timestamps"):
            arr = getattr(self, name)
            if arr is not None:
                arr.setflags(write=False)
        if not (len(self.users) == len(self.items) == len(self.values)):
            raise ValueError("ratings arrays must have equal length")

    def __getstate__(self):
        # derived indices are rebuilt on demand
        return {k: getattr(self, k) for k in ("users", "items", "values", "timestamps")}

    def __setstate__(self, state):
        for k, v in state.items():
            object.__setattr__(self, k, v)

    @classmethod
    def from_records(cls, records: Iterable[tuple]) -> "RatingsTable":
        """Build from ``(user, item, value[, timestamp])`` tuples."""
        records = list(records)
        users = coerce_ids([str(r[0]) for r in records])
        items = coerce_ids([str(r[1]) for r in records])
        values = np.array([float(r[2]) for r in records], dtype=np.float64)
        ts = None
        if records and all(len(r) > 3 and r[3] is not None for r in records):
            ts = np.array([int(r[3]) for r in records], dtype=np.int64)
        table = cls(users, items, values, ts)
        table.check_unique()
        return table

    def __len__(self) -> int:
        return len(self.values)

    def __iter__(self):
        for k in range(len(self)):
            yield self.record(k)

    def record(self, k: int) -> Rating:
        ts = None if self.timestamps is None else int(self.timestamps[k])
        return Rating(_scalar(self.users[k]), _scalar(self.items[k]), float(self.values[k]), ts)

    @cached_property
    def _user_codes(self) -> tuple[np.ndarray, np.ndarray]:
        return np.unique(self.users, return_inverse=True)

    @cached_property
    def _item_codes(self) -> tuple[np.ndarray, np.ndarray]:
        return np.unique(self.items, return_inverse=True)

    @property
    def user_ids(self) -> np.ndarray:
        return self._user_codes[0]

    @property
    def item_ids(self) -> np.ndarray:
        return self._item_codes[0]

    @property
    def user_codes(self) -> np.ndarray:
        return self._user_codes[1].reshape(-1)

    @property
    def item_codes(self) -> np.ndarray:
        return self._item_codes[1].reshape(-1)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @cached_property
    def user_lookup(self) -> dict:
        return {_scalar(u): k for k, u in enumerate(self.user_ids)}

    @cached_property
    def item_lookup(self) -> dict:
        return {_scalar(i): k for k, i in enumerate(self.item_ids)}

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        """User x item CSR matrix of rating values, columns sorted."""
        m = sp.csr_matrix(
            (self.values, (self.user_codes, self.item_codes)),
            shape=(self.n_users, self.n_items),
        )
        m.sort_indices()
        return m

    @cached_property
    def user_index(self) -> dict:
        """user -> array of rated item ids (the user's profile)."""
        m = self.matrix
        return {
            _scalar(u): self.item_ids[m.indices[m.indptr[k] : m.indptr[k + 1]]]
            for k, u in enumerate(self.user_ids)
        }

    @cached_property
    def item_index(self) -> dict:
        """item -> array of user ids who rated it."""
        m = self.matrix.tocsc()
        m.sort_indices()
        return {
            _scalar(i): self.user_ids[m.indices[m.indptr[k] : m.indptr[k + 1]]]
            for k, i in enumerate(self.item_ids)
        }

    def profile_codes(self, user_code: int) -> np.ndarray:
        m = self.matrix
        return m.indices[m.indptr[user_code] : m.indptr[user_code + 1]]

    def first_duplicate(self) -> int | None:
        """Row of the first repeated (user, item) pair, if any."""
        if len(self) == 0:
            return None
        key = self.user_codes.astype(np.int64) * self.n_items + self.item_codes
        order = np.argsort(key, kind="stable")
        repeats = order[1:][key[order][1:] == key[order][:-1]]
        return int(repeats.min()) if len(repeats) else None

    def check_unique(self) -> None:
        row = self.first_duplicate()
        if row is not None:
            raise DataError(
                f"duplicate rating for user {self.users[row]!r}, item {self.items[row]!r}"
            )

    def subset(self, rows: np.ndarray) -> "RatingsTable":
        ts = None if self.timestamps is None else self.timestamps[rows]
        return RatingsTable(self.users[rows], self.items[rows], self.values[rows], ts)

    def equals(self, other: "RatingsTable") -> bool:
        if len(self) != len(other):
            return False
        same_ts = (self.timestamps is None) == (other.timestamps is None)
        if same_ts and self.timestamps is not None:
            same_ts = np.array_equal(self.timestamps, other.timestamps)
        return (
            same_ts
            and np.array_equal(self.users, other.users)
            and np.array_equal(self.items, other.items)
            and np.array_equal(self.values, other.values)
        )

    def to_csv(self) -> str:
        """Canonical CSV serialisation, rows in stored order."""
        out = io.StringIO()
        has_ts = self.timestamps is not None
        out.write("user_id,item_id,rating,timestamp\n" if has_ts else "user_id,item_id,rating\n")
        w = csv.writer(out, lineterminator="\n")
        for k in range(len(self)):
            row = [self.users[k], self.items[k], format_number(self.values[k])]
            if has_ts:
                row.append(int(self.timestamps[k]))
            w.writerow(row)
        return out.getvalue()

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_csv().encode("utf-8")).hexdigest()


def _scalar(x):
    return x.item() if isinstance(x, np.generic) else x


def parse_ratings(
    source: Source,
    format: str = "movielens-dat",
    scale: tuple[float, float] | None = (1.0, 5.0),
) -> RatingsTable:
    """Parse a ratings file into a RatingsTable.

    ``scale`` is the inclusive declared rating range; ``None`` disables the check.
    """
    if format not in FORMATS:
        raise ValueError(f"unknown ratings format {format!r}; expected one of {FORMATS}")
    text = _read_text(source, "latin-1" if format == "movielens-dat" else "utf-8")
    users: list[str] = []
    items: list[str] = []
    values: list[float] = []
    stamps: list[int | None] = []
    linenos: list[int] = []

    if format == "movielens-dat":
        rows = ((n, line.split("::")) for n, line in enumerate(text.splitlines(), 1))
    else:
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None:
            return RatingsTable(
                np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.float64)
            )
        header = [h.strip() for h in header]
        if header[:3] != ["user_id", "item_id", "rating"] or header[3:] not in ([], ["timestamp"]):
            raise ParseError(f"bad ratings header {header!r}", lineno=1)
        rows = ((reader.line_num, row) for row in reader)

    for lineno, parts in rows:
        if len(parts) == 1 and not parts[0].strip():
            continue
        if len(parts) not in (3, 4):
            raise ParseError(f"expected 3 or 4 fields, got {len(parts)}", lineno)
        u, i, r = (p.strip() for p in parts[:3])
        if not u or not i:
            raise ParseError("empty user or item identifier", lineno)
        try:
            v = float(r)
        except ValueError:
            raise ParseError(f"non-numeric rating {r!r}", lineno) from None
        if not math.isfinite(v):
            raise ParseError(f"non-finite rating {r!r}", lineno)
        if scale is not None and not scale[0] <= v <= scale[1]:
            raise DataError(f"rating {v} outside declared scale {scale}", lineno)
        t = None
        if len(parts) == 4 and parts[3].strip():
            try:
                t = int(parts[3])
            except ValueError:
                raise ParseError(f"bad timestamp {parts[3]!r}", lineno) from None
        users.append(u)
        items.append(i)
        values.append(v)
        stamps.append(t)
        linenos.append(lineno)

    ts = None
    if stamps and all(t is not None for t in stamps):
        ts = np.array(stamps, dtype=np.int64)
    table = RatingsTable(
        coerce_ids(users), coerce_ids(items), np.array(values, dtype=np.float64), ts
    )
    dup = table.first_duplicate()
    if dup is not None:
        raise DataError(
            f"duplicate rating for user {users[dup]!r}, item {items[dup]!r}", linenos[dup]
        )
    _log.info("parsed %d ratings (%d users, %d items)", len(table), table.n_users, table.n_items)
    return table


@dataclass(frozen=True)
class ItemCatalog:
    """Item -> category set, with the category universe in first-seen order."""

    items: Mapping[object, tuple[str, ...]]
    categories: tuple[str, ...]
    titles: Mapping[object, str] = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, items: Mapping[object, Iterable[str]]) -> "ItemCatalog":
        cats: dict[str, None] = {}
        norm = {}
        for item, labels in items.items():
            labels = tuple(dict.fromkeys(labels)) or (UNKNOWN_CATEGORY,)
            norm[item] = labels
            cats.update(dict.fromkeys(labels))
        return cls(norm, tuple(cats))

    def __contains__(self, item) -> bool:
        return item in self.items

    def __len__(self) -> int:
        return len(self.items)

    @cached_property
    def category_position(self) -> dict[str, int]:
        return {c: k for k, c in enumerate(self.categories)}

    def mass_matrix(self, item_ids: Sequence) -> np.ndarray:
        """Rows of per-item category mass, each row split equally and summing to 1."""
        pos = self.category_position
        m = np.zeros((len(item_ids), len(self.categories)))
        for r, item in enumerate(item_ids):
            try:
                labels = self.items[_scalar(item)]
            except KeyError:
                raise KeyError(f"item {item!r} not in catalog") from None
            for c in labels:
                m[r, pos[c]] += 1.0 / len(labels)
        return m


def parse_catalog(source: Source, format: str = "movielens-dat") -> ItemCatalog:
    """Parse an item catalog; genres are pipe-separated labels."""
    if format not in FORMATS:
        raise ValueError(f"unknown catalog format {format!r}; expected one of {FORMATS}")
    text = _read_text(source, "latin-1" if format == "movielens-dat" else "utf-8")
    ids: list[str] = []
    titles: list[str] = []
    genres: list[tuple[str, ...]] = []

    if format == "movielens-dat":
        rows = []
        for n, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            # titles may contain "::"-free colons; genres are always the last field
            head, sep, g = line.rpartition("::")
            mid, sep2, title = head.partition("::")
            if not sep or not sep2:
                raise ParseError("expected MovieID::Title::Genres", n)
            rows.append((n, [mid, title, g]))
    else:
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None:
            return ItemCatalog({}, ())
        header = [h.strip() for h in header]
        if header != ["item_id", "title", "genres"]:
            raise ParseError(f"bad catalog header {header!r}", lineno=1)
        rows = [(reader.line_num, row) for row in reader if any(c.strip() for c in row)]

    seen = set()
    for n, parts in rows:
        if len(parts) != 3:
            raise ParseError(f"expected 3 fields, got {len(parts)}", n)
        item = parts[0].strip()
        if not item:
            raise ParseError("empty item identifier", n)
        if item in seen:
            raise DataError(f"duplicate catalog item {item!r}", n)
        seen.add(item)
        labels = tuple(dict.fromkeys(g.strip() for g in parts[2].split("|") if g.strip()))
        ids.append(item)
        titles.append(parts[1])
        genres.append(labels or (UNKNOWN_CATEGORY,))

    keys = [_scalar(x) for x in coerce_ids(ids)] if ids else []
    cats: dict[str, None] = {}
    for labels in genres:
        cats.update(dict.fromkeys(labels))
    return ItemCatalog(dict(zip(keys, genres)), tuple(cats), dict(zip(keys, titles)))


def catalog_to_csv(catalog: ItemCatalog) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["item_id", "title", "genres"])
    for item, labels in catalog.items.items():
        w.writerow([item, catalog.titles.get(item, ""), "|".join(labels)])
    return out.getvalue()


@dataclass(frozen=True)
class PopularityIndex:
    """theta(i): share of training users who rated item i."""

    item_ids: np.ndarray
    theta: np.ndarray
    n_users: int

    @cached_property
    def _lookup(self) -> dict:
        return {_scalar(i): float(t) for i, t in zip(self.item_ids, self.theta)}

    def __getitem__(self, item) -> float:
        return self._lookup.get(_scalar(item), 0.0)

    def get(self, item) -> float:
        return self[item]

    def as_dict(self) -> dict:
        return dict(self._lookup)

    def scaled(self, factor: float) -> "PopularityIndex":
        return PopularityIndex(self.item_ids, self.theta * factor, self.n_users)


def popularity(train: RatingsTable) -> PopularityIndex:
    if len(train) == 0:
        raise ValueError("popularity needs a non-empty training table")
    raters = np.bincount(train.item_codes, minlength=train.n_items)
    return PopularityIndex(train.item_ids, raters / train.n_users, train.n_users)


@dataclass(frozen=True)
class Split:
    train: RatingsTable
    test: RatingsTable
    seed: int
    fraction: float
    input_hash: str = ""

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "fraction": self.fraction,
            "generator": SPLIT_GENERATOR,
            "numpy_version": np.__version__,
            "input_sha256": self.input_hash,
            "n_train": len(self.train),
            "n_test": len(self.test),
        }


def split_ratings(table: RatingsTable, fraction: float = 0.8, seed: int = 0) -> Split:
    """Global record-level random split.

    The first ``round(fraction * n)`` positions of a PCG64 permutation go to
    training; both halves keep the input's record order.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    n = len(table)
    n_train = int(math.floor(fraction * n + 0.5))
    rng = np.random.Generator(np.random.PCG64(seed))
    perm = rng.permutation(n)
    mask = np.zeros(n, dtype=bool)
    mask[perm[:n_train]] = True
    return Split(
        table.subset(np.flatnonzero(mask)),
        table.subset(np.flatnonzero(~mask)),
        seed,
        fraction,
        table.content_hash(),
    )

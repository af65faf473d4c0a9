import io
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import table
from popcal.dataset import (
    DataError,
    ParseError,
    RatingsTable,
    parse_catalog,
    parse_ratings,
    popularity,
    split_ratings,
)


def test_movielens_line():
    t = parse_ratings(io.StringIO("1::1193::5::978300760\n"))
    (r,) = list(t)
    assert (r.user, r.item, r.value, r.timestamp) == (1, 1193, 5.0, 978300760)


def test_empty_stream():
    t = parse_ratings(io.StringIO(""))
    assert len(t) == 0 and t.n_users == 0
    assert parse_ratings(io.StringIO(""), format="csv").n_users == 0


def test_duplicate_pair_is_data_error_with_line():
    text = "1::10::5::1\n2::10::4::1\n1::10::3::2\n"
    with pytest.raises(DataError) as e:
        parse_ratings(io.StringIO(text))
    assert e.value.lineno == 3


@pytest.mark.parametrize(
    "line, lineno",
    [("1::2::x::3", 2), ("1::2", 2), ("::2::3::4", 2)],
)
def test_malformed_line_reports_line_number(line, lineno):
    with pytest.raises(ParseError) as e:
        parse_ratings(io.StringIO(f"1::1::1::1\n{line}\n"))
    assert e.value.lineno == lineno


def test_rating_outside_scale():
    with pytest.raises(DataError):
        parse_ratings(io.StringIO("1::1::6::1\n"))
    assert len(parse_ratings(io.StringIO("1::1::6::1\n"), scale=(1, 10))) == 1


def test_csv_header_and_latin1():
    t = parse_ratings(io.StringIO("user_id,item_id,rating\na,b,3\n"), format="csv")
    assert t.record(0).user == "a" and t.timestamps is None
    with pytest.raises(ParseError):
        parse_ratings(io.StringIO("u,i,r\n1,2,3\n"), format="csv")


def test_catalog_line():
    cat = parse_catalog(io.StringIO("1::Toy Story (1995)::Animation|Children's|Comedy\n"))
    assert set(cat.items[1]) == {"Animation", "Children's", "Comedy"}
    assert cat.titles[1] == "Toy Story (1995)"


def test_catalog_disjoint_genres_and_unknown():
    cat = parse_catalog(io.StringIO("1::A::Action\n2::B::Drama\n"))
    assert len(cat.categories) == 2
    cat = parse_catalog(io.StringIO("1::A::\n2::B::Drama\n"))
    assert cat.items[1] == ("Unknown",)
    assert set(cat.categories) == {"Unknown", "Drama"}


def test_catalog_title_with_colons():
    cat = parse_catalog(io.StringIO("7::Star Wars: Episode IV (1977)::Action|Sci-Fi\n"))
    assert cat.titles[7] == "Star Wars: Episode IV (1977)"
    assert cat.items[7] == ("Action", "Sci-Fi")


def test_catalog_categories_are_union(fixture_catalog):
    union = {c for labels in fixture_catalog.items.values() for c in labels}
    assert set(fixture_catalog.categories) == union
    assert all(fixture_catalog.items.values())


def test_split_counts():
    t = table(*[(u, i, 3) for u in range(2) for i in range(5)])
    s = split_ratings(t, 0.8, seed=1)
    assert (len(s.train), len(s.test)) == (8, 2)


def test_split_deterministic_and_seed_sensitive(fixture_ratings):
    a = split_ratings(fixture_ratings, 0.8, 3)
    b = split_ratings(fixture_ratings, 0.8, 3)
    assert a.train.equals(b.train) and a.test.equals(b.test)
    c = split_ratings(fixture_ratings, 0.8, 4)
    assert not a.train.equals(c.train)


@pytest.mark.parametrize("fraction", [0.0, 1.0, -0.1, 1.5])
def test_split_fraction_range(fixture_ratings, fraction):
    with pytest.raises(ValueError):
        split_ratings(fixture_ratings, fraction)


def test_split_manifest(fixture_ratings):
    m = split_ratings(fixture_ratings, 0.8, 3).manifest()
    assert m["seed"] == 3 and m["fraction"] == 0.8
    assert m["generator"] == "numpy.random.PCG64"
    assert m["input_sha256"] == fixture_ratings.content_hash()


def test_popularity_examples():
    t = table((1, "A", 1), (2, "A", 1), (3, "B", 1), (4, "B", 1))
    assert popularity(t)["A"] == 0.5
    t = table((1, "A", 1), (2, "A", 1), (3, "A", 1), (1, "B", 1))
    theta = popularity(t)
    assert theta["A"] == 1.0
    assert theta["B"] == 1 / 3
    assert theta["missing"] == 0.0


def test_indices_are_inverse(fixture_ratings):
    pairs = {(r.user, r.item) for r in fixture_ratings}
    from_users = {(u, i) for u, items in fixture_ratings.user_index.items() for i in items}
    from_items = {(u, i) for i, users in fixture_ratings.item_index.items() for u in users}
    assert pairs == from_users == from_items
    assert fixture_ratings.n_users == len({u for u, _ in pairs})


def test_table_is_immutable(fixture_ratings):
    with pytest.raises(ValueError):
        fixture_ratings.values[0] = 1.0


ratings_strategy = st.lists(
    st.tuples(st.integers(1, 12), st.integers(1, 15), st.integers(1, 5)),
    min_size=1,
    max_size=60,
    unique_by=lambda r: (r[0], r[1]),
)


@settings(max_examples=60, deadline=None)
@given(ratings_strategy, st.integers(0, 2**32), st.floats(0.05, 0.95))
def test_split_partitions_input(records, seed, fraction):
    t = table(*records)
    s = split_ratings(t, fraction, seed)
    assert len(s.train) == math.floor(fraction * len(t) + 0.5)
    key = lambda tb: Counter((r.user, r.item, r.value) for r in tb)  # noqa: E731
    assert key(s.train) + key(s.test) == key(t)
    assert not set(key(s.train)) & set(key(s.test))


@settings(max_examples=60, deadline=None)
@given(ratings_strategy, st.randoms(use_true_random=False))
def test_popularity_sums_and_permutation_invariance(records, rnd):
    t = table(*records)
    theta = popularity(t)
    assert math.isclose(sum(theta.as_dict().values()) * t.n_users, len(t))
    assert all(0 <= v <= 1 for v in theta.as_dict().values())
    shuffled = list(records)
    rnd.shuffle(shuffled)
    assert popularity(table(*shuffled)).as_dict() == theta.as_dict()


@settings(max_examples=60, deadline=None)
@given(ratings_strategy, st.booleans())
def test_csv_round_trip(records, with_ts):
    recs = [(u, i, v, 1000 + k) if with_ts else (u, i, v) for k, (u, i, v) in enumerate(records)]
    t = table(*recs)
    back = parse_ratings(io.StringIO(t.to_csv()), format="csv")
    assert back.equals(t)
    assert back.content_hash() == t.content_hash()


def test_round_trip_fractional_and_string_ids():
    t = RatingsTable.from_records([("u1", "x", 3.5), ("u2", "x", 4.25)])
    assert parse_ratings(io.StringIO(t.to_csv()), format="csv", scale=None).equals(t)


def test_csv_without_header_rows_keeps_dtype():
    t = parse_ratings(io.StringIO("user_id,item_id,rating\n"), format="csv")
    assert len(t) == 0
    assert isinstance(t.user_ids, np.ndarray)

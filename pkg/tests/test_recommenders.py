import io
import math
import pickle

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import table
from popcal.dataset import popularity
from popcal.recommenders import (
    BiasedMFModel,
    ConfigError,
    ModelConfig,
    SchemaError,
    SVDPPModel,
    corated_similarity,
    fit,
    read_recommendations,
    recommend_top_n,
    score,
)
from popcal.recommenders.knn import MIN_CORATED
from popcal.recommenders.mf import bmf_pointwise_loss, bmf_step

# -- brute-force oracles ------------------------------------------------------


def oracle_similarity(vectors: list[dict], metric: str) -> np.ndarray:
    """Pairwise similarity restricted to co-rated keys, one pair at a time."""
    n = len(vectors)
    out = np.zeros((n, n))
    for a in range(n):
        for b in range(n):
            if a == b:
                continue
            common = sorted(set(vectors[a]) & set(vectors[b]))
            if len(common) < MIN_CORATED:
                continue
            x = [vectors[a][k] for k in common]
            y = [vectors[b][k] for k in common]
            if metric == "pearson":
                mx, my = sum(x) / len(x), sum(y) / len(y)
                x = [v - mx for v in x]
                y = [v - my for v in y]
            num = sum(p * q for p, q in zip(x, y))
            den = math.sqrt(sum(p * p for p in x) * sum(q * q for q in y))
            out[a, b] = 0.0 if den == 0 else max(-1.0, min(1.0, num / den))
    return out


def oracle_neighbors(sim_row, k):
    cand = [(-s, j) for j, s in enumerate(sim_row) if s > 0]
    return [j for _, j in sorted(cand)[:k]]


def oracle_user_knn(train, k, metric):
    users = list(train.user_ids)
    vecs = [{} for _ in users]
    for r in train:
        vecs[users.index(r.user)][r.item] = r.value
    sim = oracle_similarity(vecs, metric)
    means = [sum(v.values()) / len(v) for v in vecs]
    out = {}
    for a, u in enumerate(users):
        nbrs = oracle_neighbors(sim[a], k)
        for item in train.item_ids:
            num = sum(sim[a, b] * (vecs[b][item] - means[b]) for b in nbrs if item in vecs[b])
            den = sum(abs(sim[a, b]) for b in nbrs if item in vecs[b])
            out[u, item] = means[a] + (num / den if den > 0 else 0.0)
    return out


def oracle_item_knn(train, k, metric):
    items = list(train.item_ids)
    cols = [{} for _ in items]
    prof = {}
    for r in train:
        cols[items.index(r.item)][r.user] = r.value
        prof.setdefault(r.user, {})[r.item] = r.value
    sim = oracle_similarity(cols, metric)
    item_means = [sum(c.values()) / len(c) for c in cols]
    out = {}
    for u, rated in prof.items():
        umean = sum(rated.values()) / len(rated)
        for a, item in enumerate(items):
            nbrs = [j for j in oracle_neighbors(sim[a], k) if items[j] in rated]
            den = sum(abs(sim[a, j]) for j in nbrs)
            if den == 0:
                out[u, item] = umean
            else:
                num = sum(sim[a, j] * (rated[items[j]] - item_means[j]) for j in nbrs)
                out[u, item] = item_means[a] + num / den
    return out


def oracle_top_n(train, scorer, n):
    lists = {}
    for u in train.user_ids:
        seen = set(train.user_index[u])
        cand = [(-scorer(u, i), i) for i in train.item_ids if i not in seen]
        lists[u] = [i for _, i in sorted(cand)[:n]]
    return lists


sparse_tables = st.lists(
    st.tuples(st.integers(1, 8), st.integers(1, 9), st.integers(1, 5)),
    min_size=4,
    max_size=50,
    unique_by=lambda r: (r[0], r[1]),
)

# -- similarity -------------------------------------------------------------------


def test_item_cosine_toy_matches_hand_oracle():
    ratings = [[5, 3, 4], [4, 1, 2], [1, 5, 3]]
    t = table(*[(u + 1, i + 1, ratings[u][i]) for u in range(3) for i in range(3)])
    sim = corated_similarity(t.matrix.T.tocsr(), "cosine")
    cols = np.array(ratings, dtype=float).T
    hand = np.array(
        [[0 if a == b else cols[a] @ cols[b] / math.sqrt(cols[a] @ cols[a] * (cols[b] @ cols[b]))
          for b in range(3)] for a in range(3)]
    )
    np.testing.assert_allclose(sim, hand, atol=1e-12)


@settings(max_examples=80, deadline=None)
@given(sparse_tables, st.sampled_from(["cosine", "pearson"]))
def test_similarity_matches_oracle(records, metric):
    t = table(*records)
    users = list(t.user_ids)
    vecs = [{} for _ in users]
    for r in t:
        vecs[users.index(r.user)][r.item] = r.value
    np.testing.assert_allclose(
        corated_similarity(t.matrix, metric), oracle_similarity(vecs, metric), atol=1e-9
    )


def test_single_corated_item_gives_zero_similarity():
    t = table((1, 1, 5), (1, 2, 3), (2, 1, 4), (2, 3, 1))
    assert corated_similarity(t.matrix, "cosine")[0, 1] == 0.0


# -- scoring ----------------------------------------------------------------------


def test_user_knn_single_neighbor_example():
    t = table(("u", "a", 2), ("u", "b", 4), ("v", "a", 3), ("v", "b", 4), ("v", "x", 5))
    m = fit(t, ModelConfig("user-knn", neighborhood_size=1, similarity="pearson"))
    assert m.similarity[0, 1] == pytest.approx(1.0)
    assert score(m, "u", "x") == pytest.approx(3 + (5 - 4))


@settings(max_examples=40, deadline=None)
@given(sparse_tables, st.integers(1, 4), st.sampled_from(["cosine", "pearson"]))
def test_user_knn_matches_oracle(records, k, metric):
    t = table(*records)
    m = fit(t, ModelConfig("user-knn", neighborhood_size=k, similarity=metric))
    for (u, i), expected in oracle_user_knn(t, k, metric).items():
        assert m.score(u, i) == pytest.approx(expected, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(sparse_tables, st.integers(1, 4), st.sampled_from(["cosine", "pearson"]))
def test_item_knn_matches_oracle(records, k, metric):
    t = table(*records)
    m = fit(t, ModelConfig("item-knn", neighborhood_size=k, similarity=metric))
    for (u, i), expected in oracle_item_knn(t, k, metric).items():
        assert m.score(u, i) == pytest.approx(expected, abs=1e-9)


def test_knn_unknown_item_falls_back_to_user_mean(fixture_ratings):
    m = fit(fixture_ratings, ModelConfig("item-knn", neighborhood_size=5))
    u = fixture_ratings.record(0).user
    profile = [r.value for r in fixture_ratings if r.user == u]
    assert m.score(u, 99999) == pytest.approx(np.mean(profile))
    with pytest.raises(KeyError):
        m.score(99999, 1)


def test_most_popular_scores_theta(fixture_ratings):
    m = fit(fixture_ratings, ModelConfig("most-popular"))
    theta = popularity(fixture_ratings)
    for u in fixture_ratings.user_ids[:5]:
        for i in fixture_ratings.item_ids:
            assert m.score(u, i) == theta[i]


def test_most_popular_theta_example():
    t = table(*[(u, "hit", 1) for u in range(7)], *[(u, "miss", 1) for u in range(7, 10)])
    m = fit(t, ModelConfig("most-popular"))
    assert {m.score(u, "hit") for u in range(10)} == {0.7}


def test_bmf_zero_epochs_scores_global_mean(fixture_ratings):
    m = fit(fixture_ratings, ModelConfig("bmf", factors=4, epochs=0))
    mu = fixture_ratings.values.mean()
    scores = m.score_block(np.arange(fixture_ratings.n_users))
    np.testing.assert_allclose(scores, mu, atol=4 * 0.01**2)


def test_bmf_all_zero_parameters_scores_mu(fixture_ratings):
    t = fixture_ratings
    z = lambda *s: np.zeros(s)  # noqa: E731
    m = BiasedMFModel(t, ModelConfig("bmf").resolved(), 3.25, z(t.n_users), z(t.n_items),
                      z(t.n_users, 3), z(t.n_items, 3), [])
    assert m.score(t.record(0).user, t.record(0).item) == 3.25


# -- MF numerics ------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_bmf_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    mu, r, reg, lr = 3.5, 4.0, 0.05, 1e-3
    bu, bi = rng.normal(0, 0.3, 1), rng.normal(0, 0.3, 1)
    P, Q = rng.normal(0, 0.5, (1, 2)), rng.normal(0, 0.5, (1, 2))
    theta0 = np.concatenate([bu, bi, P[0], Q[0]])

    def loss(th):
        return bmf_pointwise_loss(r, mu, th[0], th[1], th[2:4], th[4:6], reg)

    h = 1e-6
    numeric = np.array(
        [(loss(theta0 + h * e) - loss(theta0 - h * e)) / (2 * h) for e in np.eye(6)]
    )
    bmf_step(r, 0, 0, mu, bu, bi, P, Q, lr, reg)
    analytic = -(np.concatenate([bu, bi, P[0], Q[0]]) - theta0) / lr
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4)


@pytest.mark.parametrize("algo", ["bmf", "svdpp"])
def test_training_error_non_increasing(fixture_ratings, algo):
    m = fit(fixture_ratings, ModelConfig(algo, epochs=30, factors=10))
    h = np.array(m.history)
    assert len(h) == 31
    assert (np.diff(h) <= 0).all(), h


def test_svdpp_with_zero_implicit_factors_equals_bmf(fixture_ratings):
    t = fixture_ratings
    s = fit(t, ModelConfig("svdpp", factors=6, epochs=5, seed=3))
    reduced = SVDPPModel(t, s.config, s.mu, s.user_bias.copy(), s.item_bias.copy(),
                         s.user_factors.copy(), s.item_factors.copy(),
                         np.zeros_like(s.implicit_factors), [])
    plain = BiasedMFModel(t, ModelConfig("bmf").resolved(), s.mu, s.user_bias.copy(),
                          s.item_bias.copy(), s.user_factors.copy(), s.item_factors.copy(), [])
    codes = np.arange(t.n_users)
    np.testing.assert_array_equal(reduced.score_block(codes), plain.score_block(codes))


@pytest.mark.parametrize("algo", ["user-knn", "item-knn", "most-popular", "bmf", "svdpp"])
def test_fit_is_bit_reproducible(fixture_ratings, algo):
    cfg = ModelConfig(algo, epochs=5 if algo in ("bmf", "svdpp") else None, seed=11)
    a, b = fit(fixture_ratings, cfg), fit(fixture_ratings, cfg)
    codes = np.arange(fixture_ratings.n_users)
    assert np.array_equal(a.score_block(codes), b.score_block(codes))
    c = pickle.loads(pickle.dumps(a))
    assert np.array_equal(a.score_block(codes), c.score_block(codes))


def test_mf_seed_changes_model(fixture_ratings):
    a = fit(fixture_ratings, ModelConfig("bmf", epochs=3, seed=1))
    b = fit(fixture_ratings, ModelConfig("bmf", epochs=3, seed=2))
    assert not np.array_equal(a.user_factors, b.user_factors)


# -- config -----------------------------------------------------------------------


@pytest.mark.parametrize(
    "cfg",
    [
        ModelConfig("bmf", factors=0, epochs=5),
        ModelConfig("svdpp", factors=0, epochs=1),
        ModelConfig("user-knn", neighborhood_size=0),
        ModelConfig("item-knn", similarity="jaccard"),
        ModelConfig("slope-one"),
    ],
)
def test_degenerate_configs_rejected(fixture_ratings, cfg):
    with pytest.raises(ConfigError):
        fit(fixture_ratings, cfg)


def test_factors_zero_with_zero_epochs_allowed(fixture_ratings):
    assert fit(fixture_ratings, ModelConfig("bmf", factors=0, epochs=0)).history


def test_resolved_defaults():
    assert ModelConfig("bmf").resolved().factors == 50
    assert ModelConfig("svdpp").resolved().epochs == 20
    assert ModelConfig("user-knn").resolved().similarity == "pearson"
    assert ModelConfig("item-knn").resolved().neighborhood_size == 50
    assert set(ModelConfig("most-popular").resolved().relevant()) == {"algorithm", "seed"}


# -- top-N ------------------------------------------------------------------------


@pytest.mark.parametrize("algo", ["user-knn", "item-knn", "most-popular", "bmf", "svdpp"])
def test_top_n_never_recommends_seen_items(fixture_ratings, algo):
    m = fit(fixture_ratings, ModelConfig(algo, epochs=3 if algo in ("bmf", "svdpp") else None))
    recs = recommend_top_n(m, 10)
    for u, items in recs.lists.items():
        assert not set(items) & set(fixture_ratings.user_index[u])
        assert len(items) == len(set(items))
    by_user = {}
    for u, _, rank, s in recs.iter_rows():
        by_user.setdefault(u, []).append(s)
    assert all(all(a >= b for a, b in zip(v, v[1:])) for v in by_user.values())


@pytest.mark.parametrize("algo", ["user-knn", "item-knn", "most-popular"])
def test_top_n_matches_brute_force_ranking(fixture_ratings, algo):
    m = fit(fixture_ratings, ModelConfig(algo))
    expected = oracle_top_n(fixture_ratings, m.score, 10)
    assert recommend_top_n(m, 10).lists == expected


def test_most_popular_lists_are_top_unseen(fixture_ratings):
    m = fit(fixture_ratings, ModelConfig("most-popular"))
    theta = popularity(fixture_ratings)
    order = sorted(fixture_ratings.item_ids, key=lambda i: (-theta[i], i))
    for u, items in recommend_top_n(m, 10).lists.items():
        seen = set(fixture_ratings.user_index[u])
        assert items == [i for i in order if i not in seen][:10]


def test_short_lists_are_flagged():
    t = table((1, "a", 3), (2, "a", 4), (2, "b", 5), (2, "c", 1), (2, "d", 2))
    recs = recommend_top_n(fit(t, ModelConfig("most-popular")), 10)
    assert recs.lists[1] == ["b", "c", "d"]
    assert 2 not in recs.lists
    assert recs.short_users == frozenset({1, 2})


def test_removed_item_never_recommended(fixture_ratings):
    drop = fixture_ratings.record(0).item
    keep = np.flatnonzero(fixture_ratings.items != drop)
    m = fit(fixture_ratings.subset(keep), ModelConfig("most-popular"))
    recs = recommend_top_n(m, 29)
    assert drop not in set(recs.items.tolist())


def test_recommendation_tsv_round_trip(fixture_ratings):
    recs = recommend_top_n(fit(fixture_ratings, ModelConfig("bmf", epochs=2)), 5)
    back = read_recommendations(io.StringIO(recs.to_tsv()), n=5)
    assert back.lists == recs.lists
    assert np.array_equal(back.scores, recs.scores)
    assert back.short_users == recs.short_users


@pytest.mark.parametrize(
    "body, row",
    [
        ("1\ta\t1\t0.5\n1\tb\t3\t0.4\n", 3),
        ("1\ta\t1\t0.5\n2\tb\t1\t0.4\n1\tc\t2\t0.3\n", 4),
        ("1\ta\tone\t0.5\n", 2),
        ("1\ta\t1\n", 2),
    ],
)
def test_recommendation_schema_errors_carry_row(body, row):
    with pytest.raises(SchemaError) as e:
        read_recommendations(io.StringIO("user_id\titem_id\trank\tscore\n" + body))
    assert e.value.row == row

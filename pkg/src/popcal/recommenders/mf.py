"""Latent-factor recommenders trained by SGD: biased MF and SVD++."""

from __future__ import annotations

import logging

import numpy as np
from numba import njit

from ..dataset import RatingsTable
from .base import FittedModel, ModelConfig

_log = logging.getLogger(__name__)

INIT_SCALE = 0.01


@njit(cache=True)
def bmf_step(r, u, i, mu, bu, bi, P, Q, lr, reg):
    """One SGD step on rating ``r`` of (u, i); updates in place, returns the error.

    Descends ``0.5 e^2 + 0.5 reg (bu^2 + bi^2 + |p_u|^2 + |q_i|^2)`` with
    ``e = r - mu - bu - bi - p_u . q_i``; p and q move simultaneously.
    """
    k = P.shape[1]
    pred = mu + bu[u] + bi[i]
    for f in range(k):
        pred += P[u, f] * Q[i, f]
    e = r - pred
    bu[u] += lr * (e - reg * bu[u])
    bi[i] += lr * (e - reg * bi[i])
    for f in range(k):
        p = P[u, f]
        q = Q[i, f]
        P[u, f] += lr * (e * q - reg * p)
        Q[i, f] += lr * (e * p - reg * q)
    return e


@njit(cache=True)
def _bmf_epoch(order, users, items, values, mu, bu, bi, P, Q, lr, reg):
    for k in order:
        bmf_step(values[k], users[k], items[k], mu, bu, bi, P, Q, lr, reg)


@njit(cache=True)
def _bmf_objective(users, items, values, mu, bu, bi, P, Q, reg):
    total = 0.0
    for k in range(len(values)):
        u = users[k]
        i = items[k]
        pred = mu + bu[u] + bi[i]
        pen = bu[u] * bu[u] + bi[i] * bi[i]
        for f in range(P.shape[1]):
            pred += P[u, f] * Q[i, f]
            pen += P[u, f] * P[u, f] + Q[i, f] * Q[i, f]
        e = values[k] - pred
        total += e * e + reg * pen
    return total


def bmf_pointwise_loss(r, mu, bu, bi, p, q, reg) -> float:
    e = r - (mu + bu + bi + p @ q)
    return 0.5 * e * e + 0.5 * reg * (bu * bu + bi * bi + p @ p + q @ q)


@njit(cache=True)
def _svdpp_epoch(order, users, items, values, indptr, indices, mu, bu, bi, P, Q, Y, lr, reg):
    # order groups each user's ratings together; y_j moves once per user block
    k = P.shape[1]
    n = len(order)
    z = np.zeros(k)
    acc = np.zeros(k)
    pos = 0
    while pos < n:
        u = users[order[pos]]
        lo = indptr[u]
        hi = indptr[u + 1]
        norm = 1.0 / np.sqrt(hi - lo) if hi > lo else 0.0
        z[:] = 0.0
        for jj in range(lo, hi):
            z += Y[indices[jj]]
        z *= norm
        acc[:] = 0.0
        while pos < n and users[order[pos]] == u:
            t = order[pos]
            i = items[t]
            pred = mu + bu[u] + bi[i]
            for f in range(k):
                pred += Q[i, f] * (P[u, f] + z[f])
            e = values[t] - pred
            bu[u] += lr * (e - reg * bu[u])
            bi[i] += lr * (e - reg * bi[i])
            for f in range(k):
                p = P[u, f]
                q = Q[i, f]
                P[u, f] += lr * (e * q - reg * p)
                Q[i, f] += lr * (e * (p + z[f]) - reg * q)
                acc[f] += e * q
            pos += 1
        for jj in range(lo, hi):
            j = indices[jj]
            for f in range(k):
                Y[j, f] += lr * (norm * acc[f] - reg * Y[j, f])


@njit(cache=True)
def _svdpp_objective(users, items, values, indptr, indices, mu, bu, bi, P, Q, Y, reg):
    k = P.shape[1]
    n_users = P.shape[0]
    Z = np.zeros((n_users, k))
    for u in range(n_users):
        lo = indptr[u]
        hi = indptr[u + 1]
        if hi > lo:
            for jj in range(lo, hi):
                Z[u] += Y[indices[jj]]
            Z[u] /= np.sqrt(hi - lo)
    total = 0.0
    for t in range(len(values)):
        u = users[t]
        i = items[t]
        pred = mu + bu[u] + bi[i]
        pen = bu[u] * bu[u] + bi[i] * bi[i]
        for f in range(k):
            pred += Q[i, f] * (P[u, f] + Z[u, f])
            pen += P[u, f] * P[u, f] + Q[i, f] * Q[i, f]
        e = values[t] - pred
        total += e * e + reg * pen
    return total


class BiasedMFModel(FittedModel):
    """mu + b_u + b_i + p_u . q_i"""

    algorithm = "bmf"

    def __init__(self, train, config, mu, bu, bi, P, Q, history):
        super().__init__(train, config)
        self.mu = float(mu)
        self.user_bias, self.item_bias = bu, bi
        self.user_factors, self.item_factors = P, Q
        self.history = list(history)
        self._freeze(bu, bi, P, Q)

    def user_vectors(self, user_codes: np.ndarray) -> np.ndarray:
        return self.user_factors[user_codes]

    def score_block(self, user_codes: np.ndarray) -> np.ndarray:
        base = self.mu + self.user_bias[user_codes, None] + self.item_bias[None, :]
        return base + self.user_vectors(user_codes) @ self.item_factors.T

    def fallback_score(self, user_code: int) -> float:
        return self.mu + float(self.user_bias[user_code])


class SVDPPModel(BiasedMFModel):
    """mu + b_u + b_i + q_i . (p_u + |R(u)|^-1/2 sum_{j in R(u)} y_j)"""

    algorithm = "svdpp"

    def __init__(self, train, config, mu, bu, bi, P, Q, Y, history):
        super().__init__(train, config, mu, bu, bi, P, Q, history)
        self.implicit_factors = Y
        self._freeze(Y)

    def user_vectors(self, user_codes: np.ndarray) -> np.ndarray:
        m = self.train.matrix[user_codes]
        counts = np.diff(m.indptr)
        ysum = np.zeros((len(user_codes), self.implicit_factors.shape[1]))
        for r in range(len(user_codes)):
            cols = m.indices[m.indptr[r] : m.indptr[r + 1]]
            if len(cols):
                ysum[r] = self.implicit_factors[cols].sum(axis=0) / np.sqrt(counts[r])
        return self.user_factors[user_codes] + ysum


def _init(train: RatingsTable, config: ModelConfig, with_implicit: bool):
    rng = np.random.Generator(np.random.PCG64(config.seed))
    f = config.factors
    P = rng.uniform(-INIT_SCALE, INIT_SCALE, (train.n_users, f))
    Q = rng.uniform(-INIT_SCALE, INIT_SCALE, (train.n_items, f))
    Y = rng.uniform(-INIT_SCALE, INIT_SCALE, (train.n_items, f)) if with_implicit else None
    return rng, np.zeros(train.n_users), np.zeros(train.n_items), P, Q, Y


def _arrays(train: RatingsTable):
    return (
        np.ascontiguousarray(train.user_codes, dtype=np.int64),
        np.ascontiguousarray(train.item_codes, dtype=np.int64),
        np.ascontiguousarray(train.values, dtype=np.float64),
    )


def fit_bmf(train: RatingsTable, config: ModelConfig) -> BiasedMFModel:
    users, items, values = _arrays(train)
    mu = float(values.mean())
    rng, bu, bi, P, Q, _ = _init(train, config, False)
    lr, reg = float(config.learning_rate), float(config.regularization)
    n = len(values)
    history = [np.sqrt(_bmf_objective(users, items, values, mu, bu, bi, P, Q, reg) / n)]
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        _bmf_epoch(order, users, items, values, mu, bu, bi, P, Q, lr, reg)
        history.append(np.sqrt(_bmf_objective(users, items, values, mu, bu, bi, P, Q, reg) / n))
        _log.debug("bmf epoch %d: regularized rmse %.6f", epoch + 1, history[-1])
    return BiasedMFModel(train, config, mu, bu, bi, P, Q, history)


def svdpp_order(rng: np.random.Generator, user_codes: np.ndarray, n_users: int) -> np.ndarray:
    """Shuffle ratings, then group them by user in a shuffled user order."""
    perm = rng.permutation(len(user_codes))
    user_rank = rng.permutation(n_users)
    return perm[np.argsort(user_rank[user_codes[perm]], kind="stable")]


def fit_svdpp(train: RatingsTable, config: ModelConfig) -> SVDPPModel:
    users, items, values = _arrays(train)
    m = train.matrix
    indptr = np.ascontiguousarray(m.indptr, dtype=np.int64)
    indices = np.ascontiguousarray(m.indices, dtype=np.int64)
    mu = float(values.mean())
    rng, bu, bi, P, Q, Y = _init(train, config, True)
    lr, reg = float(config.learning_rate), float(config.regularization)
    n = len(values)

    def objective():
        return np.sqrt(
            _svdpp_objective(users, items, values, indptr, indices, mu, bu, bi, P, Q, Y, reg) / n
        )

    history = [objective()]
    for epoch in range(config.epochs):
        order = svdpp_order(rng, users, train.n_users)
        _svdpp_epoch(order, users, items, values, indptr, indices, mu, bu, bi, P, Q, Y, lr, reg)
        history.append(objective())
        _log.debug("svdpp epoch %d: regularized rmse %.6f", epoch + 1, history[-1])
    return SVDPPModel(train, config, mu, bu, bi, P, Q, Y, history)

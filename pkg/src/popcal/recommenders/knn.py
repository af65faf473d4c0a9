"""Neighbourhood recommenders: user-based and item-based k-NN."""

from __future__ import annotations

import logging

import numpy as np
import scipy.sparse as sp

from ..dataset import RatingsTable
from .base import FittedModel, ModelConfig

_log = logging.getLogger(__name__)

MIN_CORATED = 2
_BLOCK = 512


def corated_similarity(rows: sp.csr_matrix, metric: str) -> np.ndarray:
    """Dense pairwise similarity between the rows of a sparse rating matrix.

    Every statistic is restricted to the columns both rows rated. Pairs with
    fewer than ``MIN_CORATED`` shared columns, or zero variance/norm over
    them, get 0; the diagonal is 0.
    """
    x = rows.toarray()
    b = _binary(rows).toarray()
    x2 = x * x
    n_rows = x.shape[0]
    out = np.zeros((n_rows, n_rows))
    for start in range(0, n_rows, _BLOCK):
        sl = slice(start, min(start + _BLOCK, n_rows))
        n = b[sl] @ b.T
        sxy = x[sl] @ x.T
        sxx = x2[sl] @ b.T
        syy = b[sl] @ x2.T
        if metric == "cosine":
            num = sxy
            den = np.sqrt(sxx * syy)
        elif metric == "pearson":
            sx = x[sl] @ b.T
            sy = b[sl] @ x.T
            num = n * sxy - sx * sy
            vx = n * sxx - sx * sx
            vy = n * syy - sy * sy
            den = np.sqrt(np.clip(vx, 0, None) * np.clip(vy, 0, None))
        else:
            raise ValueError(f"unknown similarity {metric!r}")
        ok = (n >= MIN_CORATED) & (den > 0)
        blk = np.zeros_like(num)
        np.divide(num, den, out=blk, where=ok)
        out[sl] = np.clip(blk, -1.0, 1.0)
    np.fill_diagonal(out, 0.0)
    return out


def top_k_neighbors(sim: np.ndarray, k: int) -> sp.csr_matrix:
    """Keep each row's ``k`` largest positive similarities (ties: lower index)."""
    n = sim.shape[0]
    k = min(k, max(n - 1, 0))
    indptr = [0]
    indices = []
    data = []
    for start in range(0, n, _BLOCK):
        blk = sim[start : start + _BLOCK]
        order = np.argsort(-blk, axis=1, kind="stable")[:, :k]
        vals = np.take_along_axis(blk, order, axis=1)
        for r in range(blk.shape[0]):
            keep = vals[r] > 0
            cols = order[r][keep]
            srt = np.argsort(cols)
            indices.append(cols[srt])
            data.append(vals[r][keep][srt])
            indptr.append(indptr[-1] + int(keep.sum()))
    return sp.csr_matrix(
        (
            np.concatenate(data) if data else np.zeros(0),
            np.concatenate(indices) if indices else np.zeros(0, dtype=np.int64),
            np.array(indptr),
        ),
        shape=(n, n),
    )


def _deviation_matrix(m: sp.csr_matrix, means: np.ndarray, axis: int) -> sp.csr_matrix:
    dev = m.copy()
    if axis == 1:
        dev.data = dev.data - np.repeat(means, np.diff(m.indptr))
    else:
        dev.data = dev.data - means[dev.indices]
    return dev


def _binary(m: sp.csr_matrix) -> sp.csr_matrix:
    b = m.copy()
    b.data = np.ones_like(b.data)
    return b


class _KNNModel(FittedModel):
    def __init__(self, train: RatingsTable, config: ModelConfig, similarity: np.ndarray):
        super().__init__(train, config)
        m = train.matrix
        counts = np.diff(m.indptr)
        self.user_means = np.asarray(m.sum(axis=1)).ravel() / np.maximum(counts, 1)
        item_counts = np.bincount(train.item_codes, minlength=train.n_items)
        self.item_means = np.bincount(
            train.item_codes, weights=train.values, minlength=train.n_items
        ) / np.maximum(item_counts, 1)
        self.similarity = similarity
        self.neighbors = top_k_neighbors(similarity, config.neighborhood_size)
        self._freeze(self.user_means, self.item_means, self.similarity)

    def fallback_score(self, user_code: int) -> float:
        return float(self.user_means[user_code])

    def __getstate__(self):
        # the dense similarity matrix is only needed to pick neighbours
        state = self.__dict__.copy()
        state["similarity"] = None
        return state


class UserKNNModel(_KNNModel):
    """score(u, i) = mean_u + sum_v s(u,v) (r_vi - mean_v) / sum_v |s(u,v)|

    over the user's k nearest neighbours v that rated i; the user's mean
    when none did.
    """

    algorithm = "user-knn"

    def score_block(self, user_codes: np.ndarray) -> np.ndarray:
        m = self.train.matrix
        dev = _deviation_matrix(m, self.user_means, axis=1)
        w = self.neighbors[user_codes]
        num = (w @ dev).toarray()
        den = (abs(w) @ _binary(m)).toarray()
        adj = np.zeros_like(num)
        np.divide(num, den, out=adj, where=den > 0)
        return self.user_means[user_codes, None] + adj


class ItemKNNModel(_KNNModel):
    """score(u, i) = mean_i + sum_j s(i,j) (r_uj - mean_j) / sum_j |s(i,j)|

    over the item's k nearest neighbours j the user rated; the user's mean
    when the user rated none of them.
    """

    algorithm = "item-knn"

    def score_block(self, user_codes: np.ndarray) -> np.ndarray:
        m = self.train.matrix[user_codes]
        dev = _deviation_matrix(m, self.item_means, axis=0)
        w_t = self.neighbors.T.tocsr()
        num = (dev @ w_t).toarray()
        den = (_binary(m) @ abs(w_t)).toarray()
        out = np.repeat(self.user_means[user_codes, None], den.shape[1], axis=1)
        has = den > 0
        out[has] = (self.item_means[None, :] + num / np.where(has, den, 1.0))[has]
        return out


def fit_user_knn(train: RatingsTable, config: ModelConfig) -> UserKNNModel:
    _log.info("user-knn: %s similarity over %d users", config.similarity, train.n_users)
    return UserKNNModel(train, config, corated_similarity(train.matrix, config.similarity))


def fit_item_knn(train: RatingsTable, config: ModelConfig) -> ItemKNNModel:
    _log.info("item-knn: %s similarity over %d items", config.similarity, train.n_items)
    cols = train.matrix.T.tocsr()
    return ItemKNNModel(train, config, corated_similarity(cols, config.similarity))

"""Recommenders trained on a RatingsTable and top-N list generation."""

from __future__ import annotations

import logging

from ..dataset import RatingsTable
from .base import (
    ALGORITHMS,
    ConfigError,
    FittedModel,
    ModelConfig,
    RecommendationSet,
    SchemaError,
    read_recommendations,
    recommend_top_n,
)
from .knn import ItemKNNModel, UserKNNModel, corated_similarity, fit_item_knn, fit_user_knn
from .mf import BiasedMFModel, SVDPPModel, fit_bmf, fit_svdpp
from .popular import MostPopularModel, fit_most_popular

_log = logging.getLogger(__name__)

_FITTERS = {
    "user-knn": fit_user_knn,
    "item-knn": fit_item_knn,
    "most-popular": fit_most_popular,
    "bmf": fit_bmf,
    "svdpp": fit_svdpp,
}


def fit(train: RatingsTable, config: ModelConfig) -> FittedModel:
    """Train ``config.algorithm`` on ``train``; deterministic for a fixed config."""
    config = config.resolved()
    if len(train) == 0:
        raise ValueError("cannot fit on an empty training table")
    _log.info("fitting %s on %d ratings", config.algorithm, len(train))
    return _FITTERS[config.algorithm](train, config)


def score(model: FittedModel, user, item) -> float:
    return model.score(user, item)


__all__ = [
    "ALGORITHMS",
    "BiasedMFModel",
    "ConfigError",
    "FittedModel",
    "ItemKNNModel",
    "ModelConfig",
    "MostPopularModel",
    "RecommendationSet",
    "SVDPPModel",
    "SchemaError",
    "UserKNNModel",
    "corated_similarity",
    "fit",
    "read_recommendations",
    "recommend_top_n",
    "score",
]

from __future__ import annotations

import numpy as np

from ..dataset import PopularityIndex, RatingsTable, popularity
from .base import FittedModel, ModelConfig


class MostPopularModel(FittedModel):
    """Non-personalised: every user gets items ranked by training popularity."""

    algorithm = "most-popular"

    def __init__(self, train: RatingsTable, config: ModelConfig, theta: PopularityIndex):
        super().__init__(train, config)
        self.popularity = theta
        self.theta = np.asarray(theta.theta, dtype=np.float64)
        self._freeze(self.theta)

    def score_block(self, user_codes: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.theta, (len(user_codes), len(self.theta)))

    def fallback_score(self, user_code: int) -> float:
        return 0.0


def fit_most_popular(train: RatingsTable, config: ModelConfig) -> MostPopularModel:
    return MostPopularModel(train, config, popularity(train))

"""Common probabilistic-classifier surface and the marginal predictor."""

from __future__ import annotations

import numpy as np

from ..data import Dataset, class_marginal

PROB_FLOOR = 1e-9


def clip_probs(P, floor: float = PROB_FLOOR) -> np.ndarray:
    """Clip to ``[floor, 1 - floor]`` and renormalise rows."""
    P = np.clip(np.asarray(P, dtype=float), floor, 1.0 - floor)
    return P / P.sum(axis=1, keepdims=True)


class Standardizer:
    """Column-wise z-scoring fitted on training features."""

    def fit(self, X):
        self.mean_ = X.mean(axis=0)
        sd = X.std(axis=0)
        self.scale_ = np.where(sd > 1e-12, sd, 1.0)
        return self

    def transform(self, X):
        return (np.asarray(X, dtype=float) - self.mean_) / self.scale_


class ProbClassifier:
    """Base class: subclasses implement ``fit`` and ``predict_proba``."""

    family = "abstract"
    num_classes: int

    def fit(self, train: Dataset) -> "ProbClassifier":
        raise NotImplementedError

    def predict_proba(self, X) -> np.ndarray:
        raise NotImplementedError

    def predict(self, X) -> np.ndarray:
        # np.argmax returns the first maximum: smallest index wins ties.
        return np.argmax(self.predict_proba(X), axis=1)


class MarginalPredictor(ProbClassifier):
    """Best constant predictor: always outputs the training class frequencies."""

    family = "marginal"

    def fit(self, train: Dataset) -> "MarginalPredictor":
        self.num_classes = train.num_classes
        self.marginal_ = class_marginal(train)
        return self

    def predict_proba(self, X) -> np.ndarray:
        n = len(np.asarray(X))
        return np.tile(self.marginal_, (n, 1))


def fit_marginal_predictor(train: Dataset) -> MarginalPredictor:
    return MarginalPredictor().fit(train)

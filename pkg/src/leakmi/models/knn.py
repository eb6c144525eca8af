"""k-nearest-neighbour class-frequency estimator."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from ..data import Dataset
from .base import ProbClassifier, Standardizer


class KnnClassifier(ProbClassifier):
    """Neighbour vote with additive smoothing.

    ``p[m] = (count_m + alpha) / (k + alpha * M)`` over the ``k`` nearest
    training points (Euclidean distance on z-scored features). ``alpha = 0``
    gives the raw neighbour frequencies.
    """

    family = "knn"

    def __init__(self, k=15, alpha=1.0, standardize=True, distance="euclidean"):
        if k < 1:
            raise ValueError("k must be >= 1")
        if alpha < 0:
            raise ValueError("alpha must be >= 0")
        if distance != "euclidean":
            raise ValueError("only euclidean distance is supported")
        self.k = int(k)
        self.alpha = float(alpha)
        self.standardize = standardize
        self.distance = distance

    def _prep(self, X):
        X = np.asarray(X, dtype=float)
        return self.scaler_.transform(X) if self.standardize else X

    def fit(self, train: Dataset) -> "KnnClassifier":
        if self.k > train.n_samples:
            raise ValueError(f"k={self.k} exceeds the {train.n_samples} training samples")
        self.num_classes = train.num_classes
        self.scaler_ = Standardizer().fit(train.features)
        self.tree_ = cKDTree(self._prep(train.features))
        self.labels_ = np.asarray(train.labels)
        return self

    def neighbor_counts(self, X) -> np.ndarray:
        """Class votes among the ``k`` nearest training points.

        Training points tied with the k-th nearest distance share the
        remaining votes in proportion to their labels, so the result does not
        depend on how the search orders equidistant points.
        """
        Z = self._prep(X)
        M = self.num_classes
        n_train = len(self.labels_)
        kq = min(self.k + 1, n_train)
        dist, idx = self.tree_.query(Z, k=kq)
        dist = np.asarray(dist).reshape(len(Z), -1)
        idx = np.asarray(idx).reshape(len(Z), -1)
        lab = self.labels_[idx[:, : self.k]]
        counts = np.stack([(lab == m).sum(axis=1) for m in range(M)], axis=1).astype(float)
        if kq == self.k:
            # Every training point is a neighbour; no boundary to resolve.
            return counts
        dk = dist[:, self.k - 1]
        tied = dist[:, self.k] <= dk * (1 + 1e-12) + 1e-300
        if tied.any():
            rows = np.flatnonzero(tied)
            uniq, inv = np.unique(Z[rows], axis=0, return_inverse=True)
            inv = np.asarray(inv).ravel()
            for u, q in enumerate(uniq):
                r0 = rows[np.flatnonzero(inv == u)[0]]
                counts[rows[inv == u]] = self._tied_counts(q, dk[r0])
        return counts

    def _tied_counts(self, q, dk):
        M = self.num_classes
        ball = np.asarray(self.tree_.query_ball_point(q, dk * (1 + 1e-12) + 1e-300))
        d = np.sqrt(np.sum((self.tree_.data[ball] - q) ** 2, axis=1))
        inner = d < dk * (1 - 1e-12)
        closer = np.bincount(self.labels_[ball[inner]], minlength=M).astype(float)
        edge = np.bincount(self.labels_[ball[~inner]], minlength=M).astype(float)
        rest = self.k - closer.sum()
        return closer + rest * edge / edge.sum()

    def predict_proba(self, X) -> np.ndarray:
        counts = self.neighbor_counts(X)
        return (counts + self.alpha) / (self.k + self.alpha * self.num_classes)


def fit_knn(train: Dataset, hp: dict | None = None, seed: int = 0) -> KnnClassifier:
    # k-NN is deterministic; ``seed`` is accepted for a uniform fitting signature.
    return KnnClassifier(**(hp or {})).fit(train)

"""Feature screening for high-dimensional inputs."""

from __future__ import annotations

import numpy as np
from sklearn.ensemble import RandomForestClassifier
from sklearn.feature_selection import f_classif

from ..data import Dataset


def feature_scores(dataset: Dataset, seed: int = 0) -> tuple[np.ndarray, str]:
    """Impurity importances of 50 depth-3 trees, or ANOVA F-scores as fallback."""
    try:
        forest = RandomForestClassifier(n_estimators=50, max_depth=3, random_state=seed % (2**32))
        forest.fit(dataset.features, dataset.labels)
        imp = forest.feature_importances_
        if np.all(np.isfinite(imp)) and imp.sum() > 0:
            return imp, "forest-importance"
    except ValueError:
        pass
    with np.errstate(divide="ignore", invalid="ignore"):
        f, _ = f_classif(dataset.features, dataset.labels)
    return np.nan_to_num(f, nan=0.0, posinf=np.finfo(float).max), "anova-f"


def reduce_features(dataset: Dataset, target_d: int, seed: int = 0):
    """Keep the ``target_d`` highest-scoring columns.

    Returns
    -------
    reduced : Dataset
    column_map : dict
        ``{"columns": kept original indices (in original order), "scores": ...,
        "scorer": ...}``.
    """
    d = dataset.n_features
    if target_d <= 0:
        raise ValueError("target_d must be positive")
    if target_d > d:
        raise ValueError(f"target_d={target_d} exceeds the {d} available columns")
    if target_d == d:
        keep = np.arange(d)
        scores, scorer = np.ones(d), "identity"
    else:
        scores, scorer = feature_scores(dataset, seed)
        keep = np.sort(np.argsort(-scores, kind="stable")[:target_d])
    names = tuple(dataset.feature_names[i] for i in keep) if dataset.feature_names else ()
    reduced = dataset.with_features(dataset.features[:, keep], names)
    return reduced, {"columns": keep.tolist(), "scores": np.asarray(scores).tolist(), "scorer": scorer}

"""Probabilistic classifier portfolio and its hyperparameter search."""

from .base import MarginalPredictor, ProbClassifier, clip_probs, fit_marginal_predictor
from .features import reduce_features
from .gmm import EMDegenerateError, GaussianMixture, GmmBayesClassifier, fit_gmm_aic, fit_gmm_bayes
from .knn import KnnClassifier, fit_knn
from .nets import SoftmaxNet, TrainingDivergedError, fit_softmax_net
from .search import (
    DEFAULT_RANGES,
    PORTFOLIO,
    AllCandidatesFailedError,
    ModelCandidate,
    balanced_error,
    random_search,
)

__all__ = [
    "ProbClassifier",
    "MarginalPredictor",
    "fit_marginal_predictor",
    "clip_probs",
    "SoftmaxNet",
    "fit_softmax_net",
    "TrainingDivergedError",
    "GaussianMixture",
    "GmmBayesClassifier",
    "fit_gmm_bayes",
    "fit_gmm_aic",
    "EMDegenerateError",
    "KnnClassifier",
    "fit_knn",
    "ModelCandidate",
    "random_search",
    "AllCandidatesFailedError",
    "DEFAULT_RANGES",
    "PORTFOLIO",
    "balanced_error",
    "reduce_features",
]

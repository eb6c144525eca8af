"""Random-search hyperparameter optimisation over the classifier portfolio."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..data import Dataset, SplitPlan, child_seeds
from .base import fit_marginal_predictor
from .gmm import fit_gmm_bayes
from .knn import fit_knn
from .nets import fit_softmax_net

log = logging.getLogger(__name__)

OBJECTIVES = ("BER", "AIC", "MSE-proxy")
PORTFOLIO = ("softmax-net", "pc-softmax-net", "gmm-bayes", "knn")

# Range entries: ("int", lo, hi, log) | ("float", lo, hi, log) | ("choice", options)
_NET_RANGES = {
    "hidden_layers": ("int", 0, 3, False),
    "units": ("int", 8, 128, True),
    "learning_rate": ("float", 1e-3, 3e-2, True),
    "epochs": ("int", 30, 150, True),
    "batch_size": ("choice", (32, 64, 128)),
    "l2": ("float", 1e-8, 1e-3, True),
}
DEFAULT_RANGES = {
    "softmax-net": dict(_NET_RANGES),
    "pc-softmax-net": dict(_NET_RANGES),
    "gmm-bayes": {
        "n_components": ("int", 1, 4, False),
        "covariance": ("choice", ("full", "diag", "tied", "spherical")),
        "reg": ("float", 1e-10, 1e-1, True),
    },
    "knn": {"k": ("int", 1, 100, True)},
    "marginal": {},
}


def _fit_pc_net(train, hp, seed):
    return fit_softmax_net(train, {**hp, "head": "pc-softmax"}, seed)


def _fit_marginal(train, hp, seed):
    return fit_marginal_predictor(train)


FITTERS = {
    "softmax-net": fit_softmax_net,
    "pc-softmax-net": _fit_pc_net,
    "gmm-bayes": fit_gmm_bayes,
    "knn": fit_knn,
    "marginal": _fit_marginal,
}


def register_family(name: str, fitter, ranges: dict) -> None:
    """Make an extra model family available to :func:`random_search`."""
    FITTERS[name] = fitter
    DEFAULT_RANGES[name] = dict(ranges)


class AllCandidatesFailedError(RuntimeError):
    def __init__(self, failures):
        self.failures = failures
        lines = "; ".join(f"{f['family']} {f['hyperparameters']}: {f['error']}" for f in failures[:10])
        super().__init__(f"all {len(failures)} candidates failed: {lines}")


@dataclass
class ModelCandidate:
    """A hyperparameter configuration with its validation score."""

    family: str
    hyperparameters: dict
    score: float = math.nan
    rank: int = -1
    fold_scores: list = field(default_factory=list)
    order: int = 0

    def fit(self, train: Dataset, seed: int = 0):
        return FITTERS[self.family](train, dict(self.hyperparameters), seed)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "hyperparameters": {k: _plain(v) for k, v in self.hyperparameters.items()},
            "score": float(self.score),
            "rank": int(self.rank),
            "fold_scores": [float(s) for s in self.fold_scores],
        }

    @property
    def name(self) -> str:
        return f"{self.family}#{self.order}"


def _plain(v):
    if isinstance(v, np.generic):
        return v.item()
    return v


def sample_hyperparameters(ranges: dict, rng) -> dict:
    hp = {}
    for name, rule in ranges.items():
        kind = rule[0]
        if kind == "choice":
            opts = rule[1]
            hp[name] = _plain(opts[rng.integers(len(opts))])
            continue
        lo, hi, logscale = rule[1], rule[2], rule[3]
        if kind == "int":
            if logscale:
                v = int(math.floor(math.exp(rng.uniform(math.log(lo), math.log(hi + 1)))))
            else:
                v = int(rng.integers(lo, hi + 1))
            hp[name] = min(max(v, lo), hi)
        elif kind == "float":
            u = rng.uniform(math.log(lo), math.log(hi)) if logscale else rng.uniform(lo, hi)
            hp[name] = float(math.exp(u) if logscale else u)
        else:
            raise ValueError(f"unknown parameter kind {kind!r} for {name}")
    return hp


def balanced_error(y_true, y_pred, num_classes: int) -> float:
    """One minus the mean per-class recall over classes present in ``y_true``.

    For two classes this is the mean of FPR and FNR.
    """
    recalls = []
    for m in range(num_classes):
        sel = y_true == m
        if sel.any():
            recalls.append(float(np.mean(y_pred[sel] == m)))
    return 1.0 - float(np.mean(recalls))


def score_model(model, train: Dataset, val: Dataset, objective: str) -> float:
    if objective == "BER":
        return balanced_error(val.labels, model.predict(val.features), val.num_classes)
    if objective == "AIC":
        if not hasattr(model, "aic"):
            raise ValueError(f"{type(model).__name__} does not expose an AIC")
        return float(model.aic(val))
    if objective == "MSE-proxy":
        if not hasattr(model, "mse_proxy"):
            raise ValueError(f"{type(model).__name__} does not expose an MSE proxy")
        return float(model.mse_proxy(val))
    raise ValueError(f"unknown objective {objective!r}")


def _evaluate(task):
    family, hp, seed, dataset, splits, objective = task
    scores = []
    try:
        for i, (tr, va) in enumerate(splits):
            train, val = dataset.subset(tr), dataset.subset(va)
            model = FITTERS[family](train, dict(hp), seed + i)
            s = score_model(model, train, val, objective)
            if not np.isfinite(s):
                raise FloatingPointError(f"non-finite objective {s}")
            scores.append(s)
    except Exception as exc:  # candidate failures are recorded, not fatal
        return None, f"{type(exc).__name__}: {exc}"
    return scores, None


def random_search(family, ranges: dict | None, budget: int, objective: str,
                  splits: SplitPlan, seed: int, dataset: Dataset, n_jobs: int = 1):
    """Score ``budget`` random configurations and rank them.

    Parameters
    ----------
    family : str or sequence of str
        One family, or several sharing the budget round-robin.
    ranges : dict, optional
        Per-family search spaces; defaults to :data:`DEFAULT_RANGES`.
    budget : int
        Number of configurations evaluated.
    objective : {"BER", "AIC", "MSE-proxy"}
        Validation objective, averaged over the splits (lower is better).
    splits : SplitPlan
    seed : int
    dataset : Dataset

    Returns
    -------
    list of ModelCandidate
        Sorted by ascending score; ties keep sampling order. Candidates that
        raised are dropped and listed in ``random_search.last_failures``.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}")
    families = [family] if isinstance(family, str) else list(family)
    for fam in families:
        if fam not in FITTERS:
            raise ValueError(f"unknown model family {fam!r}")
    if ranges and all(isinstance(v, tuple) for v in ranges.values()):
        # A bare parameter space applies to every requested family.
        ranges = {fam: ranges for fam in families}
    space = {fam: (ranges or {}).get(fam, DEFAULT_RANGES[fam]) for fam in families}

    rng = np.random.default_rng(child_seeds(seed, 1)[0])
    fit_seeds = child_seeds(seed + 1, budget)
    split_idx = splits.split(dataset)
    tasks, meta = [], []
    for i in range(budget):
        fam = families[i % len(families)]
        hp = sample_hyperparameters(space[fam], rng)
        tasks.append((fam, hp, fit_seeds[i] % (2**31), dataset, split_idx, objective))
        meta.append((fam, hp))

    if n_jobs and n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            results = list(ex.map(_evaluate, tasks))
    else:
        results = [_evaluate(t) for t in tasks]

    candidates, failures = [], []
    for i, ((fam, hp), (scores, err)) in enumerate(zip(meta, results)):
        if err is not None:
            log.debug("candidate %s %s failed: %s", fam, hp, err)
            failures.append({"family": fam, "hyperparameters": hp, "error": err})
            continue
        candidates.append(ModelCandidate(fam, hp, float(np.mean(scores)), -1, scores, i))
    random_search.last_failures = failures
    if not candidates:
        raise AllCandidatesFailedError(failures)
    candidates.sort(key=lambda c: (c.score, c.order))
    for r, c in enumerate(candidates):
        c.rank = r
    return candidates


random_search.last_failures = []

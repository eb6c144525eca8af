"""Information-leakage detection pipeline and its evaluation.

A detection run selects the best ``J`` models by random search, refits each
on the training side of every outer stratified fold, and turns the fold-wise
results into one p-value per model: a one-sided t-test on MI estimates, a
corrected paired t-test of model accuracy against the majority predictor,
or aggregated Fisher exact tests on confusion matrices. Holm-Bonferroni over
the ``J`` p-values gives the number of rejections ``tau``; a leak is
reported when ``tau`` reaches the threshold (``floor(J/2)`` by default).
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .calibrate import METHODS as CALIBRATION_METHODS
from .calibrate import apply_calibrator, fit_calibrator
from .data import (
    ConfusionMatrix,
    Dataset,
    SplitPlan,
    child_seeds,
    class_marginal,
    confusion_matrix,
    mccv_splits,
    stratified_kfold,
)
from .miest import mi_gmm, mi_logloss, mi_midpoint, mi_mine, mi_pcsoftmax
from .models.base import fit_marginal_predictor
from .models.search import PORTFOLIO, ModelCandidate, random_search
from .stats import aggregate_pvalues, corrected_paired_ttest, fisher_exact, holm_bonferroni, ott_pvalue

log = logging.getLogger(__name__)

__all__ = [
    "APPROACHES",
    "IldConfig",
    "DetectionReport",
    "IldDataset",
    "run_ild",
    "run_ild_multi",
    "evaluate_ild",
    "nmae",
]

APPROACHES = ("mid-point", "log-loss", "cal-log-loss", "gmm", "mine", "pc-softmax",
              "ptt-majority", "fet-mean", "fet-median")
MI_APPROACHES = ("mid-point", "log-loss", "cal-log-loss", "gmm", "mine", "pc-softmax")

# Which model families are searched, and with which objective, per approach.
_SEARCH_GROUP = {a: "portfolio" for a in ("mid-point", "log-loss", "cal-log-loss",
                                          "ptt-majority", "fet-mean", "fet-median")}
_SEARCH_GROUP.update({"gmm": "gmm", "mine": "mine", "pc-softmax": "pc-softmax"})
_GROUP_OBJECTIVE = {"portfolio": "BER", "gmm": "AIC", "mine": "MSE-proxy", "pc-softmax": "BER"}


@dataclass(frozen=True)
class IldConfig:
    """Detection settings.

    Parameters
    ----------
    approach : str
        One of :data:`APPROACHES`.
    calibration : str
        Calibration method used by ``cal-log-loss``.
    alpha : float
        Family-wise significance level for Holm-Bonferroni.
    n_models : int
        Number ``J`` of top-ranked models tested.
    threshold : int, optional
        Rejections needed to report a leak; ``floor(J/2)`` when omitted.
    outer_folds : int
        Stratified folds producing the per-model samples.
    hpo_budget : int
        Random-search evaluations per search.
    inner_repeats, inner_val_fraction
        Monte-Carlo CV used to score candidates.
    calibration_fraction : float
        Share of each training fold held out to fit the calibrator.
    families : tuple of str
        Classifier portfolio searched by classifier-based approaches.
    ll_mode : {"cross-entropy", "predictive"}
        Conditional-entropy term of log-loss estimates.
    mine_hp : dict
        Extra MINE settings (ensemble size, epochs, patience).
    n_jobs : int
        Worker processes for fold fits.
    """

    approach: str = "cal-log-loss"
    calibration: str = "isotonic"
    alpha: float = 0.01
    n_models: int = 10
    threshold: int | None = None
    outer_folds: int = 10
    hpo_budget: int = 100
    inner_repeats: int = 3
    inner_val_fraction: float = 0.3
    calibration_fraction: float = 0.3
    families: tuple = PORTFOLIO
    ll_mode: str = "cross-entropy"
    mine_hp: dict = field(default_factory=lambda: {"ensemble": 1, "epochs": 300, "patience": 50})
    n_jobs: int = 1

    def __post_init__(self):
        if self.approach not in APPROACHES:
            raise ValueError(f"approach must be one of {APPROACHES}")
        if self.calibration not in CALIBRATION_METHODS:
            raise ValueError(f"calibration must be one of {CALIBRATION_METHODS}")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.n_models < 1:
            raise ValueError("n_models must be >= 1")
        if self.threshold is not None and not 1 <= self.threshold <= self.n_models:
            raise ValueError("threshold must lie in [1, n_models]")
        if self.outer_folds < 2:
            raise ValueError("outer_folds must be >= 2")
        if self.hpo_budget < 1:
            raise ValueError("hpo_budget must be >= 1")
        if self.ll_mode not in ("cross-entropy", "predictive"):
            raise ValueError("ll_mode must be 'cross-entropy' or 'predictive'")
        object.__setattr__(self, "families", tuple(self.families))

    @property
    def rejection_threshold(self) -> int:
        return self.threshold if self.threshold is not None else max(1, self.n_models // 2)

    def effective_threshold(self, n_available: int) -> int:
        """Threshold after dropping failed models (never below one rejection)."""
        if n_available >= self.n_models:
            return self.rejection_threshold
        return max(1, min(self.rejection_threshold, n_available // 2))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["families"] = list(self.families)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "IldConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown detection config key(s): {', '.join(unknown)}")
        return cls(**d)


@dataclass
class DetectionReport:
    """Outcome of one detection run."""

    approach: str
    p_values: list
    tau: int
    threshold: int
    alpha: float
    models: list
    estimates: list
    holm: dict
    flagged: bool = False
    failures: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seed: int = 0
    metadata: dict = field(default_factory=dict)

    @property
    def leak(self) -> bool:
        return self.tau >= self.threshold

    @property
    def decision(self) -> str:
        return "leak" if self.leak else "no-leak"

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "approach": self.approach,
            "decision": self.decision,
            "tau": self.tau,
            "threshold": self.threshold,
            "alpha": self.alpha,
            "p_values": [float(p) for p in self.p_values],
            "models": self.models,
            "estimates": self.estimates,
            "holm": self.holm,
            "flagged": self.flagged,
            "failures": self.failures,
            "config": self.config,
            "seed": self.seed,
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def summary(self) -> str:
        lines = [f"approach: {self.approach}   decision: {self.decision}   "
                 f"tau: {self.tau} (threshold {self.threshold}, alpha {self.alpha})",
                 f"{'rank':>4}  {'model':<18} {'p-value':>11}  mean"]
        for i, (m, p, est) in enumerate(zip(self.models, self.p_values, self.estimates)):
            vals = est.get("values") or est.get("model_accuracy") or est.get("fold_p_values") or [math.nan]
            lines.append(f"{i:>4}  {m['family']:<18} {p:>11.3g}  {np.mean(vals):.4f}")
        if self.flagged:
            lines.append(f"note: only {len(self.models)} of the requested models succeeded")
        return "\n".join(lines)


@dataclass(frozen=True)
class IldDataset:
    """Systems with known leak status ``z`` (1 = leaking)."""

    systems: tuple

    def __post_init__(self):
        systems = tuple((d, int(z)) for d, z in self.systems)
        if not systems:
            raise ValueError("an ILD dataset needs at least one system")
        if any(z not in (0, 1) for _, z in systems):
            raise ValueError("leak labels must be 0 or 1")
        object.__setattr__(self, "systems", systems)

    def __len__(self):
        return len(self.systems)


def nmae(estimates, truths, h_y: float) -> float:
    """Mean absolute error normalised by the label entropy."""
    est = np.asarray(estimates, dtype=float)
    tru = np.asarray(truths, dtype=float)
    if est.shape != tru.shape:
        raise ValueError("estimates and truths must have equal length")
    if not h_y > 0:
        raise ValueError("label entropy must be positive")
    return float(np.mean(np.abs(tru - est)) / h_y)


# -- fold work -----------------------------------------------------------------

def _classifier_fold(cand, train, test, needs, cfg, seed):
    out = {}
    M = train.num_classes
    test_marg = class_marginal(test)
    if needs & {"log-loss", "mid-point", "ptt-majority", "fet-mean", "fet-median"}:
        model = cand.fit(train, seed)
        probs = model.predict_proba(test.features)
        pred = np.argmax(probs, axis=1)
        acc = float(np.mean(pred == test.labels))
        if "log-loss" in needs:
            out["log-loss"] = mi_logloss(probs, test.labels, test_marg, mode=cfg.ll_mode).value
        if "mid-point" in needs:
            err = min(1.0 - acc, (M - 1) / M)
            out["mid-point"] = mi_midpoint(err, test_marg, M).value
        if "ptt-majority" in needs:
            base = fit_marginal_predictor(train)
            out["ptt-majority"] = (acc, float(np.mean(base.predict(test.features) == test.labels)))
        if needs & {"fet-mean", "fet-median"}:
            cm = confusion_matrix(test.labels, pred, M)
            out["fet"] = (fisher_exact(cm.binarized()).p_value, cm.to_list())
    if "cal-log-loss" in needs:
        fit_idx, cal_idx = mccv_splits(train, 1, cfg.calibration_fraction, seed)[0]
        model = cand.fit(train.subset(fit_idx), seed)
        cal_part = train.subset(cal_idx)
        cal = fit_calibrator(cfg.calibration, model.predict_proba(cal_part.features), cal_part.labels)
        probs = apply_calibrator(cal, model.predict_proba(test.features))
        out["cal-log-loss"] = mi_logloss(probs, test.labels, test_marg, mode=cfg.ll_mode).value
    return out


def _gmm_hp(hp):
    return {"max_components": hp.get("n_components", 1), "covariance": hp.get("covariance", "full"),
            "reg": hp.get("reg", 1e-6)}


def _fold_task(task):
    group, cand, fold, tr, te, dataset, needs, cfg, seed = task
    train, test = dataset.subset(tr), dataset.subset(te)
    try:
        if group == "portfolio":
            res = _classifier_fold(cand, train, test, needs, cfg, seed)
        elif group == "gmm":
            res = {"gmm": mi_gmm(train, _gmm_hp(cand.hyperparameters), seed, eval_dataset=test).value}
        elif group == "mine":
            res = {"mine": mi_mine(train, {**cand.hyperparameters, **cfg.mine_hp}, seed,
                                   eval_dataset=test).value}
        else:
            hp = {k: v for k, v in cand.hyperparameters.items() if k != "head"}
            res = {"pc-softmax": mi_pcsoftmax(train, hp, seed, eval_dataset=test).value}
    except Exception as exc:  # a failing model is dropped, not fatal
        return group, cand.order, fold, None, f"{type(exc).__name__}: {exc}"
    return group, cand.order, fold, res, None


def _search(dataset, cfg, group, seed):
    objective = _GROUP_OBJECTIVE[group]
    families = {"portfolio": cfg.families, "gmm": "gmm-bayes", "mine": "mine",
                "pc-softmax": "pc-softmax-net"}[group]
    plan = SplitPlan("monte-carlo-cv", cfg.inner_repeats, cfg.inner_val_fraction, seed)
    ranked = random_search(families, None, cfg.hpo_budget, objective, plan, seed, dataset,
                           n_jobs=cfg.n_jobs)
    failures = list(random_search.last_failures)
    return ranked[: cfg.n_models], failures


def _p_value(approach, values):
    if approach in MI_APPROACHES:
        return ott_pvalue(values, 0.0).p_value
    if approach == "ptt-majority":
        a, b = zip(*values)
        return corrected_paired_ttest(a, b).p_value
    mode = "mean" if approach == "fet-mean" else "median"
    return aggregate_pvalues([v[0] for v in values], mode)


def _estimate_record(approach, values):
    if approach in MI_APPROACHES:
        return {"values": [float(v) for v in values]}
    if approach == "ptt-majority":
        return {"model_accuracy": [float(a) for a, _ in values],
                "majority_accuracy": [float(b) for _, b in values]}
    return {"fold_p_values": [float(p) for p, _ in values],
            "confusion_matrices": [cm for _, cm in values]}


def run_ild_multi(dataset: Dataset, cfg: IldConfig, approaches, seed: int = 0) -> dict:
    """Run several approaches on one dataset, sharing searches and fold fits.

    Returns a mapping from approach name to :class:`DetectionReport`. Each
    report is identical to what :func:`run_ild` produces for that approach.
    """
    approaches = list(dict.fromkeys(approaches))
    for a in approaches:
        if a not in APPROACHES:
            raise ValueError(f"unknown approach {a!r}")
    t0 = time.perf_counter()
    search_seed, fold_seed, model_seed = child_seeds(seed, 3)
    search_seed %= 2**31
    folds = stratified_kfold(dataset, cfg.outer_folds, fold_seed)
    groups = {}
    for a in approaches:
        groups.setdefault(_SEARCH_GROUP[a], set()).add(a)

    picked, search_fail = {}, {}
    for g in groups:
        picked[g], search_fail[g] = _search(dataset, cfg, g, search_seed)
    t_search = time.perf_counter() - t0

    seeds = child_seeds(model_seed, cfg.outer_folds)
    tasks = []
    for g, needs in groups.items():
        for cand in picked[g]:
            for f, (tr, te) in enumerate(folds):
                tasks.append((g, cand, f, tr, te, dataset, frozenset(needs), cfg, seeds[f] % 2**31))
    if cfg.n_jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.n_jobs) as ex:
            results = list(ex.map(_fold_task, tasks))
    else:
        results = [_fold_task(t) for t in tasks]

    fold_out, fold_err = {}, {}
    for g, order, f, res, err in results:
        if err is not None:
            fold_err.setdefault((g, order), []).append(f"fold {f}: {err}")
        else:
            fold_out.setdefault((g, order), {})[f] = res
    elapsed = time.perf_counter() - t0

    reports = {}
    for a in approaches:
        g = _SEARCH_GROUP[a]
        key = "fet" if a.startswith("fet") else a
        models, pvals, ests, failures = [], [], [], list(search_fail[g])
        for cand in picked[g]:
            errs = fold_err.get((g, cand.order))
            if errs:
                failures.append({"family": cand.family, "hyperparameters": cand.hyperparameters,
                                 "error": errs[0]})
                continue
            values = [fold_out[(g, cand.order)][f][key] for f in range(cfg.outer_folds)]
            pvals.append(_p_value(a, values))
            ests.append(_estimate_record(a, values))
            models.append({"name": cand.name, **cand.to_dict()})
        if not models:
            raise RuntimeError(f"{a}: every selected model failed: {failures[:3]}")
        holm = holm_bonferroni(pvals, cfg.alpha)
        reports[a] = DetectionReport(
            approach=a, p_values=pvals, tau=holm.tau,
            threshold=cfg.effective_threshold(len(models)), alpha=cfg.alpha,
            models=models, estimates=ests, holm=holm.to_dict(),
            flagged=len(models) < cfg.n_models, failures=failures,
            config={**replace(cfg, approach=a).to_dict()}, seed=seed,
            metadata={"search_seconds": round(t_search, 3), "total_seconds": round(elapsed, 3),
                      "n_samples": dataset.n_samples, "n_features": dataset.n_features,
                      "num_classes": dataset.num_classes})
    return reports


def run_ild(dataset: Dataset, cfg: IldConfig, seed: int = 0) -> DetectionReport:
    """Detect information leakage in ``dataset`` with ``cfg.approach``."""
    return run_ild_multi(dataset, cfg, [cfg.approach], seed)[cfg.approach]


def _detection_metrics(z, zhat) -> dict:
    z = np.asarray(z, dtype=int)
    zhat = np.asarray(zhat, dtype=int)
    cm = ConfusionMatrix(confusion_matrix(z, zhat, 2).counts)
    neg = cm.tn + cm.fp
    pos = cm.tp + cm.fn
    return {
        "accuracy": float(np.mean(z == zhat)) if len(z) else math.nan,
        "fpr": cm.fp / neg if neg else 0.0,
        "fnr": cm.fn / pos if pos else 0.0,
    }


def evaluate_ild(ildset: IldDataset, cfg: IldConfig, seed: int = 0, approaches=None) -> dict:
    """Detection accuracy, FPR and FNR over systems with known leak status.

    With ``approaches`` given, every listed approach is evaluated on shared
    fits and the result maps approach name to its metrics; otherwise the
    metrics of ``cfg.approach`` are returned directly. Systems whose run
    raises are recorded under ``"errors"`` and left out of the metrics.
    """
    names = [cfg.approach] if approaches is None else list(approaches)
    seeds = child_seeds(seed, len(ildset))
    decisions = {a: [] for a in names}
    truths = {a: [] for a in names}
    errors = []
    for i, ((data, z), s) in enumerate(zip(ildset.systems, seeds)):
        try:
            reps = run_ild_multi(data, cfg, names, s % 2**31)
        except Exception as exc:
            errors.append({"system": i, "error": f"{type(exc).__name__}: {exc}"})
            continue
        for a in names:
            decisions[a].append(int(reps[a].leak))
            truths[a].append(z)
    out = {}
    for a in names:
        m = _detection_metrics(truths[a], decisions[a])
        m.update({"decisions": decisions[a], "truth": truths[a], "errors": errors,
                  "n_systems": len(ildset)})
        out[a] = m
    return out[names[0]] if approaches is None else out

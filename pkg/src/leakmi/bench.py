"""Synthetic benchmark sweeps comparing estimates with ground-truth MI."""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .calibrate import apply_calibrator, fit_calibrator
from .data import SplitPlan, child_seeds, class_marginal, entropy_bits, mccv_splits
from .detect import nmae
from .miest import mi_gmm, mi_logloss, mi_midpoint, mi_mine, mi_pcsoftmax
from .models.search import random_search
from .synth import SynthConfig, generate_system, ground_truth_mi

log = logging.getLogger(__name__)

__all__ = ["BenchConfig", "BENCH_COLUMNS", "BENCH_METHODS", "benchmark", "rows_to_csv"]

BENCH_COLUMNS = ("technique", "method", "M", "d", "r", "epsilon", "seed",
                 "truth_bits", "estimate_bits", "nmae")
BENCH_METHODS = ("log-loss", "cal-log-loss", "mid-point", "gmm", "mine", "pc-softmax")
_CLASSIFIER_METHODS = ("log-loss", "cal-log-loss", "mid-point")


@dataclass(frozen=True)
class BenchConfig:
    """Sweep grid and estimator settings.

    ``imbalance`` values of ``1/M`` or more are generated balanced; smaller
    ones use ``imbalanced_method``.
    """

    techniques: tuple = ("perturbation",)
    methods: tuple = ("log-loss", "cal-log-loss", "mid-point", "gmm")
    classes: tuple = (2,)
    dims: tuple = (2,)
    noise: tuple = (0.0, 0.5, 1.0)
    imbalance: tuple = (0.5,)
    imbalanced_method: str = "minority"
    seeds: int = 10
    base_seed: int = 0
    samples_per_class: int = 1000
    test_fraction: float = 0.3
    calibration: str = "isotonic"
    calibration_fraction: float = 0.3
    ll_mode: str = "predictive"
    families: tuple = ("gmm-bayes", "knn")
    hpo_budget: int = 6
    hpo_repeats: int = 3
    gmm_hp: dict = field(default_factory=lambda: {"max_components": 3, "covariance": "full"})
    mine_hp: dict = field(default_factory=lambda: {"ensemble": 3, "epochs": 300, "patience": 50})
    pc_hp: dict = field(default_factory=dict)
    n_jobs: int = 1

    def __post_init__(self):
        for name in ("techniques", "methods", "classes", "dims", "noise", "imbalance", "families"):
            v = getattr(self, name)
            object.__setattr__(self, name, tuple(v) if isinstance(v, (list, tuple)) else (v,))
        bad = [m for m in self.methods if m not in BENCH_METHODS]
        if bad:
            raise ValueError(f"unknown benchmark method(s) {bad}; choose from {BENCH_METHODS}")
        if self.seeds < 1:
            raise ValueError("seeds must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "BenchConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown benchmark config key(s): {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def cells(self):
        return list(itertools.product(self.techniques, self.classes, self.dims,
                                      self.imbalance, self.noise))


def _synth_config(cfg: BenchConfig, technique, M, d, r, eps, seed) -> SynthConfig:
    if r >= 1.0 / M - 1e-12:
        return SynthConfig(technique, "balanced", M, d, eps, None, cfg.samples_per_class, seed)
    return SynthConfig(technique, cfg.imbalanced_method, M, d, eps, r, cfg.samples_per_class, seed)


def _estimate(cfg: BenchConfig, method, train, test, best, seed):
    M = train.num_classes
    test_marg = class_marginal(test)
    if method == "log-loss":
        model = best.fit(train, seed)
        return mi_logloss(model.predict_proba(test.features), test.labels, test_marg,
                          mode=cfg.ll_mode).value
    if method == "cal-log-loss":
        fit_idx, cal_idx = mccv_splits(train, 1, cfg.calibration_fraction, seed)[0]
        model = best.fit(train.subset(fit_idx), seed)
        cal_part = train.subset(cal_idx)
        cal = fit_calibrator(cfg.calibration, model.predict_proba(cal_part.features), cal_part.labels)
        probs = apply_calibrator(cal, model.predict_proba(test.features))
        return mi_logloss(probs, test.labels, test_marg, mode=cfg.ll_mode).value
    if method == "mid-point":
        model = best.fit(train, seed)
        err = min(float(np.mean(model.predict(test.features) != test.labels)), (M - 1) / M)
        return mi_midpoint(err, test_marg, M).value
    if method == "gmm":
        return mi_gmm(train, cfg.gmm_hp, seed, eval_dataset=test).value
    if method == "mine":
        return mi_mine(train, cfg.mine_hp, seed, eval_dataset=test).value
    if method == "pc-softmax":
        return mi_pcsoftmax(train, cfg.pc_hp, seed, eval_dataset=test).value
    raise ValueError(method)


def _run_cell(task):
    cfg, (technique, M, d, r, eps), seed = task
    rows, errors = [], []
    base = {"technique": technique, "M": M, "d": d, "r": r, "epsilon": eps, "seed": seed}
    try:
        data, gt = generate_system(_synth_config(cfg, technique, M, d, r, eps, seed))
        truth = ground_truth_mi(data, gt)
        h_y = entropy_bits(gt.prior)
        s_split, s_search, s_fit = (s % 2**31 for s in child_seeds(seed, 3))
        tr, te = mccv_splits(data, 1, cfg.test_fraction, s_split)[0]
        train, test = data.subset(tr), data.subset(te)
        best = None
        if any(m in _CLASSIFIER_METHODS for m in cfg.methods):
            plan = SplitPlan("monte-carlo-cv", cfg.hpo_repeats, 0.3, s_search)
            best = random_search(cfg.families, None, cfg.hpo_budget, "BER", plan, s_search, train)[0]
    except Exception as exc:
        return rows, [{**base, "method": "*", "error": f"{type(exc).__name__}: {exc}"}]
    for method in cfg.methods:
        try:
            est = _estimate(cfg, method, train, test, best, s_fit)
        except Exception as exc:
            errors.append({**base, "method": method, "error": f"{type(exc).__name__}: {exc}"})
            continue
        rows.append({**base, "method": method, "truth_bits": truth, "estimate_bits": est,
                     "nmae": nmae([est], [truth], h_y)})
    return rows, errors


def benchmark(config: BenchConfig | dict, return_errors: bool = False):
    """Run the sweep; one row per (cell, seed, method).

    Failed cells are logged and skipped. Rows follow :data:`BENCH_COLUMNS`.
    """
    cfg = config if isinstance(config, BenchConfig) else BenchConfig.from_dict(config)
    tasks = []
    for cell in cfg.cells():
        for s in range(cfg.seeds):
            tasks.append((cfg, cell, cfg.base_seed + s))
    if cfg.n_jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.n_jobs) as ex:
            results = list(ex.map(_run_cell, tasks))
    else:
        results = [_run_cell(t) for t in tasks]
    rows, errors = [], []
    for r, e in results:
        rows.extend(r)
        errors.extend(e)
    for e in errors:
        log.warning("benchmark cell failed: %s", e)
    return (rows, errors) if return_errors else rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=BENCH_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (repr(float(row[k])) if isinstance(row[k], float) else row[k])
                    for k in BENCH_COLUMNS})
    return buf.getvalue()

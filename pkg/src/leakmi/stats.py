"""Significance tests and multiple-testing correction."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.special import betainc, gammaln

from .data import ConfusionMatrix

__all__ = [
    "TestResult",
    "HolmOutcome",
    "student_t_cdf",
    "student_t_sf",
    "ott_pvalue",
    "corrected_paired_ttest",
    "fisher_exact",
    "holm_bonferroni",
    "aggregate_pvalues",
]

EXACT_FET_LIMIT = 1000
FET_SLACK = 1e-12


@dataclass(frozen=True)
class TestResult:
    p_value: float
    statistic: float
    test: str
    degenerate: bool = False
    details: dict = field(default_factory=dict)

    __test__ = False  # not a pytest class

    def __post_init__(self):
        if not 0.0 <= self.p_value <= 1.0:
            raise ValueError(f"p-value {self.p_value} outside [0, 1]")

    def to_dict(self) -> dict:
        return {"p_value": self.p_value, "statistic": self.statistic, "test": self.test,
                "degenerate": self.degenerate, "details": self.details}


@dataclass(frozen=True)
class HolmOutcome:
    """Step-down result; ``rejected`` is indexed like the input p-values."""

    tau: int
    rejected: tuple
    sorted_p: tuple
    thresholds: tuple
    order: tuple

    def to_dict(self) -> dict:
        return {"tau": self.tau, "rejected": list(self.rejected), "sorted_p": list(self.sorted_p),
                "thresholds": list(self.thresholds), "order": list(self.order)}


def student_t_sf(t, df):
    """Upper tail ``P(T > t)`` of Student's t via the regularised incomplete beta."""
    t = np.asarray(t, dtype=float)
    df = np.asarray(df, dtype=float)
    tail = 0.5 * betainc(0.5 * df, 0.5, df / (df + t * t))
    out = np.where(t >= 0, tail, 1.0 - tail)
    return out if out.ndim else float(out)


def student_t_cdf(t, df):
    """Student-t CDF with ``df`` degrees of freedom."""
    t = np.asarray(t, dtype=float)
    df = np.asarray(df, dtype=float)
    tail = 0.5 * betainc(0.5 * df, 0.5, df / (df + t * t))
    out = np.where(t >= 0, 1.0 - tail, tail)
    return out if out.ndim else float(out)


def _degenerate(mean_above: bool, name: str, details: dict) -> TestResult:
    # The t statistic is undefined; report 0 and carry the sign in the p-value.
    return TestResult(0.0 if mean_above else 1.0, 0.0, name, True, details)


def ott_pvalue(samples, mu0: float = 0.0) -> TestResult:
    """One-sided one-sample t-test of ``mean(samples) > mu0``.

    With zero sample variance the statistic is undefined: ``p = 0`` if the
    constant exceeds ``mu0`` and ``p = 1`` otherwise, flagged degenerate.
    """
    x = np.asarray(samples, dtype=float).ravel()
    K = len(x)
    if K < 2:
        raise ValueError("need at least two samples")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples must be finite")
    if np.all(x == x[0]):
        return _degenerate(bool(x[0] > mu0), "ott", {"mean": float(x[0]), "k": K})
    mean = float(x.mean())
    sd = float(x.std(ddof=1))
    t = (mean - mu0) / (sd / math.sqrt(K))
    return TestResult(float(student_t_sf(t, K - 1)), t, "ott", False,
                      {"mean": mean, "sd": sd, "k": K})


def corrected_paired_ttest(a, b) -> TestResult:
    """Paired t-test over K folds with the variance correction for overlapping training sets.

    The variance of the fold differences is scaled by ``1/K + 1/(K-1)``
    (test-to-train ratio of K-fold CV). One-sided: ``p = 1 - cdf(t)``.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    K = len(a)
    if K < 2:
        raise ValueError("need at least two paired samples")
    d = a - b
    if np.all(d == d[0]):
        return _degenerate(bool(d[0] > 0), "ptt", {"mean_diff": float(d[0]), "k": K})
    factor = 1.0 / K + 1.0 / (K - 1)
    var = float(d.var(ddof=1))
    t = float(d.mean()) / math.sqrt(var * factor)
    return TestResult(float(student_t_sf(t, K - 1)), t, "ptt", False,
                      {"mean_diff": float(d.mean()), "var": var, "variance_factor": factor, "k": K})


def _as_2x2(cm) -> tuple[int, int, int, int]:
    if isinstance(cm, ConfusionMatrix):
        counts = cm.binarized().counts if cm.counts.shape != (2, 2) else cm.counts
    else:
        counts = np.asarray(cm)
    if counts.shape != (2, 2):
        raise ValueError("Fisher's exact test needs a 2x2 table")
    vals = [int(v) for v in counts.ravel()]
    if any(v < 0 for v in vals) or sum(vals) == 0:
        raise ValueError("table must be non-negative with a positive total")
    return tuple(vals)


def fisher_exact(cm) -> TestResult:
    """Two-sided Fisher exact test on a binary confusion matrix.

    Sums the hypergeometric probabilities of every table with the observed
    margins whose probability does not exceed that of the observed table.
    Totals up to 1000 use exact integer arithmetic; larger ones work in log
    space with a relative slack of 1e-12 for ties. ``statistic`` is the
    probability of the observed table.
    """
    a, b, c, d = _as_2x2(cm)
    r1, r2, c1 = a + b, c + d, a + c
    n = r1 + r2
    lo, hi = max(0, c1 - r2), min(r1, c1)
    if n <= EXACT_FET_LIMIT:
        weights = [math.comb(r1, k) * math.comb(r2, c1 - k) for k in range(lo, hi + 1)]
        total = math.comb(n, c1)
        w_obs = weights[a - lo]
        p = Fraction(sum(w for w in weights if w <= w_obs), total)
        return TestResult(min(1.0, float(p)), float(Fraction(w_obs, total)), "fet", False,
                          {"table": [a, b, c, d], "exact": True})
    ks = np.arange(lo, hi + 1)

    def lcomb(n_, k_):
        return gammaln(n_ + 1) - gammaln(k_ + 1) - gammaln(n_ - k_ + 1)

    logw = lcomb(r1, ks) + lcomb(r2, c1 - ks) - lcomb(n, c1)
    lw_obs = logw[a - lo]
    keep = logw <= lw_obs + math.log1p(FET_SLACK)
    p = float(np.exp(logsumexp_1d(logw[keep])))
    return TestResult(min(1.0, p), float(math.exp(lw_obs)), "fet", False,
                      {"table": [a, b, c, d], "exact": False})


def logsumexp_1d(v):
    m = float(np.max(v))
    return m + math.log(float(np.sum(np.exp(v - m))))


def holm_bonferroni(p_values, alpha: float = 0.01) -> HolmOutcome:
    """Holm step-down: reject sorted ``p_j`` while ``p_j < alpha / (J + 1 - j)``."""
    p = np.asarray(p_values, dtype=float).ravel()
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if len(p) and (np.any(~np.isfinite(p)) or (p < 0).any() or (p > 1).any()):
        raise ValueError("p-values must lie in [0, 1]")
    J = len(p)
    order = np.argsort(p, kind="stable")
    sp = p[order]
    thr = alpha / (J + 1 - np.arange(1, J + 1))
    tau = 0
    while tau < J and sp[tau] < thr[tau]:
        tau += 1
    rejected = np.zeros(J, dtype=bool)
    rejected[order[:tau]] = True
    return HolmOutcome(tau, tuple(bool(r) for r in rejected), tuple(float(v) for v in sp),
                       tuple(float(v) for v in thr), tuple(int(i) for i in order))


def aggregate_pvalues(ps, mode: str = "median") -> float:
    """Combine p-values by their mean or median, clamped to [0, 1]."""
    p = np.asarray(ps, dtype=float).ravel()
    if len(p) == 0:
        raise ValueError("no p-values to aggregate")
    if mode == "mean":
        v = float(p.mean())
    elif mode == "median":
        v = float(np.median(p))
    else:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    return min(max(v, 0.0), 1.0)

"""Post-hoc probability calibration.

Isotonic, Platt, beta and histogram calibration act one-vs-rest on each class
column and the result is renormalised. For two classes only the positive
column is mapped and the other is its complement. Temperature scaling acts
jointly on log-probabilities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize, minimize_scalar
from scipy.special import expit, log_softmax, softmax

__all__ = ["METHODS", "Calibrator", "pav", "fit_calibrator", "apply_calibrator"]

METHODS = ("isotonic", "platt", "beta", "temperature", "histogram")
_EPS = 1e-12


def _check_probs(P, labels=None):
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[1] < 2:
        raise ValueError("probabilities must be an (N, M) matrix with M >= 2")
    if not np.all(np.isfinite(P)) or (P < -1e-12).any() or (P > 1 + 1e-12).any():
        raise ValueError("probabilities must be finite and in [0, 1]")
    if np.abs(P.sum(axis=1) - 1.0).max() > 1e-6:
        raise ValueError("probability rows must sum to 1")
    P = np.clip(P, 0.0, 1.0)
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (len(P),):
            raise ValueError("labels must align with probability rows")
        if (labels < 0).any() or (labels >= P.shape[1]).any():
            raise ValueError("label outside the probability columns")
    return P, labels


def pav(x, y, w=None):
    """Isotonic (non-decreasing) least-squares fit by pool-adjacent-violators.

    Parameters
    ----------
    x, y : array_like
        Scores and targets; equal scores are pooled first.
    w : array_like, optional
        Sample weights.

    Returns
    -------
    xs : ndarray
        Sorted distinct scores.
    fitted : ndarray
        Non-decreasing fitted value for each entry of ``xs``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=float)
    xs, inv = np.unique(x, return_inverse=True)
    wsum = np.bincount(inv, weights=w, minlength=len(xs))
    ysum = np.bincount(inv, weights=w * y, minlength=len(xs))
    # Blocks kept on a stack as (weighted mean, weight, count of distinct xs).
    means, weights, sizes = [], [], []
    for yi, wi in zip(ysum / wsum, wsum):
        means.append(yi)
        weights.append(wi)
        sizes.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            wt = weights[-2] + weights[-1]
            mu = (means[-2] * weights[-2] + means[-1] * weights[-1]) / wt
            sz = sizes[-2] + sizes[-1]
            del means[-1], weights[-1], sizes[-1]
            means[-1], weights[-1], sizes[-1] = mu, wt, sz
    fitted = np.repeat(means, sizes)
    return xs, fitted


def _fit_logistic(features, target, nonneg=()):
    """Minimise the logistic loss of ``features @ w[:-1] + w[-1]``."""
    n, k = features.shape

    def loss(w):
        z = features @ w[:-1] + w[-1]
        # log(1 + e^z) - t z, computed stably.
        nll = np.logaddexp(0.0, z) - target * z
        g = expit(z) - target
        grad = np.append(features.T @ g, g.sum()) / n
        return nll.mean(), grad

    w0 = np.zeros(k + 1)
    w0[:k] = 1.0
    bounds = [(0.0, None) if i in nonneg else (None, None) for i in range(k)] + [(None, None)]
    res = minimize(loss, w0, jac=True, method="L-BFGS-B", bounds=bounds)
    return res.x


def _logit(p):
    p = np.clip(p, _EPS, 1 - _EPS)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class Calibrator:
    """A fitted calibration map.

    ``params`` holds, per calibrated column, the method's parameters; for
    temperature scaling it holds the single temperature.
    """

    method: str
    num_classes: int
    columns: tuple
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def plain(v):
            if isinstance(v, np.ndarray):
                return v.tolist()
            if isinstance(v, dict):
                return {str(k): plain(x) for k, x in v.items()}
            if isinstance(v, (list, tuple)):
                return [plain(x) for x in v]
            if isinstance(v, np.generic):
                return v.item()
            return v
        return {"method": self.method, "num_classes": self.num_classes,
                "columns": list(self.columns), "params": plain(self.params)}


def _fit_column(method, s, t, n_bins):
    if method == "isotonic":
        xs, fitted = pav(s, t)
        return {"x": xs, "y": fitted}
    if method == "histogram":
        order = np.argsort(s, kind="stable")
        chunks = np.array_split(s[order], max(1, min(n_bins, len(s))))
        # Interior edges sit between consecutive chunks; tied scores share a bin.
        edges = np.array([0.5 * (a[-1] + b[0]) for a, b in zip(chunks[:-1], chunks[1:])])
        edges = np.unique(edges)
        idx = np.searchsorted(edges, s, side="right")
        counts = np.bincount(idx, minlength=len(edges) + 1)
        hits = np.bincount(idx, weights=t, minlength=len(edges) + 1)
        glob = float(t.mean())
        values = np.where(counts > 0, hits / np.maximum(counts, 1), glob)
        return {"edges": edges, "values": values}
    if len(np.unique(t)) < 2:
        raise ValueError(f"{method} calibration needs both positive and negative examples per class")
    if method == "platt":
        a, b = _fit_logistic(_logit(s)[:, None], t)
        return {"a": float(a), "b": float(b)}
    if method == "beta":
        sc = np.clip(s, _EPS, 1 - _EPS)
        feats = np.column_stack([np.log(sc), -np.log1p(-sc)])
        a, b, c = _fit_logistic(feats, t, nonneg=(0, 1))
        return {"a": float(a), "b": float(b), "c": float(c)}
    raise ValueError(f"unknown calibration method {method!r}")


def _apply_column(method, p, s):
    if method == "isotonic":
        i = np.searchsorted(p["x"], s, side="right") - 1
        return np.asarray(p["y"])[np.clip(i, 0, len(p["y"]) - 1)]
    if method == "histogram":
        return np.asarray(p["values"])[np.searchsorted(p["edges"], s, side="right")]
    if method == "platt":
        return expit(p["a"] * _logit(s) + p["b"])
    if method == "beta":
        sc = np.clip(s, _EPS, 1 - _EPS)
        return expit(p["a"] * np.log(sc) - p["b"] * np.log1p(-sc) + p["c"])
    raise ValueError(f"unknown calibration method {method!r}")


def _log_probs(P):
    with np.errstate(divide="ignore"):
        return np.log(P)


def fit_calibrator(method: str, probs, labels, n_bins: int = 10, **options) -> Calibrator:
    """Fit a calibration map on held-out predictions.

    Parameters
    ----------
    method : {"isotonic", "platt", "beta", "temperature", "histogram"}
    probs : array_like, shape (N, M)
        Uncalibrated row-stochastic predictions.
    labels : array_like, shape (N,)
    n_bins : int
        Equal-frequency bins for histogram calibration.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    if options:
        raise TypeError(f"unexpected calibration options: {sorted(options)}")
    P, y = _check_probs(probs, labels)
    M = P.shape[1]
    if method == "temperature":
        if len(np.unique(y)) < 2:
            raise ValueError("temperature calibration needs at least two classes present")
        L = np.maximum(_log_probs(P), math.log(_EPS))

        def nll(log_t):
            return -log_softmax(L / math.exp(log_t), axis=1)[np.arange(len(y)), y].mean()

        res = minimize_scalar(nll, bounds=(math.log(1e-2), math.log(1e2)), method="bounded",
                              options={"xatol": 1e-8})
        return Calibrator(method, M, tuple(range(M)), {"temperature": float(math.exp(res.x))})
    cols = (1,) if M == 2 else tuple(range(M))
    params = {m: _fit_column(method, P[:, m], (y == m).astype(float), n_bins) for m in cols}
    return Calibrator(method, M, cols, params)


def apply_calibrator(cal: Calibrator, probs) -> np.ndarray:
    """Map predictions through a fitted calibrator; rows stay on the simplex."""
    P, _ = _check_probs(probs)
    if P.shape[1] != cal.num_classes:
        raise ValueError(f"expected {cal.num_classes} columns, got {P.shape[1]}")
    if cal.method == "temperature":
        return softmax(_log_probs(P) / cal.params["temperature"], axis=1)
    if cal.num_classes == 2:
        q1 = np.clip(_apply_column(cal.method, cal.params[1], P[:, 1]), 0.0, 1.0)
        return np.column_stack([1.0 - q1, q1])
    Q = np.column_stack([_apply_column(cal.method, cal.params[m], P[:, m]) for m in cal.columns])
    Q = np.clip(Q, 0.0, 1.0)
    s = Q.sum(axis=1, keepdims=True)
    # A row mapped to all zeros carries no information: fall back to the input row.
    return np.where(s > 0, Q / np.where(s > 0, s, 1.0), P)

"""Gaussian mixtures fitted by EM, and a Bayes-rule classifier built on them."""

from __future__ import annotations

import math

import numpy as np
from scipy.special import logsumexp

from ..data import Dataset, class_marginal
from .base import ProbClassifier

COVARIANCE_TYPES = ("full", "diag", "tied", "spherical")
LOG_2PI = math.log(2 * math.pi)


class EMDegenerateError(RuntimeError):
    """A mixture component lost (almost) all responsibility mass on every restart."""


class GaussianMixture:
    """EM-fitted Gaussian mixture with sklearn-style covariance types.

    Parameters
    ----------
    n_components : int
    covariance : {"full", "diag", "tied", "spherical"}
    reg : float
        Added to the covariance diagonal after every M-step.
    max_iter, tol
        Stop after ``max_iter`` EM iterations or when the mean log-likelihood
        improves by less than ``tol``.
    restarts : int
        Re-initialisations allowed when a component collapses.
    seed : int
    """

    def __init__(self, n_components=1, covariance="full", reg=1e-6, max_iter=200,
                 tol=1e-6, restarts=3, min_mass=1e-6, seed=0):
        if covariance not in COVARIANCE_TYPES:
            raise ValueError(f"covariance must be one of {COVARIANCE_TYPES}")
        if n_components < 1:
            raise ValueError("n_components must be >= 1")
        self.n_components = int(n_components)
        self.covariance = covariance
        self.reg = float(reg)
        self.max_iter = max_iter
        self.tol = tol
        self.restarts = restarts
        self.min_mass = min_mass
        self.seed = seed

    # -- parameter bookkeeping -------------------------------------------------
    def n_parameters(self, d: int | None = None) -> int:
        d = self.means_.shape[1] if d is None else d
        K = self.n_components
        cov = {
            "full": K * d * (d + 1) // 2,
            "diag": K * d,
            "tied": d * (d + 1) // 2,
            "spherical": K,
        }[self.covariance]
        return (K - 1) + K * d + cov

    def aic(self, X=None) -> float:
        """``-2 ln L + 2F`` with ``ln L`` the total log-likelihood."""
        loglik = self.total_loglik_ if X is None else float(self.score_samples(X).sum())
        return -2.0 * loglik + 2.0 * self.n_parameters()

    # -- E-step ----------------------------------------------------------------
    def _component_logpdf(self, X):
        n, d = X.shape
        K = self.n_components
        out = np.empty((n, K))
        if self.covariance in ("full", "tied"):
            for k in range(K):
                L = self.chol_[k if self.covariance == "full" else 0]
                z = np.linalg.solve(L, (X - self.means_[k]).T)
                logdet = 2.0 * np.sum(np.log(np.diag(L)))
                out[:, k] = -0.5 * (d * LOG_2PI + logdet + np.sum(z * z, axis=0))
        else:
            var = self.var_ if self.covariance == "diag" else np.repeat(self.var_[:, None], d, axis=1)
            for k in range(K):
                r = (X - self.means_[k]) ** 2 / var[k]
                out[:, k] = -0.5 * (d * LOG_2PI + np.sum(np.log(var[k])) + r.sum(axis=1))
        return out

    def _estep(self, X):
        lp = self._component_logpdf(X) + np.log(self.weights_)
        ll = logsumexp(lp, axis=1)
        return ll, np.exp(lp - ll[:, None])

    # -- M-step ----------------------------------------------------------------
    def _mstep(self, X, resp):
        n, d = X.shape
        nk = resp.sum(axis=0)
        if (nk < self.min_mass * max(n, 1)).any() or (nk <= 0).any():
            return False
        self.weights_ = nk / n
        self.means_ = (resp.T @ X) / nk[:, None]
        eye = np.eye(d)
        if self.covariance == "full":
            covs = []
            for k in range(self.n_components):
                diff = X - self.means_[k]
                covs.append((resp[:, k, None] * diff).T @ diff / nk[k] + self.reg * eye)
            self.covariances_ = np.array(covs)
        elif self.covariance == "tied":
            cov = np.zeros((d, d))
            for k in range(self.n_components):
                diff = X - self.means_[k]
                cov += (resp[:, k, None] * diff).T @ diff
            self.covariances_ = (cov / n + self.reg * eye)[None]
        else:
            var = np.array([(resp[:, k, None] * (X - self.means_[k]) ** 2).sum(axis=0) / nk[k]
                            for k in range(self.n_components)])
            if self.covariance == "diag":
                self.var_ = var + self.reg
                self.covariances_ = np.array([np.diag(v) for v in self.var_])
            else:
                self.var_ = var.mean(axis=1) + self.reg
                self.covariances_ = np.array([v * eye for v in self.var_])
        if self.covariance in ("full", "tied"):
            try:
                self.chol_ = np.linalg.cholesky(self.covariances_)
            except np.linalg.LinAlgError:
                return False
        return True

    def _init_resp(self, X, rng):
        # k-means++ seeding followed by a few Lloyd iterations, then hard assignment.
        n = len(X)
        K = self.n_components
        centers = [X[rng.integers(n)]]
        for _ in range(1, K):
            d2 = np.min([np.sum((X - c) ** 2, axis=1) for c in centers], axis=0)
            total = d2.sum()
            idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
            centers.append(X[idx])
        centers = np.array(centers)
        for _ in range(10):
            lab = np.argmin(((X[:, None, :] - centers[None]) ** 2).sum(axis=2), axis=1)
            for k in range(K):
                if (lab == k).any():
                    centers[k] = X[lab == k].mean(axis=0)
        resp = np.zeros((n, K))
        resp[np.arange(n), lab] = 1.0
        # Soften slightly so no component starts with zero mass.
        return 0.99 * resp + 0.01 / K

    def fit(self, X) -> "GaussianMixture":
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if len(X) < self.n_components:
            raise ValueError(f"{len(X)} samples cannot support {self.n_components} components")
        rng = np.random.default_rng(self.seed)
        for attempt in range(self.restarts + 1):
            if self._run_em(X, rng):
                return self
        raise EMDegenerateError(
            f"EM collapsed on all {self.restarts + 1} attempts "
            f"(K={self.n_components}, covariance={self.covariance}, n={len(X)})")

    def _run_em(self, X, rng) -> bool:
        if not self._mstep(X, self._init_resp(X, rng)):
            return False
        history = []
        for _ in range(self.max_iter):
            ll, resp = self._estep(X)
            history.append(float(ll.mean()))
            if len(history) > 1 and abs(history[-1] - history[-2]) < self.tol:
                break
            if not self._mstep(X, resp):
                return False
        else:
            ll, _ = self._estep(X)
            history.append(float(ll.mean()))
        self.loglik_history_ = history
        self.total_loglik_ = history[-1] * len(X)
        self.n_iter_ = len(history)
        return True

    def score_samples(self, X) -> np.ndarray:
        """Per-row log density (nats)."""
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        return self._estep(X)[0]


def fit_gmm_aic(X, max_components=5, covariance="full", reg=1e-6, seed=0) -> GaussianMixture:
    """Fit ``1..max_components`` mixtures and keep the lowest-AIC one."""
    best, best_aic = None, np.inf
    upper = max(1, min(int(max_components), len(X)))
    for k in range(1, upper + 1):
        try:
            g = GaussianMixture(k, covariance, reg, seed=seed + k).fit(X)
        except EMDegenerateError:
            continue
        a = g.aic()
        if a < best_aic:
            best, best_aic = g, a
    if best is None:
        raise EMDegenerateError(f"no mixture with <= {max_components} components could be fitted")
    return best


class GmmBayesClassifier(ProbClassifier):
    """Class-conditional Gaussian mixtures combined with empirical priors.

    Classes with fewer training samples than ``n_components`` are fitted with
    as many components as they have samples; classes absent from the training
    data receive zero prior mass.
    """

    family = "gmm-bayes"

    def __init__(self, n_components=1, covariance="full", reg=1e-6, seed=0,
                 select_by_aic=False):
        if not 1 <= n_components <= 10:
            raise ValueError("n_components outside [1, 10]")
        if not 1e-10 <= reg <= 1e-1:
            raise ValueError("reg outside [1e-10, 1e-1]")
        self.n_components = int(n_components)
        self.covariance = covariance
        self.reg = float(reg)
        self.seed = seed
        self.select_by_aic = select_by_aic

    def fit(self, train: Dataset) -> "GmmBayesClassifier":
        self.num_classes = M = train.num_classes
        self.prior_ = class_marginal(train)
        self.components_ = []
        for m in range(M):
            Xm = train.features[train.labels == m]
            if len(Xm) == 0:
                self.components_.append(None)
                continue
            k = min(self.n_components, len(Xm))
            if self.select_by_aic:
                g = fit_gmm_aic(Xm, k, self.covariance, self.reg, seed=self.seed + 101 * m)
            else:
                g = GaussianMixture(k, self.covariance, self.reg, seed=self.seed + 101 * m).fit(Xm)
            self.components_.append(g)
        return self

    def n_parameters(self) -> int:
        d = next(g for g in self.components_ if g is not None).means_.shape[1]
        used = [g for g in self.components_ if g is not None]
        return sum(g.n_parameters(d) for g in used) + (len(used) - 1)

    def log_class_conditional(self, X) -> np.ndarray:
        """``ln p(x | y=m)`` as an ``(n, M)`` matrix (``-inf`` for absent classes)."""
        X = np.asarray(X, dtype=float)
        out = np.full((len(X), self.num_classes), -np.inf)
        for m, g in enumerate(self.components_):
            if g is not None:
                out[:, m] = g.score_samples(X)
        return out

    def log_joint(self, X) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return self.log_class_conditional(X) + np.log(self.prior_)

    def predict_proba(self, X) -> np.ndarray:
        lj = self.log_joint(X)
        return np.exp(lj - logsumexp(lj, axis=1, keepdims=True))

    def aic(self, data: Dataset) -> float:
        """AIC of the joint model ``p(x, y)`` on ``data``."""
        lj = self.log_joint(data.features)
        loglik = float(lj[np.arange(data.n_samples), data.labels].sum())
        return -2.0 * loglik + 2.0 * self.n_parameters()


def fit_gmm_bayes(train: Dataset, hp: dict | None = None, seed: int = 0) -> GmmBayesClassifier:
    return GmmBayesClassifier(**(hp or {}), seed=seed).fit(train)

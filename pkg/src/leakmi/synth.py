"""Multivariate-normal systems with known mutual information.

Two ways of injecting noise are supported. *Perturbation* resamples a
fraction ``eps`` of labels from the class marginal; *proximity* pulls the
class means together by a factor ``1 - eps``. In both cases ``eps = 1``
simulates a non-leaking system.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp
from scipy.stats import ortho_group

from .data import Dataset, entropy_bits

__all__ = [
    "SynthConfig",
    "GroundTruthModel",
    "random_covariance",
    "class_counts",
    "class_prior",
    "generate_system",
    "posterior",
    "ground_truth_mi",
]

TECHNIQUES = ("perturbation", "proximity")
GEN_METHODS = ("balanced", "minority", "majority")
MEAN_SPACING = 1.5
COV_JITTER = 1e-8
MIN_EIGENVALUE = 1e-6


@dataclass(frozen=True)
class SynthConfig:
    technique: str = "perturbation"
    gen_method: str = "balanced"
    num_classes: int = 2
    dims: int = 2
    noise: float = 0.0
    imbalance: float | None = None
    samples_per_class: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.technique not in TECHNIQUES:
            raise ValueError(f"technique must be one of {TECHNIQUES}")
        if self.gen_method not in GEN_METHODS:
            raise ValueError(f"gen_method must be one of {GEN_METHODS}")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.dims < 1:
            raise ValueError("dims must be >= 1")
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError("noise must lie in [0, 1]")
        r = self.r
        if not 0 < r <= 1.0 / self.num_classes + 1e-12:
            raise ValueError(f"imbalance r={r} outside (0, 1/M]")
        if self.gen_method == "balanced" and abs(r - 1.0 / self.num_classes) > 1e-12:
            raise ValueError("balanced generation requires r = 1/M")

    @property
    def r(self) -> float:
        return 1.0 / self.num_classes if self.imbalance is None else float(self.imbalance)


@dataclass(frozen=True)
class GroundTruthModel:
    """Sampling parameters of a synthetic system."""

    means: np.ndarray
    cov: np.ndarray
    prior: np.ndarray
    technique: str
    noise: float
    _chol: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        cov = np.asarray(self.cov, dtype=float)
        d = cov.shape[0]
        try:
            chol = np.linalg.cholesky(cov + COV_JITTER * np.eye(d))
        except np.linalg.LinAlgError:
            raise ValueError("covariance is singular even after regularisation") from None
        object.__setattr__(self, "means", np.asarray(self.means, dtype=float))
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "prior", np.asarray(self.prior, dtype=float))
        object.__setattr__(self, "_chol", chol)

    @property
    def num_classes(self) -> int:
        return len(self.prior)

    def to_dict(self) -> dict:
        return {
            "means": self.means.tolist(),
            "cov": self.cov.tolist(),
            "prior": self.prior.tolist(),
            "technique": self.technique,
            "noise": self.noise,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruthModel":
        return cls(np.array(d["means"]), np.array(d["cov"]), np.array(d["prior"]),
                   d["technique"], float(d["noise"]))


def random_covariance(d: int, seed=None) -> np.ndarray:
    """Random PSD matrix ``(Q S) Q^T`` with Q orthogonal, S diagonal in [0, 1).

    Diagonal entries below ``1e-6`` are redrawn so the result stays invertible.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    rng = np.random.default_rng(seed)
    if d == 1:
        Q = np.array([[rng.choice([-1.0, 1.0])]])
    else:
        Q = ortho_group.rvs(d, random_state=rng)
    s = rng.random(d)
    while (s < MIN_EIGENVALUE).any():
        bad = s < MIN_EIGENVALUE
        s[bad] = rng.random(bad.sum())
    cov = (Q * s) @ Q.T
    return 0.5 * (cov + cov.T)


def class_counts(M: int, N: int, r: float, method: str = "minority") -> np.ndarray:
    """Per-class sample counts for the balanced, minority and majority schemes."""
    if not 0 < r <= 1.0 / M + 1e-12:
        raise ValueError(f"r={r} outside (0, 1/M]")
    nr = math.ceil(N * r - 1e-9)
    if method == "balanced":
        counts = np.full(M, N // M)
        counts[: N % M] += 1
    elif method == "majority":
        counts = np.array([nr] * (M - 1) + [N - (M - 1) * nr])
    elif method == "minority":
        rest = math.ceil((N - nr) / (M - 1) - 1e-9)
        counts = np.array([rest] * (M - 1) + [nr])
    else:
        raise ValueError(f"unknown generation method {method!r}")
    if (counts <= 0).any():
        raise ValueError(f"configuration yields an empty class: {counts.tolist()}")
    return counts.astype(np.int64)


def class_prior(M: int, r: float, method: str) -> np.ndarray:
    """Label marginal implied by the generation method."""
    if method == "balanced":
        return np.full(M, 1.0 / M)
    if method == "majority":
        return np.array([r] * (M - 1) + [1.0 - r * (M - 1)])
    if method == "minority":
        return np.array([(1.0 - r) / (M - 1)] * (M - 1) + [r])
    raise ValueError(f"unknown generation method {method!r}")


def generate_system(cfg: SynthConfig) -> tuple[Dataset, GroundTruthModel]:
    """Sample a dataset and return it with the model it was drawn from."""
    rng = np.random.default_rng(cfg.seed)
    M, d, eps = cfg.num_classes, cfg.dims, cfg.noise
    N = cfg.samples_per_class * M
    method = cfg.gen_method
    counts = class_counts(M, N, cfg.r, method)
    prior = class_prior(M, cfg.r, method)
    cov = random_covariance(d, rng)
    scale = MEAN_SPACING * (1.0 - eps if cfg.technique == "proximity" else 1.0)
    means = np.repeat((scale * np.arange(1, M + 1))[:, None], d, axis=1)
    chol = np.linalg.cholesky(cov + COV_JITTER * np.eye(d))

    X, y = [], []
    for m in range(M):
        z = rng.standard_normal((counts[m], d))
        X.append(means[m] + z @ chol.T)
        labels = np.full(counts[m], m, dtype=np.int64)
        if cfg.technique == "perturbation" and eps > 0:
            flip = rng.random(counts[m]) < eps
            labels[flip] = rng.choice(M, size=int(flip.sum()), p=prior)
        y.append(labels)
    gt = GroundTruthModel(means, cov, prior, cfg.technique, eps)
    meta = {"generator": cfg.__dict__.copy(), "class_counts": counts.tolist()}
    return Dataset(np.vstack(X), np.concatenate(y), M, meta=meta), gt


def _log_class_densities(gt: GroundTruthModel, X: np.ndarray) -> np.ndarray:
    # log N(x | mu_m, Sigma) up to the shared normalising constant.
    L = gt._chol
    out = np.empty((len(X), gt.num_classes))
    for m, mu in enumerate(gt.means):
        z = np.linalg.solve(L, (X - mu).T)
        out[:, m] = -0.5 * np.sum(z * z, axis=0)
    return out


def posterior(gt: GroundTruthModel, x) -> np.ndarray:
    """True conditional ``p(y | x)`` of the system, row per input.

    Perturbed systems mix the Bayes-rule posterior with the label marginal.
    """
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1 and X.size == gt.cov.shape[0]
    X = X.reshape(-1, gt.cov.shape[0])
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite input")
    with np.errstate(divide="ignore"):
        logp = _log_class_densities(gt, X) + np.log(gt.prior)
    post = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
    if gt.technique == "perturbation":
        post = (1.0 - gt.noise) * post + gt.noise * gt.prior
    post /= post.sum(axis=1, keepdims=True)
    return post[0] if single else post


def ground_truth_mi(dataset: Dataset, gt: GroundTruthModel, mode: str = "predictive") -> float:
    """Plug-in mutual information (bits) of the generating model over ``dataset``.

    ``mode="predictive"`` averages ``sum_m p(m|x) lg p(m|x)`` over the inputs;
    ``mode="label"`` averages ``lg p(y_i|x_i)`` over the labelled pairs. Both add
    the label entropy ``H(p_Y)``.
    """
    P = posterior(gt, dataset.features)
    hy = entropy_bits(gt.prior)
    with np.errstate(divide="ignore", invalid="ignore"):
        if mode == "predictive":
            terms = np.where(P > 0, P * np.log2(P), 0.0).sum(axis=1)
        elif mode == "label":
            terms = np.log2(np.maximum(P[np.arange(len(P)), dataset.labels], 1e-300))
        else:
            raise ValueError(f"unknown mode {mode!r}")
    return float(np.mean(terms) + hy)

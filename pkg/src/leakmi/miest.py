"""Mutual-information estimators (all results in bits).

Classifier-based estimators turn a probabilistic or deterministic classifier
into an MI estimate: the log-loss estimator compares the predictive entropy
of a model with the label entropy, and the mid-point estimator brackets the
conditional entropy between the Hellman and Fano bounds implied by an error
rate. The density-based (GMM), variational (MINE) and prior-corrected
softmax estimators serve as baselines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .data import Dataset, class_marginal, entropy_bits
from .models.base import Standardizer, clip_probs
from .models.gmm import fit_gmm_aic
from .models.nets import MLP, Adam, TrainingDivergedError, SoftmaxNet, pc_softmax_log
from .models.search import register_family

__all__ = [
    "MiEstimate",
    "EntropyBounds",
    "cond_entropy_bounds",
    "mi_midpoint",
    "mi_logloss",
    "mi_gmm",
    "mi_mine",
    "mi_pcsoftmax",
    "MineNetwork",
]

LG_E = math.log2(math.e)


@dataclass
class MiEstimate:
    """One MI estimate in bits.

    Negative values are kept as computed: downstream t-tests need the raw sign.
    """

    value: float
    method: str
    model: str = ""
    fold: int | None = None
    num_classes: int | None = None
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"non-finite MI estimate from {self.method}")
        self.value = float(self.value)

    @property
    def flagged(self) -> bool:
        if self.num_classes is None:
            return self.value < 0
        return not 0.0 <= self.value <= math.log2(self.num_classes)

    @property
    def clamped(self) -> float:
        hi = math.log2(self.num_classes) if self.num_classes else math.inf
        return min(max(self.value, 0.0), hi)

    def to_dict(self) -> dict:
        return {"value_bits": self.value, "method": self.method, "model": self.model,
                "fold": self.fold, "flagged": self.flagged, "details": self.details}


@dataclass(frozen=True)
class EntropyBounds:
    """Bounds on ``H(Y|X)`` implied by a Bayes error rate.

    ``regime`` is the integer ``m`` selecting the linear piece of the Hellman
    bound.
    """

    lower: float
    upper: float
    regime: int


def _h2(e: float) -> float:
    if e <= 0.0 or e >= 1.0:
        return 0.0
    return -(e * math.log2(e) + (1 - e) * math.log2(1 - e))


def cond_entropy_bounds(err: float, M: int) -> EntropyBounds:
    """Hellman (lower) and Fano (upper) bounds on conditional entropy.

    Parameters
    ----------
    err : float
        Error rate in ``[0, (M-1)/M]``.
    M : int
        Number of classes.
    """
    if M < 2:
        raise ValueError("M must be >= 2")
    top = (M - 1) / M
    if not (math.isfinite(err) and -1e-12 <= err <= top + 1e-12):
        raise ValueError(f"error rate {err} outside [0, {top}]")
    err = min(max(float(err), 0.0), top)
    lgM = math.log2(M)
    if err == 0.0:
        return EntropyBounds(0.0, 0.0, 1)
    if err == top:
        return EntropyBounds(lgM, lgM, M - 1)
    upper = _h2(err) + err * math.log2(M - 1)
    # Regime m with 1/(m+1) <= 1-err <= 1/m; on an edge take the smaller m.
    m = math.ceil(1.0 / (1.0 - err) - 1e-12) - 1
    m = min(max(m, 1), M - 1)
    lower = math.log2(m) + m * (m + 1) * math.log2((m + 1) / m) * (err - (m - 1) / m)
    lower = min(max(lower, 0.0), lgM)
    upper = min(max(upper, lower), lgM)
    return EntropyBounds(lower, upper, m)


def mi_midpoint(err: float, marginal, M: int | None = None, **provenance) -> MiEstimate:
    """Mid-point of the MI interval implied by an error rate.

    The interval is ``[H(Y) - H_u, H(Y) - H_l]``, each end floored at zero.
    """
    marginal = np.asarray(marginal, dtype=float)
    M = len(marginal) if M is None else M
    hy = entropy_bits(marginal)
    b = cond_entropy_bounds(err, M)
    f_lo = max(hy - b.upper, 0.0)
    f_hi = max(hy - b.lower, 0.0)
    return MiEstimate(0.5 * (f_lo + f_hi), "mid-point", num_classes=M,
                      details={"lower_bits": f_lo, "upper_bits": f_hi, "regime": b.regime,
                               "error": float(err), "h_y": hy}, **provenance)


def mi_logloss(probs, labels=None, marginal=None, mode: str = "predictive",
               **provenance) -> MiEstimate:
    """Log-loss MI estimate ``H(marginal) - mean conditional term``.

    Parameters
    ----------
    probs : array_like, shape (N, M)
        Predicted class probabilities (clipped to ``[1e-9, 1 - 1e-9]``).
    labels : array_like, optional
        True labels; needed by ``mode="cross-entropy"`` and when
        ``marginal`` is omitted.
    marginal : array_like or "predicted", optional
        Label distribution whose entropy is the reference; defaults to the
        empirical marginal of ``labels``. ``"predicted"`` uses the mean of
        the predicted rows.
    mode : {"predictive", "cross-entropy"}
        ``predictive`` uses the entropy of each predicted row,
        ``cross-entropy`` the log-loss ``-lg p[y]`` of the true label.
    """
    P = clip_probs(probs)
    M = P.shape[1]
    if isinstance(marginal, str):
        if marginal != "predicted":
            raise ValueError(f"unknown marginal {marginal!r}")
        # Mean predicted distribution: the model's own label marginal.
        marginal = P.mean(axis=0)
    elif marginal is None:
        if labels is None:
            raise ValueError("either labels or marginal is required")
        marginal = class_marginal(np.asarray(labels), M)
    hy = entropy_bits(marginal)
    if mode == "predictive":
        cond = -np.sum(P * np.log2(P), axis=1).mean()
    elif mode == "cross-entropy":
        if labels is None:
            raise ValueError("cross-entropy mode needs labels")
        y = np.asarray(labels, dtype=np.int64)
        cond = -np.log2(P[np.arange(len(y)), y]).mean()
    else:
        raise ValueError(f"unknown log-loss mode {mode!r}")
    return MiEstimate(hy - float(cond), "log-loss", num_classes=M,
                      details={"mode": mode, "h_y": hy, "cond_entropy": float(cond)}, **provenance)


# -- GMM joint density ---------------------------------------------------------

GMM_DEFAULTS = {"max_components": 4, "covariance": "full", "reg": 1e-6}


def mi_gmm(dataset: Dataset, hp: dict | None = None, seed: int = 0,
           eval_dataset: Dataset | None = None) -> MiEstimate:
    """Plug-in MI from class-conditional Gaussian mixtures.

    ``p(x, y) = p(x|y) p(y)`` with ``p(x|y)`` an AIC-selected mixture per
    class and ``p(y)`` the empirical marginal. The estimate averages
    ``lg p(x|y) - lg p(x)`` over ``eval_dataset`` (default: ``dataset``).
    """
    hp = {**GMM_DEFAULTS, **(hp or {})}
    kmax = int(hp["max_components"])
    if not 1 <= kmax <= 10:
        raise ValueError("max_components outside [1, 10]")
    M = dataset.num_classes
    prior = class_marginal(dataset)
    ev = dataset if eval_dataset is None else eval_dataset
    logcond = np.full((ev.n_samples, M), -np.inf)
    chosen = []
    for m in range(M):
        Xm = dataset.features[dataset.labels == m]
        if len(Xm) == 0:
            chosen.append(0)
            continue
        g = fit_gmm_aic(Xm, min(kmax, len(Xm)), hp["covariance"], hp["reg"], seed=seed + 1009 * m)
        chosen.append(g.n_components)
        logcond[:, m] = g.score_samples(ev.features)
    with np.errstate(divide="ignore"):
        logjoint = logcond + np.log(prior)
    logpx = logsumexp(logjoint, axis=1)
    own = logcond[np.arange(ev.n_samples), ev.labels]
    if not np.all(np.isfinite(own)):
        raise ValueError("evaluation data contains a class absent from the fitting data")
    value = float(np.mean(own - logpx)) * LG_E
    return MiEstimate(value, "gmm", model=f"gmm-{hp['covariance']}", num_classes=M,
                      details={"components": chosen, **{k: hp[k] for k in ("covariance", "reg")}})


# -- MINE ----------------------------------------------------------------------

MINE_DEFAULTS = {
    "hidden_layers": 1,
    "units": 32,
    "learning_rate": 1e-3,
    "epochs": 10000,
    "patience": 500,
    "ema_rate": 0.01,
    "ensemble": 10,
}


def _n_batches(n: int) -> int:
    """Largest divisor of ``n`` not exceeding ``n / 32`` (at least 1)."""
    for b in range(max(1, n // 32), 0, -1):
        if n % b == 0:
            return b
    return 1


class MineNetwork:
    """Statistics network ``T(x, y)`` trained on the Donsker-Varadhan bound.

    Inputs are z-scored features concatenated with a one-hot label. The
    gradient of the log-partition term uses an exponential moving average
    of ``mean exp(T)`` in its denominator to reduce mini-batch bias.
    """

    family = "mine"

    def __init__(self, hidden_layers=1, units=32, learning_rate=1e-3, epochs=10000,
                 patience=500, ema_rate=0.01, seed=0, **_ignored):
        if not 1 <= hidden_layers <= 10:
            raise ValueError("hidden_layers outside [1, 10]")
        self.hidden_layers = int(hidden_layers)
        self.units = int(units)
        self.learning_rate = float(learning_rate)
        self.epochs = int(epochs)
        self.patience = int(patience)
        self.ema_rate = float(ema_rate)
        self.seed = seed

    def _inputs(self, X, y):
        onehot = np.eye(self.num_classes)[np.asarray(y)]
        return np.hstack([self.scaler_.transform(X), onehot])

    def _bound(self, tj, tm) -> float:
        return float(tj.mean() - (logsumexp(tm) - math.log(len(tm))))

    def fit(self, train: Dataset) -> "MineNetwork":
        rng = np.random.default_rng(self.seed)
        self.num_classes = train.num_classes
        self.scaler_ = Standardizer().fit(train.features)
        X, y = train.features, train.labels
        n = len(y)
        d_in = X.shape[1] + self.num_classes
        self.net_ = MLP([d_in] + [self.units] * self.hidden_layers + [1], rng)
        opt = Adam(self.net_.params, lr=self.learning_rate)
        B = _n_batches(n)
        bs = n // B
        joint_all = self._inputs(X, y)
        ema = None
        best, best_params, stale = -np.inf, None, 0
        self.bound_curve_ = []
        for epoch in range(self.epochs):
            perm = rng.permutation(n)
            marg_all = self._inputs(X, y[perm])
            order = rng.permutation(n)
            total = 0.0
            for b in range(B):
                idx = order[b * bs:(b + 1) * bs]
                Z = np.vstack([joint_all[idx], marg_all[idx]])
                out, acts = self.net_.forward(Z)
                t = out[:, 0]
                tj, tm = t[:bs], t[bs:]
                et = np.exp(np.clip(tm, -50, 50))
                batch_mean = float(et.mean())
                ema = batch_mean if ema is None else (1 - self.ema_rate) * ema + self.ema_rate * batch_mean
                v = self._bound(tj, tm)
                if not math.isfinite(v):
                    raise TrainingDivergedError(f"MINE bound became non-finite at epoch {epoch}")
                total += v
                dout = np.empty((2 * bs, 1))
                dout[:bs, 0] = -1.0 / bs
                dout[bs:, 0] = et / (bs * ema)
                opt.step(self.net_.params, self.net_.backward(acts, dout))
            epoch_bound = total / B
            self.bound_curve_.append(epoch_bound)
            if epoch_bound > best + 1e-4:
                best, stale = epoch_bound, 0
                best_params = [p.copy() for p in self.net_.params]
            else:
                stale += 1
                if stale >= self.patience:
                    break
        if best_params is not None:
            self.net_.params = best_params
        self.train_bound_ = self.lower_bound(train, seed=self.seed + 1)
        return self

    def statistic(self, X, y) -> np.ndarray:
        return self.net_.forward(self._inputs(X, y))[0][:, 0]

    def lower_bound(self, data: Dataset, seed: int = 0, permutations: int = 5) -> float:
        """Donsker-Varadhan bound in nats, averaged over label permutations."""
        rng = np.random.default_rng(seed)
        tj = self.statistic(data.features, data.labels)
        vals = []
        for _ in range(permutations):
            tm = self.statistic(data.features, data.labels[rng.permutation(data.n_samples)])
            vals.append(self._bound(tj, tm))
        return float(np.mean(vals))

    def mse_proxy(self, val: Dataset) -> float:
        """Mean squared gap between per-batch validation bounds and the training bound."""
        B = _n_batches(val.n_samples)
        bs = val.n_samples // B
        rng = np.random.default_rng(self.seed + 2)
        order = rng.permutation(val.n_samples)
        gaps = []
        for b in range(B):
            part = val.subset(order[b * bs:(b + 1) * bs])
            gaps.append((self.lower_bound(part, seed=self.seed + 3 + b, permutations=1)
                         - self.train_bound_) ** 2)
        return float(np.mean(gaps))


def _fit_mine(train, hp, seed):
    return MineNetwork(**hp, seed=seed).fit(train)


register_family("mine", _fit_mine, {
    "hidden_layers": ("int", 1, 3, False),
    "units": ("int", 8, 128, True),
    "learning_rate": ("float", 1e-4, 1e-2, True),
})


def mi_mine(dataset: Dataset, hp: dict | None = None, seed: int = 0,
            eval_dataset: Dataset | None = None) -> MiEstimate:
    """MINE estimate: mean Donsker-Varadhan bound of an ensemble, in bits."""
    hp = {**MINE_DEFAULTS, **(hp or {})}
    k = int(hp.pop("ensemble"))
    if k < 1:
        raise ValueError("ensemble size must be >= 1")
    ev = dataset if eval_dataset is None else eval_dataset
    seeds = np.random.SeedSequence(seed).generate_state(k)
    vals = []
    for s in seeds:
        net = MineNetwork(**hp, seed=int(s)).fit(dataset)
        vals.append(net.lower_bound(ev, seed=int(s) + 7) * LG_E)
    return MiEstimate(float(np.mean(vals)), "mine", model="mine", num_classes=dataset.num_classes,
                      details={"members_bits": vals})


# -- PC-softmax ----------------------------------------------------------------

PC_DEFAULTS = {"hidden_layers": 1, "units": 32, "learning_rate": 1e-2, "epochs": 100,
               "batch_size": 64, "l2": 1e-6}


def pc_softmax_estimate(scores, labels, prior, formula: str = "prior-weighted") -> float:
    """MI estimate (bits) from network scores.

    ``prior-weighted`` returns ``mean lg S_pc[y]`` with
    ``S_pc = exp(s_y) / sum_m p(m) exp(s_m)``. ``scaled-exponent`` evaluates
    ``-mean lg S`` with denominator ``sum_m exp(p(m) s_m)``.
    """
    with np.errstate(divide="ignore"):
        lp = np.log(np.asarray(prior, dtype=float))
    logs = pc_softmax_log(np.asarray(scores, dtype=float), np.asarray(labels), lp, formula)
    sign = 1.0 if formula == "prior-weighted" else -1.0
    return sign * float(np.mean(logs)) * LG_E


def mi_pcsoftmax(dataset: Dataset, hp: dict | None = None, seed: int = 0,
                 eval_dataset: Dataset | None = None,
                 formula: str = "prior-weighted") -> MiEstimate:
    """Train a prior-corrected softmax network and read off its MI estimate."""
    hp = {**PC_DEFAULTS, **(hp or {})}
    net = SoftmaxNet(**hp, head="pc-softmax", seed=seed).fit(dataset)
    ev = dataset if eval_dataset is None else eval_dataset
    value = pc_softmax_estimate(net.decision_scores(ev.features), ev.labels,
                                np.exp(net.log_prior_), formula)
    return MiEstimate(value, "pc-softmax", model="pc-softmax-net",
                      num_classes=dataset.num_classes, details={"formula": formula})

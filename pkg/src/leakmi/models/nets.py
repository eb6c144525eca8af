"""Small multilayer perceptrons in plain numpy.

The same network core backs the softmax and PC-softmax classifiers and the
statistics network of the MINE estimator. Gradients are written out by
hand; the test suite checks them against finite differences.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import log_softmax, logsumexp, softmax

from ..data import Dataset, class_marginal
from .base import ProbClassifier, Standardizer

HEADS = ("softmax", "pc-softmax")
PC_FORMULAS = ("prior-weighted", "scaled-exponent")


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss becomes non-finite."""


class MLP:
    """Fully connected ReLU network with a linear output layer."""

    def __init__(self, sizes, rng):
        self.params = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            W = rng.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in)
            self.params += [W, np.zeros(fan_out)]

    @property
    def n_layers(self) -> int:
        return len(self.params) // 2

    def forward(self, X, params=None):
        params = self.params if params is None else params
        acts = [X]
        h = X
        for i in range(self.n_layers):
            h = h @ params[2 * i] + params[2 * i + 1]
            if i < self.n_layers - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def backward(self, acts, dout, params=None):
        params = self.params if params is None else params
        grads = [None] * len(params)
        g = dout
        for i in reversed(range(self.n_layers)):
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                g = (g @ params[2 * i].T) * (acts[i] > 0)
        return grads


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def softmax_ce(scores, y):
    """Mean categorical cross-entropy (nats) and its gradient w.r.t. scores."""
    n = len(y)
    logp = log_softmax(scores, axis=1)
    loss = -logp[np.arange(n), y].mean()
    d = np.exp(logp)
    d[np.arange(n), y] -= 1.0
    return loss, d / n


def pc_softmax_log(scores, y, log_prior, formula="prior-weighted"):
    """``ln S_pc(x)[y]`` per row.

    ``prior-weighted``: ``exp(s_y) / sum_m p(m) exp(s_m)``.
    ``scaled-exponent``: ``exp(s_y) / sum_m exp(p(m) * s_m)``.
    """
    n = len(y)
    if formula == "prior-weighted":
        return scores[np.arange(n), y] - logsumexp(scores + log_prior, axis=1)
    if formula == "scaled-exponent":
        return scores[np.arange(n), y] - logsumexp(np.exp(log_prior) * scores, axis=1)
    raise ValueError(f"unknown PC-softmax formula {formula!r}")


def pc_softmax_ce(scores, y, log_prior, formula="prior-weighted"):
    """Mean ``-ln S_pc(x)[y]`` and its gradient w.r.t. scores."""
    n = len(y)
    loss = -pc_softmax_log(scores, y, log_prior, formula).mean()
    if formula == "prior-weighted":
        d = softmax(scores + log_prior, axis=1)
    else:
        p = np.exp(log_prior)
        d = p * softmax(p * scores, axis=1)
    d[np.arange(n), y] -= 1.0
    return loss, d / n


class SoftmaxNet(ProbClassifier):
    """MLP classifier with a softmax or PC-softmax output head.

    Parameters
    ----------
    hidden_layers : int
        Number of hidden ReLU layers (0 gives multinomial logistic regression).
    units : int
        Width of every hidden layer.
    learning_rate, epochs, batch_size, l2
        Adam step size, passes over the data, mini-batch size and the
        weight-decay coefficient on weight matrices.
    head : {"softmax", "pc-softmax"}
    pc_formula : {"prior-weighted", "scaled-exponent"}
        Denominator used by the PC-softmax head.
    seed : int
    """

    def __init__(self, hidden_layers=1, units=32, learning_rate=1e-2, epochs=100,
                 batch_size=64, l2=1e-6, head="softmax", pc_formula="prior-weighted", seed=0):
        if head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        if pc_formula not in PC_FORMULAS:
            raise ValueError(f"pc_formula must be one of {PC_FORMULAS}")
        if not 0 <= hidden_layers <= 50:
            raise ValueError("hidden_layers outside [0, 50]")
        if not 2 <= units <= 256:
            raise ValueError("units outside [2, 256]")
        if not 1e-5 <= learning_rate <= 1e-1:
            raise ValueError("learning_rate outside [1e-5, 1e-1]")
        if epochs < 1 or batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        self.hidden_layers = int(hidden_layers)
        self.units = int(units)
        self.learning_rate = float(learning_rate)
        self.epochs = int(epochs)
        self.batch_size = int(batch_size)
        self.l2 = float(l2)
        self.head = head
        self.pc_formula = pc_formula
        self.seed = seed

    @property
    def family(self):
        return "pc-softmax-net" if self.head == "pc-softmax" else "softmax-net"

    def _init_network(self, d, M, rng):
        sizes = [d] + [self.units] * self.hidden_layers + [M]
        self.net_ = MLP(sizes, rng)

    def loss_and_grad(self, params, X, y):
        """Training objective on a batch of (already standardised) inputs."""
        scores, acts = self.net_.forward(X, params)
        if self.head == "softmax":
            loss, dscores = softmax_ce(scores, y)
        else:
            loss, dscores = pc_softmax_ce(scores, y, self.log_prior_, self.pc_formula)
        grads = self.net_.backward(acts, dscores, params)
        for i in range(0, len(params), 2):
            loss += self.l2 * float(np.sum(params[i] ** 2))
            grads[i] = grads[i] + 2.0 * self.l2 * params[i]
        return loss, grads

    def fit(self, train: Dataset) -> "SoftmaxNet":
        rng = np.random.default_rng(self.seed)
        self.num_classes = M = train.num_classes
        self.scaler_ = Standardizer().fit(train.features)
        X = self.scaler_.transform(train.features)
        y = train.labels
        prior = np.maximum(class_marginal(train), 1e-12)
        self.log_prior_ = np.log(prior / prior.sum())
        self._init_network(X.shape[1], M, rng)
        opt = Adam(self.net_.params, lr=self.learning_rate)
        n = len(y)
        bs = min(self.batch_size, n)
        self.loss_curve_ = []
        for epoch in range(self.epochs):
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, bs):
                idx = order[start:start + bs]
                loss, grads = self.loss_and_grad(self.net_.params, X[idx], y[idx])
                if not np.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch} (lr={self.learning_rate}, "
                        f"layers={self.hidden_layers}, units={self.units}, head={self.head})")
                opt.step(self.net_.params, grads)
                total += loss * len(idx)
            self.loss_curve_.append(total / n)
        return self

    def decision_scores(self, X) -> np.ndarray:
        return self.net_.forward(self.scaler_.transform(X))[0]

    def predict_proba(self, X) -> np.ndarray:
        s = self.decision_scores(X)
        if self.head == "pc-softmax":
            # Prior-corrected posterior: softmax(s + ln p).
            s = s + self.log_prior_
        return softmax(s, axis=1)


def fit_softmax_net(train: Dataset, hp: dict | None = None, seed: int = 0) -> SoftmaxNet:
    return SoftmaxNet(**(hp or {}), seed=seed).fit(train)

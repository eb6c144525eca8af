import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import norm

from leakmi.data import Dataset, SplitPlan, class_marginal
from leakmi.models import (
    AllCandidatesFailedError,
    EMDegenerateError,
    GaussianMixture,
    GmmBayesClassifier,
    SoftmaxNet,
    TrainingDivergedError,
    fit_gmm_bayes,
    fit_knn,
    fit_marginal_predictor,
    fit_softmax_net,
    random_search,
    reduce_features,
)
from leakmi.models.nets import pc_softmax_ce, softmax_ce
from leakmi.models.search import FITTERS, balanced_error, sample_hyperparameters, DEFAULT_RANGES
from leakmi.synth import SynthConfig, generate_system, posterior


def labels(n0, n1):
    return np.r_[np.zeros(n0), np.ones(n1)].astype(int)


class TestMarginalPredictor:
    def test_imbalanced(self):
        ds = Dataset(np.zeros((100, 1)), labels(95, 5), 2)
        m = fit_marginal_predictor(ds)
        assert np.allclose(m.predict_proba(np.ones((3, 1))), [0.95, 0.05])
        assert (m.predict(np.ones((3, 1))) == 0).all()

    def test_tie_breaks_to_smallest(self):
        m = fit_marginal_predictor(Dataset(np.zeros((4, 1)), [0, 1, 0, 1], 2))
        assert (m.predict(np.zeros((5, 1))) == 0).all()

    def test_log_loss_equals_entropy(self):
        y = labels(70, 30)
        m = fit_marginal_predictor(Dataset(np.zeros((100, 1)), y, 2))
        P = m.predict_proba(np.zeros((100, 1)))
        ll = -np.mean(np.log2(P[np.arange(100), y]))
        assert ll == pytest.approx(-(0.7 * math.log2(0.7) + 0.3 * math.log2(0.3)))


class TestSoftmaxNet:
    def test_separable_logistic(self, blobs):
        m = fit_softmax_net(blobs, {"hidden_layers": 0, "epochs": 60}, seed=0)
        assert np.mean(m.predict(blobs.features) == blobs.labels) >= 0.99

    @pytest.mark.parametrize("head", ["softmax", "pc-softmax"])
    @pytest.mark.parametrize("layers", [0, 2])
    def test_gradient_matches_finite_differences(self, head, layers):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(10, 3))
        y = rng.integers(0, 3, 10)
        net = SoftmaxNet(hidden_layers=layers, units=5, l2=1e-3, head=head, seed=2)
        net.fit(Dataset(X, np.r_[y[:-3], [0, 1, 2]], 3))
        params = [p.copy() for p in net.net_.params]
        _, grads = net.loss_and_grad(params, X, y)
        h = 1e-6
        for p, g in zip(params, grads):
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + h
                lp, _ = net.loss_and_grad(params, X, y)
                p[idx] = old - h
                lm, _ = net.loss_and_grad(params, X, y)
                p[idx] = old
                fd = (lp - lm) / (2 * h)
                assert abs(fd - g[idx]) <= 1e-4 * max(1.0, abs(fd), abs(g[idx]))

    def test_pc_head_with_uniform_prior_matches_softmax_argmax(self):
        rng = np.random.default_rng(3)
        scores = rng.normal(size=(200, 4))
        y = rng.integers(0, 4, 200)
        uniform = np.log(np.full(4, 0.25))
        l_soft, d_soft = softmax_ce(scores, y)
        l_pc, d_pc = pc_softmax_ce(scores, y, uniform, "prior-weighted")
        # The prior-weighted loss differs from cross-entropy by the constant lg M only.
        assert l_pc == pytest.approx(l_soft - math.log(4))
        assert np.allclose(d_pc, d_soft)
        ds = Dataset(rng.normal(size=(40, 2)), np.tile(np.arange(4), 10), 4)
        a = SoftmaxNet(units=8, epochs=5, head="softmax", seed=4).fit(ds)
        b = SoftmaxNet(units=8, epochs=5, head="pc-softmax", seed=4).fit(ds)
        b.net_.params = [p.copy() for p in a.net_.params]
        Xq = rng.normal(size=(100, 2))
        assert np.array_equal(a.predict(Xq), b.predict(Xq))

    def test_validation_and_divergence(self, blobs, monkeypatch):
        with pytest.raises(ValueError):
            SoftmaxNet(units=1000)
        with pytest.raises(ValueError):
            SoftmaxNet(learning_rate=1.0)
        with pytest.raises(ValueError):
            SoftmaxNet(head="sigmoid")
        net = SoftmaxNet(epochs=2, seed=0)
        monkeypatch.setattr(net, "loss_and_grad",
                            lambda params, X, y: (float("nan"), [np.zeros_like(p) for p in params]))
        with pytest.raises(TrainingDivergedError, match="epoch 0"):
            net.fit(blobs)

    def test_scaled_exponent_loss_is_unbounded_below(self):
        # exp(s_y) / sum exp(p_m s_m): scaling the scores drives the loss to -inf.
        y = np.array([0, 1])
        lp = np.log([0.5, 0.5])
        base = np.array([[1.0, -1.0], [-1.0, 1.0]])
        losses = [pc_softmax_ce(c * base, y, lp, "scaled-exponent")[0] for c in (1, 10, 100)]
        assert losses[0] > losses[1] > losses[2] and losses[2] < -40


class TestGmm:
    def test_em_monotone(self):
        rng = np.random.default_rng(0)
        X = np.vstack([rng.normal(0, 1, (150, 2)), rng.normal(4, 0.5, (100, 2))])
        for cov in ("full", "diag", "tied", "spherical"):
            g = GaussianMixture(3, cov, reg=1e-6, tol=0.0, max_iter=60, seed=1).fit(X)
            h = np.array(g.loglik_history_)
            assert np.all(np.diff(h) >= -1e-8), cov

    def test_aic_one_dimensional_closed_form(self):
        rng = np.random.default_rng(2)
        x0, x1 = rng.normal(-1, 1, 40), rng.normal(2, 0.5, 60)
        ds = Dataset(np.r_[x0, x1][:, None], labels(40, 60), 2)
        clf = GmmBayesClassifier(1, "full", reg=1e-10).fit(ds)
        loglik = 0.0
        for x, p in ((x0, 0.4), (x1, 0.6)):
            loglik += norm.logpdf(x, x.mean(), math.sqrt(x.var() + 1e-10)).sum() + len(x) * math.log(p)
        F = 2 + 2 + 1  # mean and variance per class, plus one free class weight
        assert clf.n_parameters() == F
        assert clf.aic(ds) == pytest.approx(-2 * loglik + 2 * F, rel=1e-9)
        g = GaussianMixture(1, "full", reg=1e-10).fit(x0[:, None])
        assert g.aic() == pytest.approx(-2 * norm.logpdf(x0, x0.mean(), x0.std()).sum() + 4, rel=1e-7)

    def test_bisector_boundary(self):
        rng = np.random.default_rng(5)
        X = np.vstack([rng.normal(-3, 1, (300, 2)), rng.normal(3, 1, (300, 2))])
        ds = Dataset(X, labels(300, 300), 2)
        clf = fit_gmm_bayes(ds, {"n_components": 1, "covariance": "spherical"})
        assert np.mean(clf.predict(X) == ds.labels) >= 0.99
        # Points on the perpendicular bisector x0 + x1 = 0 are near 50/50.
        t = np.linspace(-2, 2, 9)
        P = clf.predict_proba(np.column_stack([t, -t]))
        assert np.all(np.abs(P[:, 1] - 0.5) < 0.15)

    def test_small_class_and_restarts(self):
        X = np.r_[np.zeros(5), np.ones(3)][:, None] + np.arange(8)[:, None] * 1e-3
        clf = fit_gmm_bayes(Dataset(X, labels(5, 3), 2), {"n_components": 4, "covariance": "diag"})
        assert clf.components_[1].n_components == 3
        with pytest.raises(ValueError):
            GaussianMixture(5).fit(np.zeros((3, 1)))
        with pytest.raises(EMDegenerateError):
            GaussianMixture(2, "full", reg=1e-10, min_mass=0.6, restarts=1).fit(np.zeros((10, 1)))


class TestKnn:
    def test_self_neighbour(self, blobs):
        m = fit_knn(blobs, {"k": 1, "alpha": 0})
        P = m.predict_proba(blobs.features)
        assert np.array_equal(P[np.arange(200), blobs.labels], np.ones(200))

    def test_global_vote(self):
        ds = Dataset(np.arange(10.0)[:, None], labels(7, 3), 2)
        m = fit_knn(ds, {"k": 10, "alpha": 1})
        assert np.allclose(m.predict_proba(np.array([[0.0], [100.0]])), [8 / 12, 4 / 12])

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(4)
        x = np.r_[rng.normal(0, 1, 30), rng.normal(5, 1, 30)]
        ds = Dataset(x[:, None], labels(30, 30), 2)
        m = fit_knn(ds, {"k": 9, "alpha": 1, "standardize": False})
        for q in (1.0, 2.5, 2.51, 4.0):
            near = np.argsort(np.abs(x - q), kind="stable")[:9]
            c1 = np.sum(ds.labels[near])
            assert np.allclose(m.predict_proba(np.array([[q]]))[0], [(9 - c1 + 1) / 11, (c1 + 1) / 11])

    def test_tied_neighbours_share_votes(self):
        x = np.r_[np.zeros(50), np.ones(50)]
        ds = Dataset(x[:, None], np.r_[np.zeros(95), np.ones(5)].astype(int), 2)
        m = fit_knn(ds, {"k": 1, "alpha": 0})
        assert np.allclose(m.predict_proba(np.array([[1.0], [0.0]])), [[0.9, 0.1], [1.0, 0.0]])

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            fit_knn(Dataset(np.zeros((4, 1)), [0, 1, 0, 1], 2), {"k": 5})


@pytest.mark.parametrize("family", ["softmax-net", "pc-softmax-net", "gmm-bayes", "knn", "marginal"])
def test_predict_is_argmax_and_deterministic(family):
    ds, _ = generate_system(SynthConfig("perturbation", "minority", 3, 2, 0.2, 0.2, 60, seed=3))
    rng = np.random.default_rng(0)
    hp = sample_hyperparameters(DEFAULT_RANGES[family], rng)
    if "epochs" in hp:
        hp["epochs"] = 5
    if family == "knn":
        hp["k"] = min(hp["k"], 30)
    a = FITTERS[family](ds, hp, 11)
    b = FITTERS[family](ds, hp, 11)
    Xq = rng.normal(2, 2, size=(50, 2))
    P = a.predict_proba(Xq)
    assert np.abs(P.sum(axis=1) - 1).max() < 1e-9
    assert np.array_equal(a.predict(Xq), np.argmax(P, axis=1))
    assert np.allclose(P, b.predict_proba(Xq), atol=1e-12, rtol=0)


def test_portfolio_close_to_bayes_error():
    ds, gt = generate_system(SynthConfig("perturbation", "balanced", 2, 2, 0.0, seed=12))
    rng = np.random.default_rng(1)
    idx = rng.permutation(ds.n_samples)
    train, test = ds.subset(idx[:1400]), ds.subset(idx[1400:])
    best = random_search(["gmm-bayes", "knn"], None, 8, "BER", SplitPlan(seed=1), 1, train)[0]
    err = np.mean(best.fit(train, 0).predict(test.features) != test.labels)
    bayes = np.mean(1 - posterior(gt, test.features).max(axis=1))
    assert abs(err - bayes) <= 0.02


class TestRandomSearch:
    def setup_method(self):
        self.ds, _ = generate_system(SynthConfig("perturbation", "balanced", 2, 2, 0.1, None, 100, seed=1))

    def test_single_candidate(self):
        out = random_search("knn", None, 1, "BER", SplitPlan(seed=0), 0, self.ds)
        assert len(out) == 1 and out[0].rank == 0

    def test_sorted_with_three_repeats(self):
        out = random_search(["knn", "gmm-bayes"], None, 8, "BER", SplitPlan(n_splits=3, seed=0), 0, self.ds)
        scores = [c.score for c in out]
        assert scores == sorted(scores)
        assert all(len(c.fold_scores) == 3 for c in out)
        assert all(c.score == pytest.approx(np.mean(c.fold_scores)) for c in out)
        assert [c.rank for c in out] == list(range(len(out)))

    def test_aic_objective(self):
        out = random_search("gmm-bayes", None, 3, "AIC", SplitPlan(seed=0), 0, self.ds)
        assert all(np.isfinite(c.score) for c in out)

    def test_reproducible(self):
        a = random_search("knn", None, 4, "BER", SplitPlan(seed=3), 3, self.ds)
        b = random_search("knn", None, 4, "BER", SplitPlan(seed=3), 3, self.ds)
        assert [c.to_dict() for c in a] == [c.to_dict() for c in b]

    def test_all_failed(self):
        with pytest.raises(AllCandidatesFailedError) as err:
            random_search("knn", {"k": ("int", 500, 600, False)}, 2, "BER", SplitPlan(seed=0), 0, self.ds)
        assert "exceeds" in str(err.value)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            random_search("knn", None, 0, "BER", SplitPlan(), 0, self.ds)
        with pytest.raises(ValueError):
            random_search("tree", None, 1, "BER", SplitPlan(), 0, self.ds)


def test_balanced_error_binary_matches_ber():
    y = np.array([0, 0, 0, 1, 1])
    yhat = np.array([0, 1, 0, 1, 0])
    assert balanced_error(y, yhat, 2) == pytest.approx(0.5 * (1 / 3 + 1 / 2))


class TestReduceFeatures:
    def test_identity(self, blobs):
        red, cmap = reduce_features(blobs, 2)
        assert cmap["columns"] == [0, 1] and np.array_equal(red.features, blobs.features)

    def test_informative_feature_selected(self):
        rng = np.random.default_rng(0)
        y = rng.integers(0, 2, 400)
        X = rng.normal(size=(400, 8))
        X[:, 0] = y + 0.3 * rng.normal(size=400)
        ds = Dataset(X, y, 2)
        # Oracle: single-feature threshold accuracy.
        acc = [max(np.mean((X[:, j] > np.median(X[:, j])) == y), np.mean((X[:, j] <= np.median(X[:, j])) == y))
               for j in range(8)]
        red, cmap = reduce_features(ds, 1, seed=1)
        assert cmap["columns"] == [int(np.argmax(acc))] == [0]

    def test_wide_data(self):
        rng = np.random.default_rng(1)
        ds = Dataset(rng.normal(size=(200, 124)), rng.integers(0, 2, 200), 2)
        red, cmap = reduce_features(ds, 30)
        assert red.n_features == 30 and len(cmap["columns"]) == 30

    def test_errors(self, blobs):
        with pytest.raises(ValueError):
            reduce_features(blobs, 0)
        with pytest.raises(ValueError):
            reduce_features(blobs, 3)

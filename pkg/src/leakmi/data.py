"""Datasets, resampling splits and classification metrics.

Everything downstream (synthetic generation, models, estimators, the
detection pipeline) passes data around as an immutable :class:`Dataset`
whose labels are contiguous integers ``0..M-1``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "Dataset",
    "ConfusionMatrix",
    "SplitPlan",
    "class_marginal",
    "entropy_bits",
    "confusion_matrix",
    "classification_metrics",
    "stratified_kfold",
    "mccv_splits",
    "load_csv",
    "save_csv",
    "dataset_to_csv",
    "child_seeds",
]


def child_seeds(seed: int, n: int) -> list[int]:
    """Derive ``n`` independent 63-bit integer seeds from ``seed``."""
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF)
    return [int(c.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1)) for c in ss.spawn(n)]


@dataclass(frozen=True)
class Dataset:
    """Feature matrix with integer class labels.

    Parameters
    ----------
    features : array_like, shape (N, d)
        Real-valued observables.
    labels : array_like, shape (N,)
        Integer labels in ``[0, num_classes)``.
    num_classes : int, optional
        Number of classes ``M``; inferred as ``max(labels) + 1`` (at least 2)
        when omitted.
    label_names : sequence, optional
        Original label values, indexed by the integer label.
    feature_names : sequence of str, optional
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int = 0
    label_names: tuple = ()
    feature_names: tuple = ()
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        X = np.array(self.features, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {X.shape}")
        y = np.asarray(self.labels)
        if y.ndim != 1 or len(y) != len(X):
            raise ValueError("labels must be a vector with one entry per feature row")
        if len(y) == 0:
            raise ValueError("empty dataset")
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise ValueError("labels must be integers")
        y = y.astype(np.int64)
        M = int(self.num_classes) if self.num_classes else max(2, int(y.max()) + 1)
        if M < 2:
            raise ValueError("num_classes must be >= 2")
        if y.min() < 0 or y.max() >= M:
            raise ValueError(f"labels must lie in [0, {M})")
        if len(y) < M:
            raise ValueError(f"need N >= M, got N={len(y)}, M={M}")
        if not np.all(np.isfinite(X)):
            raise ValueError("features contain NaN or infinite values")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "num_classes", M)
        object.__setattr__(self, "label_names", tuple(self.label_names))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    @property
    def n_samples(self) -> int:
        return len(self.labels)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        """Rows ``idx`` as a new dataset with the same class space.

        Subsets smaller than ``M`` are allowed here (they arise on tiny folds).
        """
        idx = np.asarray(idx)
        out = object.__new__(Dataset)
        X = self.features[idx]
        y = self.labels[idx]
        if len(y) == 0:
            raise ValueError("empty subset")
        X.setflags(write=False)
        y.setflags(write=False)
        for name, val in (("features", X), ("labels", y), ("num_classes", self.num_classes),
                          ("label_names", self.label_names),
                          ("feature_names", self.feature_names), ("meta", dict(self.meta))):
            object.__setattr__(out, name, val)
        return out

    def with_features(self, features, feature_names=()) -> "Dataset":
        return Dataset(features, self.labels, self.num_classes, self.label_names,
                       tuple(feature_names), dict(self.meta))


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts of ground truth (rows) against predictions (columns).

    For binary problems ``tn, fp, fn, tp`` follow the usual layout
    ``[[tn, fp], [fn, tp]]``. For ``M > 2`` these properties refer to the
    one-vs-rest view of ``positive`` (default class 1).
    """

    counts: np.ndarray
    positive: int = 1

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] < 2:
            raise ValueError("confusion matrix must be square with at least 2 classes")
        if (c < 0).any():
            raise ValueError("negative counts")
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    @classmethod
    def from_binary(cls, tn: int, fp: int, fn: int, tp: int) -> "ConfusionMatrix":
        return cls(np.array([[tn, fp], [fn, tp]]))

    def binarized(self, positive: int | None = None) -> "ConfusionMatrix":
        pos = self.positive if positive is None else positive
        c = self.counts
        tp = c[pos, pos]
        fn = c[pos].sum() - tp
        fp = c[:, pos].sum() - tp
        tn = c.sum() - tp - fn - fp
        return ConfusionMatrix.from_binary(tn, fp, fn, tp)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def tn(self) -> int:
        return int(self.binarized().counts[0, 0])

    @property
    def fp(self) -> int:
        return int(self.binarized().counts[0, 1])

    @property
    def fn(self) -> int:
        return int(self.binarized().counts[1, 0])

    @property
    def tp(self) -> int:
        return int(self.binarized().counts[1, 1])

    def to_list(self) -> list:
        return self.counts.tolist()


@dataclass(frozen=True)
class SplitPlan:
    """Resampling scheme: stratified k-fold or Monte-Carlo CV."""

    kind: str = "monte-carlo-cv"
    n_splits: int = 3
    val_fraction: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("stratified-k-fold", "monte-carlo-cv"):
            raise ValueError(f"unknown split kind {self.kind!r}")
        if self.n_splits < 1:
            raise ValueError("n_splits must be positive")
        if self.kind == "monte-carlo-cv" and not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")

    def split(self, dataset: Dataset) -> list[tuple[np.ndarray, np.ndarray]]:
        if self.kind == "stratified-k-fold":
            return stratified_kfold(dataset, self.n_splits, self.seed)
        return mccv_splits(dataset, self.n_splits, self.val_fraction, self.seed)


def class_marginal(dataset: Dataset | np.ndarray, num_classes: int | None = None) -> np.ndarray:
    """Empirical class frequencies ``count(y == m) / N``."""
    if isinstance(dataset, Dataset):
        y, M = dataset.labels, dataset.num_classes
    else:
        y = np.asarray(dataset, dtype=np.int64)
        if num_classes is None:
            raise ValueError("num_classes is required for raw label vectors")
        M = num_classes
    if len(y) == 0:
        raise ValueError("empty dataset")
    return np.bincount(y, minlength=M).astype(float) / len(y)


def entropy_bits(p) -> float:
    """Shannon entropy in bits with the convention ``0 lg 0 = 0``."""
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or len(p) == 0:
        raise ValueError("probability vector must be 1-D and non-empty")
    if (p < 0).any():
        raise ValueError("negative probability")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")
    nz = p[p > 0]
    h = -float(np.sum(nz * np.log2(nz)))
    return min(max(h, 0.0), math.log2(len(p)))


def confusion_matrix(y_true, y_pred, num_classes: int | None = None) -> ConfusionMatrix:
    """Cell ``(i, j)`` counts instances with truth ``i`` predicted as ``j``."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"length mismatch: {len(y_true)} vs {len(y_pred)}")
    M = num_classes or max(2, int(max(y_true.max(initial=0), y_pred.max(initial=0))) + 1)
    if (y_true < 0).any() or (y_pred < 0).any() or (y_true >= M).any() or (y_pred >= M).any():
        raise ValueError(f"labels outside [0, {M})")
    counts = np.bincount(y_true * M + y_pred, minlength=M * M).reshape(M, M)
    return ConfusionMatrix(counts)


def _ratio(num: float, den: float) -> tuple[float, bool]:
    if den == 0:
        return 0.0, True
    return num / den, False


def classification_metrics(cm: ConfusionMatrix) -> dict:
    """Accuracy, error rate, FPR, FNR, MCC and balanced error rate.

    Zero denominators follow the 0/0 -> 0 convention (MCC -> 0); the names of
    affected metrics are listed under ``"degenerate"``.
    """
    n = cm.total
    if n <= 0:
        raise ValueError("confusion matrix is empty")
    acc = float(np.trace(cm.counts)) / n
    b = cm.binarized()
    tn, fp, fn, tp = (int(v) for v in b.counts.ravel())
    degenerate = []
    fpr, bad = _ratio(fp, fp + tn)
    if bad:
        degenerate.append("fpr")
    fnr, bad = _ratio(fn, fn + tp)
    if bad:
        degenerate.append("fnr")
    den = float(tp + fp) * float(tp + fn) * float(tn + fp) * float(tn + fn)
    if den == 0:
        mcc = 0.0
        degenerate.append("mcc")
    else:
        mcc = (tp * tn - fp * fn) / math.sqrt(den)
        mcc = min(1.0, max(-1.0, mcc))
    return {
        "accuracy": acc,
        "error": 1.0 - acc,
        "fpr": fpr,
        "fnr": fnr,
        "mcc": mcc,
        "ber": 0.5 * (fpr + fnr),
        "degenerate": degenerate,
    }


def stratified_kfold(dataset: Dataset, k: int, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Stratified K-fold partition as ``(train_idx, test_idx)`` pairs.

    Members of each class are shuffled and dealt round-robin over the folds,
    continuing where the previous class stopped, so fold sizes and per-class
    counts both differ by at most one. Classes with fewer than ``k`` members
    simply miss some folds.
    """
    n = dataset.n_samples
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of samples {n}")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(n, dtype=np.int64)
    offset = 0
    for c in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == c)
        rng.shuffle(members)
        fold_of[members] = (offset + np.arange(len(members))) % k
        offset += len(members)
    everything = np.arange(n)
    return [(everything[fold_of != f], everything[fold_of == f]) for f in range(k)]


def _stratified_take(labels: np.ndarray, num_classes: int, n_take: int) -> np.ndarray:
    # Largest-remainder allocation of n_take across classes.
    counts = np.bincount(labels, minlength=num_classes)
    quota = counts * n_take / len(labels)
    alloc = np.floor(quota).astype(int)
    rem = n_take - alloc.sum()
    order = np.argsort(-(quota - alloc), kind="stable")
    alloc[order[:rem]] += 1
    return np.minimum(alloc, counts)


def mccv_splits(dataset: Dataset, repeats: int, val_fraction: float, seed: int = 0):
    """Monte-Carlo cross-validation: ``repeats`` stratified train/validation draws."""
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must lie in (0, 1)")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    n = dataset.n_samples
    n_val = int(math.floor(val_fraction * n + 0.5))
    if n_val == 0 or n_val == n:
        raise ValueError(f"val_fraction={val_fraction} leaves an empty side for N={n}")
    rng = np.random.default_rng(seed)
    alloc = _stratified_take(dataset.labels, dataset.num_classes, n_val)
    splits = []
    for _ in range(repeats):
        val = []
        for c in range(dataset.num_classes):
            members = np.flatnonzero(dataset.labels == c)
            if alloc[c]:
                val.append(rng.choice(members, size=alloc[c], replace=False))
        val = np.sort(np.concatenate(val))
        mask = np.ones(n, dtype=bool)
        mask[val] = False
        splits.append((np.flatnonzero(mask), val))
    return splits


def _encode_labels(raw: Sequence[str]):
    uniq = sorted(set(raw))
    try:
        uniq = sorted(uniq, key=float)
    except ValueError:
        pass
    index = {v: i for i, v in enumerate(uniq)}
    return np.array([index[v] for v in raw], dtype=np.int64), tuple(uniq)


def load_csv(path, label_col: str | int = -1) -> Dataset:
    """Read a CSV with a header row into a :class:`Dataset`.

    ``label_col`` names the label column or gives its index; every other
    column must be numeric. Labels are re-coded to ``0..M-1`` in sorted
    order and the original values kept in ``label_names``. A sidecar
    ``<path>.json`` (or ``<stem>.json``) is attached as ``meta`` if present.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header, body = rows[0], [r for r in rows[1:] if r]
    if isinstance(label_col, str) and not label_col.lstrip("-").isdigit():
        if label_col not in header:
            raise ValueError(f"{path}: no column named {label_col!r}")
        li = header.index(label_col)
    else:
        li = int(label_col) % len(header)
    feat_cols = [i for i in range(len(header)) if i != li]
    try:
        X = np.array([[float(r[i]) for i in feat_cols] for r in body], dtype=float)
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric feature value ({exc})") from None
    y, names = _encode_labels([r[li].strip() for r in body])
    meta = {}
    for side in (path.with_suffix(path.suffix + ".json"), path.with_suffix(".json")):
        if side.exists():
            meta = json.loads(side.read_text())
            break
    M = max(2, len(names))
    return Dataset(X.reshape(len(body), len(feat_cols)), y, M, names,
                   tuple(header[i] for i in feat_cols), meta)


def dataset_to_csv(dataset: Dataset, label_col: str = "y") -> str:
    """CSV text with a header row, features first and the label last."""
    buf = io.StringIO()
    names = dataset.feature_names or tuple(f"x{i}" for i in range(dataset.n_features))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(names) + [label_col])
    labels = dataset.label_names or range(dataset.num_classes)
    labels = list(labels)
    for row, lab in zip(dataset.features, dataset.labels):
        w.writerow([repr(float(v)) for v in row] + [labels[int(lab)]])
    return buf.getvalue()


def save_csv(dataset: Dataset, path, label_col: str = "y") -> None:
    Path(path).write_text(dataset_to_csv(dataset, label_col))

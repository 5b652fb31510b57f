"""Frozen-feature evaluation and qualitative patch analysis.

k-NN classification, a linear-probe grid (learning rate x feature view),
PCA of patch features with first-component foreground thresholding, and
patch matching by optimal assignment followed by non-maximum suppression.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .errors import DegenerateLabels, DegenerateVariance, EmptyTrain, LengthMismatch
from .rng import derive_seed, generator, permutation
from .vecindex import topk_rows

# learning-rate axis of the linear-probe grid
PROBE_LRS = (0.0001, 0.0002, 0.0005, 0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5)
PROBE_ITERS = 12_500


@dataclass
class LabeledFeatures:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int | None = None

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if len(self.features) != len(self.labels):
            raise LengthMismatch(f"{len(self.features)} feature rows for {len(self.labels)} labels")
        if self.n_classes is None:
            self.n_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("labels must lie in [0, n_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, rows) -> "LabeledFeatures":
        return LabeledFeatures(self.features[rows], self.labels[rows], self.n_classes)


def _normalize(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(n > 0, n, 1.0)


def knn_classify(train: LabeledFeatures, queries, k: int = 20) -> np.ndarray:
    """Majority vote among the k most cosine-similar training rows.

    Neighbor ties go to the smaller training index; vote ties to the larger
    summed similarity, then to the smaller label.
    """
    if len(train) == 0:
        raise EmptyTrain("no training features")
    if k < 1:
        raise ValueError("k must be >= 1")
    t = _normalize(train.features)
    q = _normalize(np.atleast_2d(np.asarray(queries, dtype=np.float64)))
    idx = np.arange(len(t))
    out = np.empty(len(q), dtype=np.int64)
    for r, (nbrs, sims) in enumerate(topk_rows(q @ t.T, idx, k)):
        labels = train.labels[nbrs]
        votes = np.bincount(labels, minlength=train.n_classes)
        weight = np.bincount(labels, weights=sims, minlength=train.n_classes)
        order = np.lexsort((np.arange(len(votes)), -weight, -votes))
        out[r] = order[0]
    return out


@dataclass
class LinearModel:
    weights: np.ndarray  # D x C
    bias: np.ndarray  # C

    def logits(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.weights + self.bias

    def predict(self, x) -> np.ndarray:
        return self.logits(x).argmax(axis=1)


def _xent(model: LinearModel, data: LabeledFeatures) -> float:
    z = model.logits(data.features)
    z = z - z.max(1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(1, keepdims=True))
    return float(-logp[np.arange(len(data)), data.labels].mean())


@dataclass
class ProbeResult:
    model: LinearModel
    accuracy: float
    loss_history: list[float] = field(default_factory=list)


def linear_probe_train(
    train: LabeledFeatures,
    val: LabeledFeatures,
    lr: float,
    iters: int = PROBE_ITERS,
    *,
    batch_size: int = 256,
    seed: int = 0,
    log_every: int = 0,
) -> ProbeResult:
    """Multinomial logistic regression by minibatch SGD with cosine-decayed lr.

    Weights start at zero and the bias at the log class priors of ``train``,
    so an untrained model predicts the majority class.
    """
    if lr < 0:
        raise ValueError("lr must be >= 0")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    c = train.n_classes
    counts = np.bincount(train.labels, minlength=c)
    if np.count_nonzero(counts) < 2:
        raise DegenerateLabels("training labels contain a single class")
    prior = counts / counts.sum()
    model = LinearModel(np.zeros((train.features.shape[1], c)), np.log(np.maximum(prior, 1e-12)))
    rng = generator(seed)
    n = len(train)
    bs = min(batch_size, n)
    history = [_xent(model, train)]
    onehot = np.eye(c)[train.labels]
    for t in range(iters):
        step = lr * (1.0 + math.cos(math.pi * t / iters)) / 2.0
        rows = rng.choice(n, size=bs, replace=False) if bs < n else np.arange(n)
        x = train.features[rows]
        z = x @ model.weights + model.bias
        z -= z.max(1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(1, keepdims=True)
        g = (p - onehot[rows]) / bs
        model.weights -= step * (x.T @ g)
        model.bias -= step * g.sum(0)
        if log_every and (t + 1) % log_every == 0:
            history.append(_xent(model, train))
    if log_every:
        history.append(_xent(model, train))
    acc = float(np.mean(model.predict(val.features) == val.labels)) if len(val) else float("nan")
    return ProbeResult(model, acc, history)


@dataclass
class ProbeGrid:
    """Learning rates x named feature views (e.g. last-1/last-4 blocks, +/- avgpool)."""

    feature_views: Mapping[str, np.ndarray]
    learning_rates: Sequence[float] = PROBE_LRS

    @property
    def size(self) -> int:
        return len(self.learning_rates) * len(self.feature_views)


@dataclass
class GridResult:
    view: str
    lr: float
    accuracy: float
    n_trained: int
    cells: list[tuple[str, float, float]]


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = permutation(n, seed)
    n_val = max(1, int(round(n * val_fraction)))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def grid_search(
    grid: ProbeGrid,
    labels,
    *,
    iters: int = PROBE_ITERS,
    val_fraction: float = 0.2,
    seed: int = 0,
    batch_size: int = 256,
) -> GridResult:
    """Train one classifier per (view, lr) cell on a shared split; keep the best.

    Accuracy ties go to the smaller lr, then to the earlier view.
    """
    if grid.size == 0:
        raise ValueError("empty probe grid")
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = int(labels.max()) + 1
    tr, va = split_indices(len(labels), val_fraction, derive_seed(seed, "probe/split"))
    cells = []
    for vi, (name, feats) in enumerate(grid.feature_views.items()):
        data = LabeledFeatures(feats, labels, n_classes)
        for lr in grid.learning_rates:
            res = linear_probe_train(
                data.take(tr), data.take(va), lr, iters,
                batch_size=batch_size, seed=derive_seed(seed, f"probe/{name}/{lr}"),
            )
            cells.append((name, float(lr), res.accuracy, vi))
    best = min(cells, key=lambda c: (-c[2], c[1], c[3]))
    return GridResult(best[0], best[1], best[2], len(cells), [c[:3] for c in cells])


@dataclass
class PCAResult:
    components: np.ndarray  # n x D, orthonormal rows
    scores: np.ndarray  # P x n
    explained_variance_ratio: np.ndarray
    mean: np.ndarray
    foreground: np.ndarray | None = None


def pca(features, n_components: int | None = None) -> PCAResult:
    """Principal directions of mean-centered rows.

    Uses the D x D covariance, or the P x P Gram matrix when P < D. Each
    component is signed so its largest-magnitude loading is positive.
    """
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    p, d = x.shape
    mean = x.mean(0)
    xc = x - mean
    total = float((xc * xc).sum())
    if total <= 0:
        raise DegenerateVariance("all rows are identical")
    n = min(d, p) if n_components is None else n_components
    if p < d and n < p:
        # Gram trick: eigenvectors of the P x P matrix mapped back to feature space
        evals, u = np.linalg.eigh(xc @ xc.T)
        order = np.argsort(evals)[::-1][:n]
        evals, u = np.maximum(evals[order], 0.0), u[:, order]
        if evals[-1] <= evals[0] * 1e-12:
            return _pca_cov(xc, n, total, mean)
        comps = (xc.T @ u / np.sqrt(evals)).T
        q, r = np.linalg.qr(comps.T)
        comps = (q * np.sign(np.diag(r))).T
        return _finish(xc, comps, evals, total, mean)
    return _pca_cov(xc, n, total, mean)


def _pca_cov(xc, n, total, mean) -> PCAResult:
    evals, v = np.linalg.eigh(xc.T @ xc)
    order = np.argsort(evals)[::-1][:n]
    return _finish(xc, v[:, order].T, np.maximum(evals[order], 0.0), total, mean)


def _finish(xc, comps, evals, total, mean) -> PCAResult:
    big = np.argmax(np.abs(comps), axis=1)
    comps = comps * np.where(comps[np.arange(len(comps)), big] < 0, -1.0, 1.0)[:, None]
    return PCAResult(comps, xc @ comps.T, evals / total, mean)


def pca_foreground(patch_features, n_components: int = 3, threshold: float = 0.0) -> PCAResult:
    """PCA of patch features; foreground = patches with first score above 0."""
    x = np.atleast_2d(np.asarray(patch_features, dtype=np.float64))
    if len(x) < 4:
        raise ValueError("need at least 4 patches")
    res = pca(x, min(n_components, x.shape[1]))
    res.foreground = res.scores[:, 0] > threshold
    return res


@dataclass
class MatchSet:
    matches: list[tuple[int, int, float]]
    coords_a: np.ndarray
    coords_b: np.ndarray

    def __len__(self) -> int:
        return len(self.matches)

    @property
    def total_cost(self) -> float:
        return float(sum(c for _, _, c in self.matches))


def assignment(cost) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-cost one-to-one assignment of min(rows, cols) pairs."""
    return linear_sum_assignment(np.asarray(cost, dtype=np.float64))


def nms(matches, coords_a, coords_b, radius: float) -> list[tuple[int, int, float]]:
    """Greedy suppression by ascending cost.

    A match survives iff no already-kept match lies strictly closer than
    ``radius`` on either image.
    """
    kept: list[tuple[int, int, float]] = []
    for a, b, cost in sorted(matches, key=lambda m: (m[2], m[0], m[1])):
        clash = any(
            np.linalg.norm(coords_a[a] - coords_a[ka]) < radius or np.linalg.norm(coords_b[b] - coords_b[kb]) < radius
            for ka, kb, _ in kept
        )
        if not clash:
            kept.append((a, b, cost))
    return kept


def patch_match(features_a, coords_a, features_b, coords_b, nms_radius: float) -> MatchSet:
    fa = np.atleast_2d(np.asarray(features_a, dtype=np.float64))
    fb = np.atleast_2d(np.asarray(features_b, dtype=np.float64))
    ca = np.atleast_2d(np.asarray(coords_a, dtype=np.float64))
    cb = np.atleast_2d(np.asarray(coords_b, dtype=np.float64))
    if not len(fa) or not len(fb):
        raise ValueError("both patch sets must be non-empty")
    if len(ca) != len(fa) or len(cb) != len(fb):
        raise LengthMismatch("one coordinate row per patch is required")
    cost = cdist(fa, fb)
    rows, cols = assignment(cost)
    matches = [(int(r), int(c), float(cost[r, c])) for r, c in zip(rows, cols)]
    return MatchSet(nms(matches, ca, cb, nms_radius), ca, cb)

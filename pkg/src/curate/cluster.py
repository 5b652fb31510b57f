"""Lloyd k-means with k-means++ seeding, plain or spherical.

Spherical mode keeps centroids on the unit sphere; it is the default for
curation because every similarity in the pipeline is cosine. Euclidean mode
is used for product-quantizer training.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .embeddings import EmbeddingSet
from .errors import DimensionMismatch, FormatError, InsufficientData
from .rng import _RawStream

log = logging.getLogger(__name__)

# relative slack under which two expanded distances count as a possible tie
_TIE_RTOL = 1e-9
_CHUNK_ELEMS = 1 << 22


@dataclass(frozen=True)
class KMeansConfig:
    k: int
    max_iters: int = 50
    tol: float = 1e-4
    seed: int = 0
    spherical: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.tol >= 0:
            raise ValueError("tol must be >= 0")


@dataclass
class KMeansModel:
    centroids: np.ndarray
    ids: np.ndarray
    assignments: np.ndarray
    inertia: float
    spherical: bool
    inertia_history: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.centroids)

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def assignment_map(self) -> dict[int, int]:
        return dict(zip(self.ids.tolist(), self.assignments.tolist()))

    def members(self, cluster: int) -> np.ndarray:
        return self.ids[self.assignments == cluster]


def _as_array(x) -> np.ndarray:
    if isinstance(x, EmbeddingSet):
        x = x.data
    return np.asarray(x, dtype=np.float64)


def nearest_centroid(x: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of the nearest centroid per row and its squared distance.

    Distances are screened with the BLAS expansion and near-ties are re-scored
    exactly as ``((x - c) ** 2).sum()``, so exact ties go to the smaller index.
    """
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    n, k = len(x), len(c)
    labels = np.empty(n, dtype=np.int64)
    d2 = np.empty(n, dtype=np.float64)
    c_sq = (c * c).sum(1)
    step = max(1, _CHUNK_ELEMS // max(1, k))
    for lo in range(0, n, step):
        xb = x[lo:lo + step]
        x_sq = (xb * xb).sum(1)
        approx = x_sq[:, None] - 2.0 * (xb @ c.T) + c_sq[None, :]
        best = approx.min(1)
        slack = _TIE_RTOL * (x_sq + c_sq.max()) + 1e-12
        cand = approx <= (best + slack)[:, None]
        lab = approx.argmin(1)
        for r in np.flatnonzero(cand.sum(1) > 1):
            cols = np.flatnonzero(cand[r])
            exact = ((xb[r][None, :] - c[cols]) ** 2).sum(-1)
            lab[r] = cols[int(np.argmin(exact))]
        labels[lo:lo + len(xb)] = lab
        d2[lo:lo + len(xb)] = ((xb - c[lab]) ** 2).sum(1)
    return labels, d2


def kmeanspp_indices(x, k: int, seed: int) -> np.ndarray:
    """Row indices chosen by k-means++ seeding.

    The first row is uniform; each next row is drawn with probability
    proportional to its squared distance to the nearest chosen row. If every
    remaining row coincides with a chosen one, the draw is uniform over the
    rows not yet chosen.
    """
    x = _as_array(x)
    n = len(x)
    if k > n:
        raise InsufficientData(f"need at least k={k} points, got {n}")
    stream = _RawStream(seed)
    chosen = [stream.below(n)]
    closest = ((x - x[chosen[0]]) ** 2).sum(1)
    taken = np.zeros(n, dtype=bool)
    taken[chosen[0]] = True
    for _ in range(1, k):
        weights = np.where(taken, 0.0, closest)
        total = weights.sum()
        if total > 0:
            u = (stream.next_u64() >> 11) * (1.0 / (1 << 53)) * total
            idx = int(np.searchsorted(np.cumsum(weights), u, side="right"))
            idx = min(idx, n - 1)
            # guard against landing on a zero-weight row through rounding
            while weights[idx] == 0:
                idx -= 1
        else:
            free = np.flatnonzero(~taken)
            idx = int(free[stream.below(len(free))])
        chosen.append(idx)
        taken[idx] = True
        closest = np.minimum(closest, ((x - x[idx]) ** 2).sum(1))
    return np.asarray(chosen, dtype=np.int64)


def kmeans_init(es, k: int, seed: int) -> np.ndarray:
    x = _as_array(es)
    return x[kmeanspp_indices(x, k, seed)].copy()


def _normalize_rows(c: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(c, axis=1, keepdims=True)
    return c / np.where(norms > 0, norms, 1.0)


def _update(x, labels, prev, spherical):
    k, d = prev.shape
    sums = np.zeros((k, d))
    np.add.at(sums, labels, x)
    counts = np.bincount(labels, minlength=k)
    c = prev.copy()
    filled = counts > 0
    if spherical:
        norms = np.linalg.norm(sums, axis=1)
        ok = filled & (norms > 0)
        c[ok] = sums[ok] / norms[ok, None]
    else:
        c[filled] = sums[filled] / counts[filled, None]
    return c


def _assign_with_repair(x, c, spherical):
    """Assignment step; empty clusters are reseeded at the farthest point."""
    labels, d2 = nearest_centroid(x, c)
    for _ in range(len(c)):
        counts = np.bincount(labels, minlength=len(c))
        empty = np.flatnonzero(counts == 0)
        if not len(empty) or d2.max() <= 0:
            break
        for e in empty:
            donor = counts[labels] > 1
            if not donor.any():
                break
            far = int(np.argmax(np.where(donor, d2, -1.0)))
            if d2[far] <= 0:
                break
            counts[labels[far]] -= 1
            counts[e] += 1
            c[e] = x[far]
            labels[far] = e
            d2[far] = 0.0
        if spherical:
            c = _normalize_rows(c)
        labels, d2 = nearest_centroid(x, c)
    return c, labels, d2


def lloyd(x, config: KMeansConfig, *, on_iter=None):
    """Run k-means on a raw matrix; returns (centroids, labels, inertia, history)."""
    x = _as_array(x)
    if len(x) < config.k:
        raise InsufficientData(f"need at least k={config.k} points, got {len(x)}")
    c = x[kmeanspp_indices(x, config.k, config.seed)].copy()
    if config.spherical:
        c = _normalize_rows(c)
    history: list[float] = []
    for it in range(config.max_iters):
        c, labels, d2 = _assign_with_repair(x, c, config.spherical)
        inertia = float(d2.sum())
        history.append(inertia)
        if on_iter is not None:
            on_iter(it, c, inertia)
        if len(history) > 1:
            prev = history[-2]
            if inertia == 0 or prev - inertia <= config.tol * prev:
                break
        elif inertia == 0:
            break
        if it == config.max_iters - 1:
            break
        c = _update(x, labels, c, config.spherical)
    log.debug("k-means: k=%d iters=%d inertia=%.6g", config.k, len(history), history[-1])
    return c, labels, history[-1], history


def kmeans_fit(es: EmbeddingSet, config: KMeansConfig, *, on_iter=None) -> KMeansModel:
    """Fit k-means to an embedding set.

    ``on_iter(iteration, centroids, inertia)`` is called after every
    assignment step; tests use it to check monotone inertia.
    """
    if config.spherical and not es.normalized:
        raise ValueError("spherical k-means needs a normalized set")
    c, labels, inertia, history = lloyd(es.data, config, on_iter=on_iter)
    return KMeansModel(c, es.ids.copy(), labels, inertia, config.spherical, history)


def kmeans_assign(model: KMeansModel, es) -> np.ndarray:
    x = _as_array(es)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != model.dim:
        raise DimensionMismatch(f"model D={model.dim}, data D={x.shape[1]}")
    return nearest_centroid(x, model.centroids)[0]


# model file: header, centroids in the EMB1 payload layout, assignment table
MODEL_MAGIC = b"KMS1"
MODEL_HEADER = struct.Struct("<4sIIIB15x")
_ASSIGN = np.dtype([("id", "<u8"), ("cluster", "<u4")])


def save_model(path, model: KMeansModel) -> None:
    with open(path, "wb") as fh:
        fh.write(MODEL_HEADER.pack(MODEL_MAGIC, 1, model.k, model.dim, int(model.spherical)))
        fh.write(struct.pack("<d", model.inertia))
        fh.write(np.ascontiguousarray(model.centroids, dtype="<f4").tobytes())
        table = np.empty(len(model.ids), dtype=_ASSIGN)
        table["id"] = model.ids
        table["cluster"] = model.assignments
        fh.write(struct.pack("<Q", len(table)))
        fh.write(table.tobytes())


def load_model(path) -> KMeansModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < MODEL_HEADER.size:
        raise FormatError("truncated model header")
    magic, version, k, d, spherical = MODEL_HEADER.unpack_from(raw)
    if magic != MODEL_MAGIC or version != 1:
        raise FormatError("not a k-means model file")
    off = MODEL_HEADER.size
    (inertia,) = struct.unpack_from("<d", raw, off)
    off += 8
    cbytes = k * d * 4
    centroids = np.frombuffer(raw, dtype="<f4", count=k * d, offset=off).reshape(k, d)
    off += cbytes
    (count,) = struct.unpack_from("<Q", raw, off)
    off += 8
    table = np.frombuffer(raw, dtype=_ASSIGN, count=count, offset=off)
    return KMeansModel(
        centroids.astype(np.float64),
        table["id"].astype(np.int64),
        table["cluster"].astype(np.int64),
        inertia,
        bool(spherical),
    )

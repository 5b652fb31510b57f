"""Cosine nearest-neighbor search: exact brute force and IVF-PQ.

Vectors are stored unit-norm so a dot product is the cosine similarity. The
IVF-PQ index quantizes residuals (vector minus coarse centroid) in Euclidean
space; asymmetric distances are turned back into similarities with
``1 - d^2 / 2``, which is exact for unit vectors.

Every top-k selection breaks score ties toward the smaller id.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cluster import KMeansConfig, lloyd, nearest_centroid
from .embeddings import EmbeddingSet, l2_normalize
from .errors import (
    BadNprobe,
    BadSubspaceCount,
    DimensionMismatch,
    EmptyBase,
    InsufficientData,
    ZeroVector,
)
from .rng import derive_seed

__all__ = [
    "SearchResult",
    "PQCodebook",
    "IVFPQIndex",
    "l2_normalize",
    "cosine_similarity",
    "knn_exact",
    "train_pq",
    "pq_encode",
    "pq_decode",
    "train_coarse",
    "build_ivfpq",
    "search_ivfpq",
    "search_ivfpq_many",
]

_BLOCK_ELEMS = 1 << 22


@dataclass(frozen=True)
class SearchResult:
    ids: np.ndarray
    scores: np.ndarray

    @property
    def neighbors(self) -> list[tuple[int, float]]:
        return list(zip(self.ids.tolist(), self.scores.tolist()))

    def __len__(self) -> int:
        return len(self.ids)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape[0]} vs {b.shape[0]}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12:
        raise ZeroVector("a")
    if nb < 1e-12:
        raise ZeroVector("b")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def topk_rows(scores: np.ndarray, ids: np.ndarray, k: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-row top-k of a score matrix with ties going to the smaller id.

    Entries equal to ``-inf`` are never returned.
    """
    n = scores.shape[1]
    k = min(k, n)
    out = []
    if k == 0:
        empty = (np.empty(0, np.int64), np.empty(0, np.float64))
        return [empty for _ in range(len(scores))]
    if k < n:
        kth = -np.partition(-scores, k - 1, axis=1)[:, k - 1]
    for r in range(len(scores)):
        row = scores[r]
        if k < n:
            cols = np.flatnonzero(row >= kth[r])
        else:
            cols = np.arange(n)
        cols = cols[np.isfinite(row[cols])]
        order = np.lexsort((ids[cols], -row[cols]))[:k]
        sel = cols[order]
        out.append((ids[sel], row[sel]))
    return out


def _require_normalized(es: EmbeddingSet, what: str):
    if not es.normalized:
        raise ValueError(f"{what} must be normalized")


def knn_exact(base: EmbeddingSet, queries: EmbeddingSet, k: int, *, exclude_self: bool = False) -> list[SearchResult]:
    """Brute-force cosine k-NN.

    With ``exclude_self`` a query never returns its own id (used when base and
    queries are the same set).
    """
    _require_normalized(base, "base")
    _require_normalized(queries, "queries")
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(base) == 0:
        raise EmptyBase("base set is empty")
    if base.dim != queries.dim:
        raise DimensionMismatch(f"base D={base.dim}, queries D={queries.dim}")
    b = base.data.astype(np.float64)
    q = queries.data.astype(np.float64)
    results: list[SearchResult] = []
    step = max(1, _BLOCK_ELEMS // len(b))
    if exclude_self:
        pos = {int(i): p for p, i in enumerate(base.ids)}
    for lo in range(0, len(q), step):
        s = q[lo:lo + step] @ b.T
        if exclude_self:
            for r, qid in enumerate(queries.ids[lo:lo + step]):
                p = pos.get(int(qid))
                if p is not None:
                    s[r, p] = -np.inf
        for ids, sc in topk_rows(s, base.ids, k):
            results.append(SearchResult(ids, sc))
    return results


@dataclass(frozen=True)
class PQCodebook:
    m: int
    ks: int
    centroids: np.ndarray  # m x ks x sub_dim

    def __post_init__(self):
        if self.centroids.shape[:2] != (self.m, self.ks):
            raise ValueError("centroid array does not match (m, ks)")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("non-finite PQ centroid")

    @property
    def sub_dim(self) -> int:
        return self.centroids.shape[2]

    @property
    def dim(self) -> int:
        return self.m * self.sub_dim

    @property
    def code_dtype(self):
        return np.uint8 if self.ks <= 256 else np.uint16


def _check_subspaces(d: int, m: int):
    if m < 1 or d % m:
        raise BadSubspaceCount(f"D={d} is not divisible by m={m}")


def train_pq(es, m: int, ks: int, seed: int = 0, *, max_iters: int = 50) -> PQCodebook:
    """Fit one Euclidean k-means codebook per column slice."""
    x = es.data if isinstance(es, EmbeddingSet) else np.asarray(es)
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    _check_subspaces(d, m)
    if ks < 1:
        raise ValueError("ks must be >= 1")
    if n < ks:
        raise InsufficientData(f"need at least ks={ks} vectors, got {n}")
    sub = d // m
    cents = np.empty((m, ks, sub))
    for s in range(m):
        cfg = KMeansConfig(ks, max_iters=max_iters, tol=0.0, seed=derive_seed(seed, f"pq/{s}"), spherical=False)
        cents[s] = lloyd(x[:, s * sub:(s + 1) * sub], cfg)[0]
    return PQCodebook(m, ks, cents)


def pq_encode(codebook: PQCodebook, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != codebook.dim:
        raise DimensionMismatch(f"codebook D={codebook.dim}, vectors D={x.shape[1]}")
    sub = codebook.sub_dim
    codes = np.empty((len(x), codebook.m), dtype=codebook.code_dtype)
    for s in range(codebook.m):
        codes[:, s] = nearest_centroid(x[:, s * sub:(s + 1) * sub], codebook.centroids[s])[0]
    return codes


def pq_decode(codebook: PQCodebook, codes) -> np.ndarray:
    codes = np.atleast_2d(codes)
    parts = [codebook.centroids[s][codes[:, s].astype(np.int64)] for s in range(codebook.m)]
    return np.concatenate(parts, axis=1)


@dataclass(frozen=True)
class IVFPQIndex:
    coarse_centroids: np.ndarray  # nlist x D
    list_ids: tuple  # nlist arrays of int64 ids, ascending
    list_codes: tuple  # nlist arrays, len x m
    codebook: PQCodebook

    @property
    def nlist(self) -> int:
        return len(self.coarse_centroids)

    @property
    def dim(self) -> int:
        return self.coarse_centroids.shape[1]

    @property
    def ntotal(self) -> int:
        return sum(len(ids) for ids in self.list_ids)

    @property
    def lists(self) -> list[list[tuple[int, bytes]]]:
        return [
            [(int(i), c.tobytes()) for i, c in zip(ids, codes)]
            for ids, codes in zip(self.list_ids, self.list_codes)
        ]


def train_coarse(es: EmbeddingSet, nlist: int, seed: int = 0, *, max_iters: int = 50) -> np.ndarray:
    """Coarse quantizer centroids (Euclidean k-means on the vectors)."""
    if nlist < 1:
        raise ValueError("nlist must be >= 1")
    if len(es) < nlist:
        raise InsufficientData(f"nlist={nlist} exceeds N={len(es)}")
    cfg = KMeansConfig(nlist, max_iters=max_iters, seed=derive_seed(seed, "ivf/coarse"), spherical=False)
    return lloyd(es.data, cfg)[0]


def ivf_residuals(es: EmbeddingSet, coarse: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Coarse list of every row and its residual, both needed to train a codebook."""
    x = es.data.astype(np.float64)
    lists = nearest_centroid(x, coarse)[0]
    return lists, x - coarse[lists]


def build_ivfpq(
    es: EmbeddingSet,
    nlist: int,
    codebook: PQCodebook | None = None,
    seed: int = 0,
    *,
    coarse: np.ndarray | None = None,
    m: int = 8,
    ks: int = 256,
) -> IVFPQIndex:
    """Build an inverted-file index with PQ-coded residuals.

    Without a ``codebook`` one is trained on the residuals with ``m``/``ks``.
    Coarse centroids are deterministic in ``seed``, so ``train_coarse`` +
    ``ivf_residuals`` + ``train_pq`` reproduce the residuals this builder
    encodes.
    """
    _require_normalized(es, "indexed set")
    if coarse is None:
        coarse = train_coarse(es, nlist, seed)
    elif len(coarse) != nlist:
        raise ValueError("coarse centroid count differs from nlist")
    lists, resid = ivf_residuals(es, coarse)
    if codebook is None:
        codebook = train_pq(resid, m, ks, derive_seed(seed, "ivf/pq"))
    elif codebook.dim != es.dim:
        raise DimensionMismatch(f"codebook D={codebook.dim}, data D={es.dim}")
    codes = pq_encode(codebook, resid)
    list_ids, list_codes = [], []
    for li in range(nlist):
        rows = np.flatnonzero(lists == li)
        rows = rows[np.argsort(es.ids[rows], kind="stable")]
        list_ids.append(es.ids[rows].copy())
        list_codes.append(codes[rows].copy())
    return IVFPQIndex(np.asarray(coarse, dtype=np.float64), tuple(list_ids), tuple(list_codes), codebook)


def _probe_lists(index: IVFPQIndex, q: np.ndarray, nprobe: int) -> np.ndarray:
    d = ((index.coarse_centroids - q) ** 2).sum(1)
    return np.lexsort((np.arange(index.nlist), d))[:nprobe]


def search_ivfpq(index: IVFPQIndex, query, k: int, nprobe: int) -> SearchResult:
    """Scan the ``nprobe`` nearest lists and rank by ADC-estimated similarity."""
    if not 1 <= nprobe <= index.nlist:
        raise BadNprobe(f"nprobe={nprobe} outside [1, {index.nlist}]")
    q = np.asarray(query, dtype=np.float64).ravel()
    if q.shape[0] != index.dim:
        raise DimensionMismatch(f"index D={index.dim}, query D={q.shape[0]}")
    cb = index.codebook
    sub = cb.sub_dim
    all_ids, all_scores = [], []
    for li in _probe_lists(index, q, nprobe):
        ids = index.list_ids[li]
        if not len(ids):
            continue
        qr = q - index.coarse_centroids[li]
        # lookup table: squared distance from each residual slice to each centroid
        lut = np.stack([((cb.centroids[s] - qr[s * sub:(s + 1) * sub]) ** 2).sum(1) for s in range(cb.m)])
        codes = index.list_codes[li].astype(np.int64)
        dist = lut[np.arange(cb.m)[None, :], codes].sum(1)
        all_ids.append(ids)
        all_scores.append(1.0 - dist / 2.0)
    if not all_ids:
        return SearchResult(np.empty(0, np.int64), np.empty(0))
    ids = np.concatenate(all_ids)
    scores = np.concatenate(all_scores)
    sel_ids, sel_scores = topk_rows(scores[None, :], ids, k)[0]
    return SearchResult(sel_ids, sel_scores)


def search_ivfpq_many(index: IVFPQIndex, queries: EmbeddingSet, k: int, nprobe: int) -> list[SearchResult]:
    return [search_ivfpq(index, q, k, nprobe) for q in queries.data]

"""Near-duplicate removal over a thresholded k-NN graph.

Self-deduplication keeps the smallest id of every connected component.
Relative deduplication builds the graph over the union of the pool and a
reference (benchmark) set and drops every pool item whose component touches a
reference item.

The threshold is rounded to float32 (the storage precision) before the strict
``>`` test, so a pair stored exactly at the threshold is never an edge.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Literal

import numpy as np

from .embeddings import EmbeddingSet
from .errors import DimensionMismatch, EmptySet, UnknownId
from .vecindex import build_ivfpq, knn_exact, search_ivfpq

log = logging.getLogger(__name__)

SELF_THRESHOLD = 0.6
RELATIVE_THRESHOLD = 0.45
DEFAULT_K = 64


@dataclass(frozen=True)
class DedupConfig:
    k: int = DEFAULT_K
    threshold: float = SELF_THRESHOLD

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not np.isfinite(self.threshold):
            raise ValueError("threshold must be finite")


@dataclass(frozen=True)
class IVFParams:
    nlist: int = 64
    nprobe: int = 16
    m: int = 8
    ks: int = 256
    seed: int = 0


class DisjointSet:
    """Union-find with path compression and union by size.

    Union keeps the smaller id as the root when sizes tie, which makes the
    roots deterministic for a given edge order.
    """

    def __init__(self, ids: Iterable[int] = ()):
        self.parent: dict[int, int] = {}
        self.size: dict[int, int] = {}
        for i in ids:
            self.add(i)

    def add(self, x: int) -> None:
        if x not in self.parent:
            self.parent[x] = x
            self.size[x] = 1

    def __contains__(self, x) -> bool:
        return x in self.parent

    def find(self, x: int) -> int:
        if x not in self.parent:
            raise UnknownId(x)
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> int:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        if self.size[ra] < self.size[rb] or (self.size[ra] == self.size[rb] and rb < ra):
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        return ra

    def components(self) -> list[list[int]]:
        """Components as sorted member lists, ordered by smallest member."""
        groups: dict[int, list[int]] = {}
        for x in self.parent:
            groups.setdefault(self.find(x), []).append(x)
        return sorted((sorted(g) for g in groups.values()), key=lambda g: g[0])


@dataclass
class DedupReport:
    kept: list[int]
    removed: list[int]
    components: list[tuple[int, list[int]]] = field(default_factory=list)
    edge_count: int = 0

    def to_json(self) -> dict:
        multi = [c for c in self.components if len(c[1]) > 1]
        return {
            "input_count": len(self.kept) + len(self.removed),
            "kept_count": len(self.kept),
            "removed_count": len(self.removed),
            "edge_count": self.edge_count,
            "component_count": len(self.components),
            "kept": self.kept,
            "removed": self.removed,
            "duplicate_components": [
                {"representative": rep, "size": len(members), "members": members} for rep, members in multi
            ],
        }


def _threshold32(t: float) -> float:
    return float(np.float32(t))


def build_similarity_graph(
    es: EmbeddingSet,
    config: DedupConfig,
    index_mode: Literal["exact", "ivfpq"] = "exact",
    ivf: IVFParams | None = None,
) -> list[tuple[int, int]]:
    """Undirected edges (i < j) between k-NN pairs with similarity > threshold.

    A pair is an edge if either endpoint lists the other among its k nearest
    neighbors. Self-matches are excluded.
    """
    if len(es) < 2:
        raise EmptySet(f"need at least 2 embeddings, got {len(es)}")
    if not es.normalized:
        raise ValueError("set must be normalized")
    k = min(config.k, len(es) - 1)
    thr = _threshold32(config.threshold)
    edges: set[tuple[int, int]] = set()
    if index_mode == "exact":
        results = knn_exact(es, es, k, exclude_self=True)
        for qid, res in zip(es.ids.tolist(), results):
            for nid, score in zip(res.ids.tolist(), res.scores.tolist()):
                if score > thr:
                    edges.add((min(qid, nid), max(qid, nid)))
    elif index_mode == "ivfpq":
        ivf = ivf or IVFParams()
        nlist = min(ivf.nlist, len(es))
        index = build_ivfpq(es, nlist, seed=ivf.seed, m=ivf.m, ks=min(ivf.ks, len(es)))
        pos = {int(i): p for p, i in enumerate(es.ids)}
        x = es.data.astype(np.float64)
        for qid, q in zip(es.ids.tolist(), x):
            res = search_ivfpq(index, q, k + 1, min(ivf.nprobe, nlist))
            cand = [n for n in res.ids.tolist() if n != qid][:k]
            # candidates come from estimated scores; the threshold uses exact ones
            for nid in cand:
                if float(q @ x[pos[nid]]) > thr:
                    edges.add((min(qid, nid), max(qid, nid)))
    else:
        raise ValueError(f"unknown index mode {index_mode!r}")
    return sorted(edges)


def connected_components(edges: Iterable[tuple[int, int]], ids: Iterable[int]) -> DisjointSet:
    ds = DisjointSet(int(i) for i in ids)
    for a, b in edges:
        if a not in ds:
            raise UnknownId(a)
        if b not in ds:
            raise UnknownId(b)
        ds.union(a, b)
    return ds


def self_dedup(es: EmbeddingSet, config: DedupConfig = DedupConfig(), index_mode="exact", ivf=None) -> DedupReport:
    if len(es) < 2:
        ids = es.ids.tolist()
        return DedupReport(ids, [], [(i, [i]) for i in ids], 0)
    edges = build_similarity_graph(es, config, index_mode, ivf)
    ds = connected_components(edges, es.ids.tolist())
    comps = [(members[0], members) for members in ds.components()]
    kept = sorted(rep for rep, _ in comps)
    removed = sorted(m for _, members in comps for m in members[1:])
    log.info("self-dedup: %d -> %d (%d edges)", len(es), len(kept), len(edges))
    return DedupReport(kept, removed, comps, len(edges))


def relative_dedup(
    source: EmbeddingSet,
    reference: EmbeddingSet,
    config: DedupConfig = DedupConfig(threshold=RELATIVE_THRESHOLD),
    index_mode="exact",
    ivf=None,
) -> DedupReport:
    """Drop source items whose duplicate component contains a reference item."""
    if source.dim != reference.dim:
        raise DimensionMismatch(f"source D={source.dim}, reference D={reference.dim}")
    if len(reference) == 0 or len(source) == 0:
        ids = source.ids.tolist()
        return DedupReport(sorted(ids), [], [(i, [i]) for i in sorted(ids)], 0)
    ns = len(source)
    # internal tags: source rows 0..ns-1, reference rows ns..
    union = EmbeddingSet(
        np.arange(ns + len(reference)),
        np.concatenate([source.data, reference.data]),
        normalized=source.normalized and reference.normalized,
    )
    edges = build_similarity_graph(union, config, index_mode, ivf)
    ds = connected_components(edges, range(len(union)))
    tainted = {ds.find(r) for r in range(ns, len(union))}
    src_ids = source.ids
    kept, removed, comps = [], [], []
    for members in ds.components():
        src = [int(src_ids[m]) for m in members if m < ns]
        if not src:
            continue
        src.sort()
        if ds.find(members[0]) in tainted:
            removed.extend(src)
        else:
            kept.extend(src)
        comps.append((src[0], src))
    log.info("relative-dedup: %d -> %d", ns, len(kept))
    return DedupReport(sorted(kept), sorted(removed), comps, len(edges))

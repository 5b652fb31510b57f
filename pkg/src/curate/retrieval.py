"""Curated-dataset assembly by retrieval from the deduplicated pool.

Each source is included as is, by sample-based retrieval (``n`` nearest pool
neighbors per query image), or by cluster-based retrieval (sample pool members
of every k-means cluster that receives more than ``min_hits`` queries, capped
overall).
"""

from __future__ import annotations

import io
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Union

import numpy as np

from .cluster import KMeansModel, kmeans_assign
from .embeddings import EmbeddingSet
from .errors import EmptyPool, FormatError, MissingSource, ModelPoolMismatch
from .rng import derive_seed, sample_without_replacement
from .vecindex import IVFPQIndex, knn_exact, search_ivfpq_many

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AsIs:
    name = "asis"


@dataclass(frozen=True)
class Sample:
    n: int = 4
    name = "sample"

    def __post_init__(self):
        if self.n < 0:
            raise ValueError("n must be >= 0")


@dataclass(frozen=True)
class Cluster:
    per_cluster: int = 10_000
    min_hits: int = 3
    cap: int = 1_000_000
    name = "cluster"

    def __post_init__(self):
        if min(self.per_cluster, self.min_hits, self.cap) < 0:
            raise ValueError("cluster retrieval parameters must be >= 0")


Mode = Union[AsIs, Sample, Cluster]


@dataclass(frozen=True)
class SourceSpec:
    name: str
    mode: Mode
    seed: int = 0
    emb_path: str | None = None


@dataclass(frozen=True)
class CollisionReport:
    queries: int
    hits: int  # total (query, neighbor) pairs
    unique: int
    collided: int  # pool ids retrieved by more than one query

    def to_json(self) -> dict:
        return {"queries": self.queries, "hits": self.hits, "unique": self.unique, "collided": self.collided}


@dataclass
class Pool:
    """Deduplicated pool plus the structures retrieval needs."""

    embeddings: EmbeddingSet
    index: IVFPQIndex | None = None
    nprobe: int = 16
    kmeans: KMeansModel | None = None


def retrieve_sample_based(queries: EmbeddingSet, pool_index, n: int, *, nprobe: int = 16):
    """Union of every query's ``n`` nearest pool ids, sorted, plus collision counts.

    ``pool_index`` is an :class:`EmbeddingSet` (exact search) or an
    :class:`IVFPQIndex`.
    """
    size = len(pool_index) if isinstance(pool_index, EmbeddingSet) else pool_index.ntotal
    if size == 0:
        raise EmptyPool("pool is empty")
    if n == 0 or len(queries) == 0:
        return np.empty(0, np.int64), CollisionReport(len(queries), 0, 0, 0)
    if isinstance(pool_index, EmbeddingSet):
        results = knn_exact(pool_index, queries, n)
    else:
        results = search_ivfpq_many(pool_index, queries, n, min(nprobe, pool_index.nlist))
    counts = Counter(i for r in results for i in r.ids.tolist())
    ids = np.asarray(sorted(counts), dtype=np.int64)
    report = CollisionReport(
        queries=len(queries),
        hits=sum(counts.values()),
        unique=len(ids),
        collided=sum(1 for c in counts.values() if c > 1),
    )
    return ids, report


@dataclass(frozen=True)
class ClusterRetrieval:
    ids: np.ndarray
    hits: dict[int, int]  # cluster -> query hits
    selected: list[int]
    available: int  # ids sampled before the cap


def _assignment_arrays(pool_assignments) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(pool_assignments, KMeansModel):
        return pool_assignments.ids, pool_assignments.assignments
    if isinstance(pool_assignments, Mapping):
        ids = np.fromiter(pool_assignments.keys(), dtype=np.int64, count=len(pool_assignments))
        labels = np.fromiter(pool_assignments.values(), dtype=np.int64, count=len(pool_assignments))
        return ids, labels
    ids, labels = pool_assignments
    return np.asarray(ids, dtype=np.int64), np.asarray(labels, dtype=np.int64)


def retrieve_cluster_based(
    queries,
    model: KMeansModel,
    pool_assignments,
    per_cluster: int,
    min_hits: int,
    cap: int,
    seed: int,
) -> ClusterRetrieval:
    """Sample from clusters hit by strictly more than ``min_hits`` queries.

    Each selected cluster contributes ``min(per_cluster, size)`` members drawn
    without replacement; if the total exceeds ``cap`` (when ``cap > 0``) a
    uniform subsample of exactly ``cap`` ids is kept.
    """
    ids, labels = _assignment_arrays(pool_assignments)
    qdata = queries.data if isinstance(queries, EmbeddingSet) else np.atleast_2d(queries)
    if qdata.shape[1] != model.dim:
        raise ModelPoolMismatch(f"model D={model.dim}, queries D={qdata.shape[1]}")
    if len(labels) and (labels.min() < 0 or labels.max() >= model.k):
        raise ModelPoolMismatch("pool assignment refers to a cluster the model does not have")
    q_labels = kmeans_assign(model, qdata) if len(qdata) else np.empty(0, np.int64)
    hits = Counter(q_labels.tolist())
    selected = sorted(c for c, h in hits.items() if h > min_hits)
    picked = []
    for c in selected:
        members = np.sort(ids[labels == c])
        take = min(per_cluster, len(members))
        picked.append(sample_without_replacement(members, take, derive_seed(seed, f"cluster/{c}")))
    out = np.concatenate(picked) if picked else np.empty(0, np.int64)
    available = len(out)
    if cap > 0 and len(out) > cap:
        out = sample_without_replacement(np.sort(out), cap, derive_seed(seed, "cap"))
    return ClusterRetrieval(np.sort(out), dict(sorted(hits.items())), selected, available)


@dataclass
class CurationManifest:
    records: list[tuple[str, str, int]] = field(default_factory=list)
    summary: dict[str, dict] = field(default_factory=dict)

    def counts(self) -> dict[str, int]:
        tally = Counter(src for src, _, _ in self.records)
        return {name: tally.get(name, 0) for name in self.summary}

    def to_tsv(self) -> str:
        buf = io.StringIO()
        for src, mode, i in self.records:
            buf.write(f"{src}\t{mode}\t{i}\n")
        return buf.getvalue()

    def summary_json(self) -> str:
        return json.dumps({"sources": self.summary, "total": len(self.records)}, indent=2, sort_keys=True) + "\n"

    def write(self, path) -> None:
        path = Path(path)
        path.write_text(self.to_tsv())
        path.with_suffix(path.suffix + ".json").write_text(self.summary_json())


def assemble_dataset(
    specs: list[SourceSpec],
    pool: Pool,
    queries: Mapping[str, EmbeddingSet],
    *,
    global_dedup: bool = False,
) -> CurationManifest:
    """Run every source's retrieval in spec order and collect the manifest.

    ``queries[name]`` holds the source's own images; as-is sources contribute
    their ids directly. With ``global_dedup`` a pool id retrieved by an
    earlier source is dropped from later ones.
    """
    manifest = CurationManifest()
    seen: set[int] = set()
    for spec in specs:
        if spec.name not in queries:
            raise MissingSource(spec.name)
        q = queries[spec.name]
        mode = spec.mode
        entry: dict = {"mode": mode.name, "queries": len(q)}
        if isinstance(mode, AsIs):
            ids = np.sort(q.ids)
            entry["retrieved"] = None
        elif isinstance(mode, Sample):
            index = pool.index if pool.index is not None else pool.embeddings
            ids, coll = retrieve_sample_based(q, index, mode.n, nprobe=pool.nprobe)
            entry["retrieved"] = coll.hits
            entry["collisions"] = coll.collided
        elif isinstance(mode, Cluster):
            if pool.kmeans is None:
                raise ModelPoolMismatch(f"source {spec.name!r} needs a k-means model of the pool")
            res = retrieve_cluster_based(
                q, pool.kmeans, pool.kmeans, mode.per_cluster, mode.min_hits, mode.cap, spec.seed
            )
            ids = res.ids
            entry["retrieved"] = res.available
            entry["selected_clusters"] = len(res.selected)
        else:
            raise TypeError(f"unknown mode {mode!r}")
        if global_dedup and not isinstance(mode, AsIs):
            ids = np.asarray([i for i in ids.tolist() if i not in seen], dtype=np.int64)
            seen.update(ids.tolist())
        entry["final"] = len(ids)
        manifest.summary[spec.name] = entry
        manifest.records.extend((spec.name, mode.name, int(i)) for i in ids.tolist())
        log.info("source %s (%s): %d records", spec.name, mode.name, len(ids))
    return manifest


def _parse_params(mode: str, params: str) -> Mode:
    kv = {}
    if params.strip() not in ("", "-"):
        for part in params.split(","):
            key, sep, value = part.partition("=")
            if not sep:
                raise FormatError(f"bad parameter {part!r}")
            kv[key.strip()] = int(value)
    try:
        if mode == "asis":
            return AsIs()
        if mode == "sample":
            return Sample(**kv)
        if mode == "cluster":
            return Cluster(**kv)
    except TypeError as exc:
        raise FormatError(f"bad parameters for mode {mode}: {params!r}") from exc
    raise FormatError(f"unknown mode {mode!r}")


def parse_source_specs(text: str, base_dir=None) -> list[SourceSpec]:
    """Parse ``name<TAB>mode<TAB>params<TAB>emb-path<TAB>seed`` lines.

    Blank lines and ``#`` comments are skipped; relative paths resolve
    against ``base_dir``.
    """
    specs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        cols = line.rstrip("\n").split("\t")
        if len(cols) != 5:
            raise FormatError(f"line {lineno}: expected 5 tab-separated fields, got {len(cols)}")
        name, mode, params, path, seed = (c.strip() for c in cols)
        if base_dir is not None and not Path(path).is_absolute():
            path = str(Path(base_dir) / path)
        specs.append(SourceSpec(name, _parse_params(mode, params), int(seed), path))
    return specs


def format_source_specs(specs: list[SourceSpec]) -> str:
    lines = []
    for s in specs:
        m = s.mode
        if isinstance(m, Sample):
            params = f"n={m.n}"
        elif isinstance(m, Cluster):
            params = f"per_cluster={m.per_cluster},min_hits={m.min_hits},cap={m.cap}"
        else:
            params = "-"
        lines.append(f"{s.name}\t{m.name}\t{params}\t{s.emb_path}\t{s.seed}")
    return "\n".join(lines) + "\n"

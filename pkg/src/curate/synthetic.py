"""Synthetic embedding fixtures with recorded ground truth.

The pipeline fixture plants structure whose effect on every stage is known in
advance:

* duplicate groups (copies at cosine ``dup_cos`` to a base vector), each of
  which self-dedup collapses to one survivor;
* pool items at cosine ``bench_cos`` to a reference (benchmark) image, which
  relative dedup removes;
* sample-source queries, each with ``sample_n`` pool items planted at cosine
  ``sample_cos`` and therefore its exact nearest neighbors;
* two tight blobs, each hit by ``cluster_hits`` cluster-source queries, so
  cluster retrieval selects them and the cap binds.

Background vectors are uniform on the sphere; in D=256 their pairwise cosine
has standard deviation 1/16, far below every planted threshold. The
generator verifies those margins by brute force and raises if a draw
violates them.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .embeddings import EmbeddingSet, write_emb
from .retrieval import Cluster, Sample, SourceSpec, format_source_specs
from .rng import derive_seed, generator


@dataclass(frozen=True)
class SyntheticSpec:
    pool_size: int = 5000
    dim: int = 256
    dup_groups: tuple[int, ...] = (4, 3, 2)
    dup_cos: float = 0.9
    n_reference: int = 20
    n_bench_near: int = 2
    bench_cos: float = 0.8
    sample_queries: int = 10
    sample_n: int = 4
    sample_cos: float = 0.55
    n_blobs: int = 2
    blob_size: int = 150
    blob_sigma: float = 0.1
    cluster_hits: int = 5
    cluster_query_cos: float = 0.9
    cluster_cap: int = 20
    kmeans_k: int = 16


@dataclass(frozen=True)
class BlobSpec:
    n_blobs: int = 2
    blob_size: int = 100
    sigma: float = 0.01
    dim: int = 16


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _near(rng, v: np.ndarray, cos: float) -> np.ndarray:
    """Unit vector at exactly ``cos`` to unit vector ``v`` (random direction)."""
    u = rng.standard_normal(v.shape)
    u -= (u @ v) * v
    u = _unit(u)
    return cos * v + math.sqrt(1.0 - cos * cos) * u


def _blob(rng, center: np.ndarray, size: int, sigma: float) -> np.ndarray:
    return _unit(center + sigma * rng.standard_normal((size, len(center))))


def make_blobs(spec: BlobSpec, seed: int) -> tuple[EmbeddingSet, np.ndarray]:
    rng = generator(derive_seed(seed, "blobs"))
    centers = _unit(rng.standard_normal((spec.n_blobs, spec.dim)))
    data = np.concatenate([_blob(rng, c, spec.blob_size, spec.sigma) for c in centers])
    labels = np.repeat(np.arange(spec.n_blobs), spec.blob_size)
    perm = rng.permutation(len(data))
    return EmbeddingSet.from_array(data[perm], normalized=True), labels[perm]


@dataclass
class Fixture:
    pool: EmbeddingSet
    reference: EmbeddingSet
    queries: dict[str, EmbeddingSet]
    specs: list[SourceSpec]
    labels: np.ndarray  # pool blob membership, -1 outside blobs
    truth: dict = field(default_factory=dict)


def make_pipeline_fixture(spec: SyntheticSpec = SyntheticSpec(), seed: int = 0) -> Fixture:
    rng = generator(derive_seed(seed, "fixture"))
    d = spec.dim
    rows: list[np.ndarray] = []
    kind: list[tuple[str, int]] = []  # (role, group) per pool row

    def add(vecs, role, group=-1):
        for v in np.atleast_2d(vecs):
            rows.append(v)
            kind.append((role, group))

    for g, size in enumerate(spec.dup_groups):
        base = _unit(rng.standard_normal(d))
        add(base, "dup", g)
        for _ in range(size - 1):
            add(_near(rng, base, spec.dup_cos), "dup", g)

    reference = _unit(rng.standard_normal((spec.n_reference, d)))
    for j in range(spec.n_bench_near):
        add(_near(rng, reference[j], spec.bench_cos), "bench", j)

    sample_q = _unit(rng.standard_normal((spec.sample_queries, d)))
    for qi, q in enumerate(sample_q):
        for _ in range(spec.sample_n):
            add(_near(rng, q, spec.sample_cos), "sample", qi)

    centers = _unit(rng.standard_normal((spec.n_blobs, d)))
    for b, c in enumerate(centers):
        add(_blob(rng, c, spec.blob_size, spec.blob_sigma), "blob", b)
    cluster_q = np.stack([_near(rng, c, spec.cluster_query_cos) for c in centers for _ in range(spec.cluster_hits)])

    n_background = spec.pool_size - len(rows)
    if n_background < 0:
        raise ValueError("planted structure exceeds the pool size")
    add(_unit(rng.standard_normal((n_background, d))), "background")

    perm = rng.permutation(len(rows))
    data = np.stack(rows)[perm].astype(np.float32)
    kind = [kind[p] for p in perm]
    pool = EmbeddingSet.from_array(data, normalized=True)

    groups = [sorted(i for i, (r, g) in enumerate(kind) if r == "dup" and g == gi) for gi in range(len(spec.dup_groups))]
    bench = sorted(i for i, (r, _) in enumerate(kind) if r == "bench")
    labels = np.array([g if r == "blob" else -1 for r, g in kind], dtype=np.int64)

    _verify_margins(pool, kind, reference, sample_q, spec)

    queries = {
        "lab_sample": EmbeddingSet.from_array(sample_q, normalized=True),
        "lab_cluster": EmbeddingSet.from_array(cluster_q, normalized=True),
    }
    specs = [
        SourceSpec("lab_sample", Sample(spec.sample_n), seed=derive_seed(seed, "lab_sample") & 0xFFFFFFFF,
                   emb_path="lab_sample.emb"),
        SourceSpec("lab_cluster", Cluster(per_cluster=1000, min_hits=3, cap=spec.cluster_cap),
                   seed=derive_seed(seed, "lab_cluster") & 0xFFFFFFFF, emb_path="lab_cluster.emb"),
    ]
    after_self = spec.pool_size - sum(s - 1 for s in spec.dup_groups)
    after_rel = after_self - spec.n_bench_near
    sample_records = spec.sample_queries * spec.sample_n
    truth = {
        "seed": seed,
        "spec": asdict(spec),
        "duplicate_groups": groups,
        "duplicate_survivors": [g[0] for g in groups],
        "benchmark_near": bench,
        "expected_counts": {
            "normalize": spec.pool_size,
            "self_dedup": after_self,
            "relative_dedup": after_rel,
            "cluster": after_rel,
            "retrieve": sample_records + spec.cluster_cap,
            "manifest": sample_records + spec.cluster_cap,
            "sources": {"lab_sample": sample_records, "lab_cluster": spec.cluster_cap},
        },
        "expected_sample_collisions": 0,
    }
    return Fixture(pool, EmbeddingSet.from_array(reference, normalized=True), queries, specs, labels, truth)


def _verify_margins(pool: EmbeddingSet, kind, reference, sample_q, spec: SyntheticSpec) -> None:
    x = pool.data
    roles = np.array([r for r, _ in kind])
    groups = np.array([g for _, g in kind])
    dup = roles == "dup"
    # self-dedup: only planted duplicate pairs may exceed the self threshold
    sims = x @ x.T
    np.fill_diagonal(sims, -1.0)  # float32 is ample for these margins
    same_group = dup[:, None] & dup[None, :] & (groups[:, None] == groups[None, :])
    worst = sims[~same_group].max()
    if worst >= 0.58:
        raise RuntimeError(f"fixture draw has an accidental near-duplicate (cos {worst:.3f}); change the seed")
    # relative dedup: nothing but the planted items may approach a reference,
    # and the planted items must have no other neighbor above the threshold
    ref = reference @ x.T
    bench = np.flatnonzero(roles == "bench")
    allowed = np.zeros_like(ref, dtype=bool)
    for i in bench:
        allowed[groups[i], i] = True
    if ref[~allowed].max() >= 0.4 or sims[bench].max() >= 0.4:
        raise RuntimeError("fixture draw puts a pool item near a benchmark image; change the seed")
    # sample retrieval: the planted neighbors beat every other pool item
    qs = sample_q @ x.T
    for qi in range(len(sample_q)):
        planted = (roles == "sample") & (groups == qi)
        if qs[qi, planted].min() <= qs[qi, ~planted].max() + 0.05:
            raise RuntimeError("fixture draw breaks a planted nearest-neighbor margin; change the seed")


def write_fixture(fx: Fixture, out_dir) -> dict[str, str]:
    """Write pool/reference/query EMB1 files, labels, source specs, config and ground truth."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_emb(out / "pool.emb", fx.pool)
    write_emb(out / "reference.emb", fx.reference)
    for name, q in fx.queries.items():
        write_emb(out / f"{name}.emb", q)
    (out / "labels.txt").write_text("".join(f"{v}\n" for v in fx.labels.tolist()))
    (out / "sources.tsv").write_text(format_source_specs(fx.specs))
    (out / "ground_truth.json").write_text(json.dumps(fx.truth, indent=2, sort_keys=True) + "\n")
    k = fx.truth.get("spec", {}).get("kmeans_k", 16)
    (out / "pipeline.cfg").write_text(
        "[pipeline]\n"
        "pool = pool.emb\n"
        "references = reference.emb\n"
        "sources = sources.tsv\n"
        f"seed = {fx.truth.get('seed', 0)}\n"
        "output = out\n"
        "threads = 1\n"
        "\n[dedup]\nk = 64\nself_threshold = 0.6\nrelative_threshold = 0.45\n"
        f"\n[kmeans]\nk = {k}\nmax_iters = 50\ntol = 1e-4\nspherical = true\n"
    )
    return {"dir": str(out)}


def write_blobs(es: EmbeddingSet, labels: np.ndarray, spec: BlobSpec, seed: int, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_emb(out / "blobs.emb", es)
    (out / "labels.txt").write_text("".join(f"{v}\n" for v in labels.tolist()))
    truth = {
        "seed": seed,
        "spec": asdict(spec),
        "duplicate_groups": [],
        "blobs": [np.flatnonzero(labels == b).tolist() for b in range(spec.n_blobs)],
    }
    (out / "ground_truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n")

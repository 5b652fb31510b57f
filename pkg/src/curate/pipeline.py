"""End-to-end curation: normalize, self-dedup, relative-dedup, cluster,
retrieve, write the manifest.

Each stage writes ``reports/<stage>.json``. Files are written under a
``.partial`` name and renamed once complete, so an aborted run leaves only
``.partial`` files for the failing stage.
"""

from __future__ import annotations

import configparser
import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .cluster import KMeansConfig, kmeans_fit
from .dedup import DedupConfig, IVFParams, relative_dedup, self_dedup
from .embeddings import EmbeddingSet, l2_normalize, read_emb
from .errors import CurateError, PipelineError
from .retrieval import CurationManifest, Pool, SourceSpec, assemble_dataset, parse_source_specs
from .rng import derive_seed

log = logging.getLogger(__name__)

STAGES = ("normalize", "self_dedup", "relative_dedup", "cluster", "retrieve", "manifest")
THREADS_ENV = "CURATE_THREADS"


def resolve_threads(flag: int | None = None) -> int:
    if flag:
        return int(flag)
    env = os.environ.get(THREADS_ENV)
    if env:
        return int(env)
    return os.cpu_count() or 1


@dataclass
class PipelineConfig:
    pool: Path
    references: list[Path]
    sources: list[SourceSpec]
    output: Path
    seed: int = 0
    threads: int | None = None
    dedup_k: int = 64
    self_threshold: float = 0.6
    relative_threshold: float = 0.45
    index_mode: str = "exact"
    kmeans: KMeansConfig = field(default_factory=lambda: KMeansConfig(k=16))
    global_dedup: bool = False

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.threads is not None and self.threads < 1:
            raise ValueError("thread count must be >= 1")


def load_config(path) -> PipelineConfig:
    """Read an INI-style ``key = value`` config; paths resolve against its directory."""
    path = Path(path)
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)
    base = path.parent
    p = cp["pipeline"]

    def resolve(value: str) -> Path:
        v = Path(value.strip())
        return v if v.is_absolute() else base / v

    refs = [resolve(v) for v in p.get("references", "").split(",") if v.strip()]
    sources: list[SourceSpec] = []
    if p.get("sources", "").strip():
        spec_path = resolve(p["sources"])
        sources = parse_source_specs(spec_path.read_text(), base_dir=spec_path.parent)
    d = cp["dedup"] if cp.has_section("dedup") else {}
    km = cp["kmeans"] if cp.has_section("kmeans") else None
    seed = int(p.get("seed", "0"))
    kmeans = KMeansConfig(
        k=int(km.get("k", "16")) if km else 16,
        max_iters=int(km.get("max_iters", "50")) if km else 50,
        tol=float(km.get("tol", "1e-4")) if km else 1e-4,
        seed=derive_seed(seed, "cluster"),
        spherical=(km.getboolean("spherical", True) if km else True),
    )
    threads = p.get("threads")
    return PipelineConfig(
        pool=resolve(p["pool"]),
        references=refs,
        sources=sources,
        output=resolve(p.get("output", "out")),
        seed=seed,
        threads=int(threads) if threads else None,
        dedup_k=int(d.get("k", "64")),
        self_threshold=float(d.get("self_threshold", "0.6")),
        relative_threshold=float(d.get("relative_threshold", "0.45")),
        index_mode=p.get("index", "exact").strip(),
        kmeans=kmeans,
        global_dedup=p.getboolean("global_dedup", False),
    )


def atomic_write(path: Path, data: str | bytes) -> None:
    partial = path.with_name(path.name + ".partial")
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(partial, mode) as fh:
        fh.write(data)
    os.replace(partial, path)


@dataclass
class StageReport:
    stage: str
    input_count: int
    output_count: int
    wall_time_s: float
    threads: int
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {
            "stage": self.stage,
            "input_count": self.input_count,
            "output_count": self.output_count,
            "wall_time_s": round(self.wall_time_s, 6),
            "threads": self.threads,
            "seed": self.seed,
        }
        out.update(self.extra)
        return out


@dataclass
class PipelineResult:
    manifest: CurationManifest
    reports: dict[str, StageReport]
    manifest_path: Path


class _Runner:
    def __init__(self, config: PipelineConfig, threads: int):
        self.config = config
        self.threads = threads
        self.reports: dict[str, StageReport] = {}
        self.report_dir = config.output / "reports"

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        info: dict = {}
        try:
            yield info
        except (CurateError, OSError, ValueError) as exc:
            raise PipelineError(name, exc) from exc
        report = StageReport(name, info.pop("input"), info.pop("output"), time.perf_counter() - t0, self.threads,
                             self.config.seed, info)
        self.reports[name] = report
        atomic_write(self.report_dir / f"{name}.json", json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
        log.info("%s: %d -> %d", name, report.input_count, report.output_count)


def run_pipeline(config: PipelineConfig) -> PipelineResult:
    threads = resolve_threads(config.threads)
    config.output.mkdir(parents=True, exist_ok=True)
    (config.output / "reports").mkdir(exist_ok=True)
    run = _Runner(config, threads)
    with threadpool_limits(limits=threads):
        with run.stage("normalize") as info:
            pool = l2_normalize(read_emb(config.pool))
            info.update(input=len(pool), output=len(pool))

        ivf = IVFParams(seed=derive_seed(config.seed, "dedup/ivf"))
        with run.stage("self_dedup") as info:
            rep = self_dedup(pool, DedupConfig(config.dedup_k, config.self_threshold), config.index_mode, ivf)
            pool_self = pool.subset(rep.kept)
            info.update(input=len(pool), output=len(pool_self), edge_count=rep.edge_count,
                        removed=rep.removed,
                        duplicate_components=rep.to_json()["duplicate_components"])

        with run.stage("relative_dedup") as info:
            if config.references:
                refs = [l2_normalize(read_emb(p)) for p in config.references]
                ref = EmbeddingSet.from_array(np.concatenate([r.data for r in refs]), normalized=True)
                rel = relative_dedup(pool_self, ref, DedupConfig(config.dedup_k, config.relative_threshold),
                                     config.index_mode, ivf)
                pool_final = pool_self.subset(rel.kept)
                info.update(removed=rel.removed, reference_count=len(ref))
            else:
                pool_final = pool_self
                info.update(removed=[], reference_count=0)
            info.update(input=len(pool_self), output=len(pool_final))

        with run.stage("cluster") as info:
            model = None
            if len(pool_final):
                k = min(config.kmeans.k, len(pool_final))
                cfg = KMeansConfig(k, config.kmeans.max_iters, config.kmeans.tol, config.kmeans.seed,
                                   config.kmeans.spherical)
                model = kmeans_fit(pool_final, cfg)
                info.update(k=k, inertia=model.inertia, iterations=len(model.inertia_history))
            info.update(input=len(pool_final), output=len(pool_final))

        with run.stage("retrieve") as info:
            queries = {}
            for spec in config.sources:
                if spec.emb_path is None or not Path(spec.emb_path).exists():
                    raise FileNotFoundError(f"query embeddings for source {spec.name!r}: {spec.emb_path}")
                q = read_emb(spec.emb_path)
                queries[spec.name] = l2_normalize(q) if len(q) else q
            manifest = assemble_dataset(config.sources, Pool(pool_final, kmeans=model), queries,
                                        global_dedup=config.global_dedup)
            info.update(input=len(pool_final), output=len(manifest.records), sources=manifest.summary)

        manifest_path = config.output / "manifest.tsv"
        with run.stage("manifest") as info:
            atomic_write(manifest_path, manifest.to_tsv())
            atomic_write(manifest_path.with_name("manifest.json"), manifest.summary_json())
            info.update(input=len(manifest.records), output=len(manifest.records))
    return PipelineResult(manifest, run.reports, manifest_path)

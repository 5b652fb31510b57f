"""``curate`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error (bad or missing input),
3 a check battery reported a failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checks
from .cluster import KMeansConfig, kmeans_fit, load_model, save_model
from .dedup import DedupConfig, IVFParams, relative_dedup, self_dedup
from .embeddings import EmbeddingSet, l2_normalize, read_emb, write_emb
from .errors import CurateError
from .pipeline import load_config, run_pipeline
from .probe import PROBE_ITERS, PROBE_LRS, LabeledFeatures, ProbeGrid, grid_search, knn_classify, patch_match, pca
from .retrieval import Pool, assemble_dataset, parse_source_specs
from .ssl_kernels import ScheduleConfig, lr_schedule, momentum_schedule, wd_schedule
from .synthetic import BlobSpec, SyntheticSpec, make_blobs, make_pipeline_fixture, write_blobs, write_fixture

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3

log = logging.getLogger("curate")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _write_json(path, obj) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _read_labels(path) -> np.ndarray:
    return np.asarray([int(line) for line in Path(path).read_text().split()], dtype=np.int64)


def _load_normalized(path) -> EmbeddingSet:
    return l2_normalize(read_emb(path))


# -- handlers ----------------------------------------------------------------


def cmd_embed_import(args) -> int:
    src = Path(args.input)
    data = np.load(src) if src.suffix == ".npy" else np.loadtxt(src, ndmin=2)
    ids = np.loadtxt(args.ids, dtype=np.uint64, ndmin=1) if args.ids else None
    es = EmbeddingSet.from_array(np.asarray(data, dtype=np.float32), ids=ids)
    if args.normalize:
        es = l2_normalize(es)
    write_emb(args.out, es)
    print(f"wrote {len(es)} x {es.dim} embeddings to {args.out}")
    return EXIT_OK


def cmd_dedup_self(args) -> int:
    es = _load_normalized(args.emb)
    rep = self_dedup(es, DedupConfig(args.k, args.threshold), args.index, IVFParams(seed=args.seed))
    _write_json(args.report, rep.to_json())
    print(f"kept {len(rep.kept)} of {len(es)}", file=sys.stderr)
    return EXIT_OK


def cmd_dedup_relative(args) -> int:
    src = _load_normalized(args.source)
    ref = _load_normalized(args.reference)
    rep = relative_dedup(src, ref, DedupConfig(args.k, args.threshold), args.index, IVFParams(seed=args.seed))
    _write_json(args.report, rep.to_json())
    print(f"kept {len(rep.kept)} of {len(src)}", file=sys.stderr)
    return EXIT_OK


def cmd_cluster(args) -> int:
    es = read_emb(args.emb)
    spherical = not args.euclidean
    if spherical:
        es = l2_normalize(es)
    model = kmeans_fit(es, KMeansConfig(args.k, args.max_iters, args.tol, args.seed, spherical))
    save_model(args.out, model)
    print(f"k={model.k} inertia={model.inertia:.6f} iterations={len(model.inertia_history)}")
    return EXIT_OK


def cmd_retrieve(args) -> int:
    pool = _load_normalized(args.pool)
    spec_path = Path(args.specs)
    specs = parse_source_specs(spec_path.read_text(), base_dir=spec_path.parent)
    queries = {s.name: _load_normalized(s.emb_path) for s in specs}
    model = load_model(args.kmeans) if args.kmeans else None
    manifest = assemble_dataset(specs, Pool(pool, kmeans=model), queries, global_dedup=args.global_dedup)
    manifest.write(args.out)
    print(json.dumps(manifest.counts(), sort_keys=True))
    return EXIT_OK


def cmd_pipeline_run(args) -> int:
    config = load_config(args.config)
    if args.threads is not None:
        config.threads = args.threads
    if args.out:
        config.output = Path(args.out)
    result = run_pipeline(config)
    for name, rep in result.reports.items():
        print(f"{name}: {rep.input_count} -> {rep.output_count} ({rep.wall_time_s:.3f}s)")
    print(f"manifest: {result.manifest_path}")
    return EXIT_OK


def _finish_battery(report: checks.BatteryReport, out) -> int:
    for line in report.lines():
        print(line)
    if out:
        Path(out).write_text(report.to_json())
    return EXIT_OK if report.passed else EXIT_CHECK


def cmd_losses_check(args) -> int:
    return _finish_battery(checks.losses_battery(args.seed, args.instances), args.out)


def cmd_pack_check(args) -> int:
    return _finish_battery(checks.pack_battery(args.seed, args.configs), args.out)


def cmd_probe_knn(args) -> int:
    train = read_emb(args.train)
    train_set = LabeledFeatures(train.data, _read_labels(args.labels))
    preds = knn_classify(train_set, read_emb(args.query).data, args.k)
    sys.stdout.write("".join(f"{p}\n" for p in preds.tolist()))
    if args.query_labels:
        truth = _read_labels(args.query_labels)
        print(f"accuracy {float(np.mean(preds == truth)):.6f}", file=sys.stderr)
    return EXIT_OK


def cmd_probe_linear(args) -> int:
    views = {p.stem: read_emb(p).data for p in sorted(Path(args.views).glob("*.emb"))}
    if not views:
        raise FileNotFoundError(f"no .emb views in {args.views}")
    lrs = [float(v) for v in args.lrs.split(",")] if args.lrs else PROBE_LRS
    res = grid_search(ProbeGrid(views, lrs), _read_labels(args.labels), iters=args.iters, seed=args.seed)
    _write_json(args.out, {
        "best": {"view": res.view, "lr": res.lr, "accuracy": res.accuracy},
        "n_trained": res.n_trained,
        "cells": [{"view": v, "lr": lr, "accuracy": a} for v, lr, a in res.cells],
    })
    return EXIT_OK


def cmd_probe_pca(args) -> int:
    es = read_emb(args.emb)
    res = pca(es.data, min(args.components, es.dim))
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + [f"pc{i + 1}" for i in range(res.scores.shape[1])])
        for i, row in zip(es.ids.tolist(), res.scores.tolist()):
            w.writerow([i] + [repr(v) for v in row])
    print("explained_variance_ratio " + " ".join(f"{v:.6f}" for v in res.explained_variance_ratio))
    return EXIT_OK


def cmd_probe_match(args) -> int:
    fa, fb = read_emb(args.a).data, read_emb(args.b).data
    ca = np.loadtxt(args.coords_a, ndmin=2)
    cb = np.loadtxt(args.coords_b, ndmin=2)
    ms = patch_match(fa, ca, fb, cb, args.radius)
    _write_json(args.out, {
        "matches": [{"a": a, "b": b, "cost": c} for a, b, c in ms.matches],
        "total_cost": ms.total_cost,
    })
    return EXIT_OK


def cmd_gen_synthetic(args) -> int:
    if args.kind == "blobs":
        spec = BlobSpec(args.n_blobs, args.blob_size, args.sigma, args.dim)
        es, labels = make_blobs(spec, args.seed)
        write_blobs(es, labels, spec, args.seed, args.out)
    else:
        groups = tuple(int(g) for g in args.dup_groups.split(",") if g.strip()) if args.dup_groups else ()
        fx = make_pipeline_fixture(SyntheticSpec(pool_size=args.pool_size, dup_groups=groups), args.seed)
        write_fixture(fx, args.out)
    print(f"wrote {args.kind} fixture to {args.out}")
    return EXIT_OK


def cmd_schedule_dump(args) -> int:
    cfg = ScheduleConfig(total_steps=args.total, warmup_steps=args.warmup, lr_base=args.lr_base)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "lr", "momentum", "wd"])
        steps = list(range(0, cfg.total_steps + 1, args.every))
        if steps[-1] != cfg.total_steps:
            steps.append(cfg.total_steps)
        for t in steps:
            w.writerow([t, repr(lr_schedule(cfg, t)), repr(momentum_schedule(cfg, t)), repr(wd_schedule(cfg, t))])
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="curate", description="Embedding-space data curation and SSL kernel checks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("embed-import", help="convert .npy or whitespace text to EMB1")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--ids", help="text file with one u64 id per row")
    s.add_argument("--normalize", action="store_true")
    s.set_defaults(func=cmd_embed_import)

    dd = sub.add_parser("dedup").add_subparsers(dest="mode", required=True, parser_class=_Parser)
    s = dd.add_parser("self")
    s.add_argument("--emb", required=True)
    s.add_argument("--threshold", type=float, default=0.6)
    s.set_defaults(func=cmd_dedup_self)
    r = dd.add_parser("relative")
    r.add_argument("--source", required=True)
    r.add_argument("--reference", required=True)
    r.add_argument("--threshold", type=float, default=0.45)
    r.set_defaults(func=cmd_dedup_relative)
    for x in (s, r):
        x.add_argument("--k", type=int, default=64)
        x.add_argument("--report", default="-")
        x.add_argument("--index", choices=("exact", "ivfpq"), default="exact")
        x.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("cluster", help="k-means over an EMB1 file")
    s.add_argument("--emb", required=True)
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--max-iters", type=int, default=50)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--euclidean", action="store_true", help="plain Euclidean k-means")
    s.set_defaults(func=cmd_cluster)

    s = sub.add_parser("retrieve", help="assemble a manifest from a source-spec file")
    s.add_argument("--pool", required=True)
    s.add_argument("--specs", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--kmeans", help="k-means model of the pool (for cluster sources)")
    s.add_argument("--global-dedup", action="store_true")
    s.set_defaults(func=cmd_retrieve)

    pl = sub.add_parser("pipeline").add_subparsers(dest="action", required=True, parser_class=_Parser)
    s = pl.add_parser("run")
    s.add_argument("--config", required=True)
    s.add_argument("--threads", type=int)
    s.add_argument("--out", help="override the configured output directory")
    s.set_defaults(func=cmd_pipeline_run)

    ls = sub.add_parser("losses").add_subparsers(dest="action", required=True, parser_class=_Parser)
    s = ls.add_parser("check")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.add_argument("--instances", type=int, default=100)
    s.set_defaults(func=cmd_losses_check)

    pk = sub.add_parser("pack").add_subparsers(dest="action", required=True, parser_class=_Parser)
    s = pk.add_parser("check")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.add_argument("--configs", type=int, default=200)
    s.set_defaults(func=cmd_pack_check)

    pr = sub.add_parser("probe").add_subparsers(dest="mode", required=True, parser_class=_Parser)
    s = pr.add_parser("knn")
    s.add_argument("--train", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--query", required=True)
    s.add_argument("--query-labels")
    s.add_argument("--k", type=int, default=20)
    s.set_defaults(func=cmd_probe_knn)
    s = pr.add_parser("linear")
    s.add_argument("--views", required=True, help="directory of .emb files, one per feature view")
    s.add_argument("--labels", required=True)
    s.add_argument("--out", default="-")
    s.add_argument("--iters", type=int, default=PROBE_ITERS)
    s.add_argument("--lrs", help="comma-separated learning rates")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_probe_linear)
    s = pr.add_parser("pca")
    s.add_argument("--emb", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--components", type=int, default=3)
    s.set_defaults(func=cmd_probe_pca)
    s = pr.add_parser("match")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--coords-a", required=True)
    s.add_argument("--coords-b", required=True)
    s.add_argument("--radius", type=float, default=0.0)
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_probe_match)

    gen = sub.add_parser("gen").add_subparsers(dest="action", required=True, parser_class=_Parser)
    s = gen.add_parser("synthetic")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--kind", choices=("pipeline", "blobs"), default="pipeline")
    s.add_argument("--pool-size", type=int, default=SyntheticSpec.pool_size)
    s.add_argument("--dup-groups", default="4,3,2", help="comma-separated group sizes; empty for none")
    s.add_argument("--n-blobs", type=int, default=BlobSpec.n_blobs)
    s.add_argument("--blob-size", type=int, default=BlobSpec.blob_size)
    s.add_argument("--sigma", type=float, default=BlobSpec.sigma)
    s.add_argument("--dim", type=int, default=BlobSpec.dim)
    s.set_defaults(func=cmd_gen_synthetic)

    sc = sub.add_parser("schedule").add_subparsers(dest="action", required=True, parser_class=_Parser)
    s = sc.add_parser("dump")
    s.add_argument("--total", type=int, default=ScheduleConfig.total_steps)
    s.add_argument("--warmup", type=int, default=ScheduleConfig.warmup_steps)
    s.add_argument("--lr-base", type=float, default=ScheduleConfig.lr_base)
    s.add_argument("--every", type=_positive, default=1, help="emit every n-th step (the last step is always kept)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_schedule_dump)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CurateError, OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ingest, query, eval, bench, serve, synth.

JSON results go to stdout (canonical key order); human tables and logs go
to stderr.  Any input or runtime error exits with status 1.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .bench import format_speed_table, speed_benchmark
from .diagnosis import DEFAULT_K, METRICS
from .evaluation import (
    VIEW_NAMES,
    VIEW_PROTOCOL,
    SyntheticConfig,
    canonical_json,
    classification_cv,
    format_cls_table,
    format_view_table,
    reid_from_views,
    reid_scores,
    synthetic_views,
)
from .formats import read_embeddings, write_embeddings
from .fusion import FusionConfig, fuse_matrix
from .hashing import hamming_scan, quantize_matrix
from .index import load_snapshot
from .metrics import ReidTask
from .pipeline import group_scenes, run_ingest, run_query
from .service import ServiceConfig, serve

log = logging.getLogger("lesion_retrieval")


def _views_list(text: str) -> tuple[int, ...]:
    names = {v: k for k, v in VIEW_NAMES.items()}
    out = []
    for part in text.split(","):
        part = part.strip()
        out.append(names[part.upper()] if part.upper() in names else int(part))
    if not out:
        raise argparse.ArgumentTypeError("empty view list")
    return tuple(out)


def _fusion(args) -> FusionConfig:
    return FusionConfig(normalize_inputs=not args.no_normalize, normalize_output=not args.no_normalize)


def _emit(obj, table: str | None = None):
    if table:
        print(table, file=sys.stderr)
    print(canonical_json(obj))


def cmd_ingest(args) -> int:
    n = run_ingest(args.embeddings, args.labels, args.out, _fusion(args), args.hash_bits, args.leaf_size, args.build_seed)
    log.info("wrote %d records to %s", n, args.out)
    _emit({"out": args.out, "records": n})
    return 0


def cmd_query(args) -> int:
    for line in run_query(args.db, args.input, args.k, args.metric, args.exclude_self, _fusion(args)):
        print(line)
    return 0


def _view_array(path):
    """(polyps, views, D) array, view ids and polyp ids; every polyp must carry the same view ids."""
    scenes = group_scenes(read_embeddings(path))
    view_ids = [v.view_id for v in scenes[0].views] if scenes else []
    for s in scenes:
        if [v.view_id for v in s.views] != view_ids:
            raise ValueError(f"polyp {s.polyp_id} has views {[v.view_id for v in s.views]}, expected {view_ids}")
    views = np.stack([np.stack([v.values for v in s.views]) for s in scenes])
    return views, view_ids, [s.polyp_id for s in scenes]


def cmd_eval_reid(args) -> int:
    fusion = _fusion(args)
    if args.db is not None:
        if args.input is None:
            raise ValueError("--db needs --input with query embeddings")
        store = load_snapshot(args.db)
        views, _, qids = _view_array(args.input)
        fused = fuse_matrix(views, fusion)[:, : store.hash_bits]
        qc = quantize_matrix(fused)
        dist = np.empty((len(qc), len(store)), dtype=np.int64)
        for i in range(len(qc)):
            hamming_scan(store.code_matrix.words, qc[i], dist[i])
        task = ReidTask.identity(qids, [r.polyp_id for r in store.records])
        report = reid_scores(task, 1.0 - 2.0 * dist / store.hash_bits)
        report.meta = {"metric": "hamming", "queries": len(qids), "references": len(store)}
        _emit(report.to_dict(), None)
        return 0
    if args.embeddings is None:
        raise ValueError("eval reid needs --embeddings or --db/--input")
    views, view_ids, _ = _view_array(args.embeddings)
    if args.query_views is not None or args.ref_views is not None:
        if args.query_views is None or args.ref_views is None:
            raise ValueError("--query-views and --ref-views go together")
        rows = [(args.query_views, args.ref_views)]
    else:
        if len(view_ids) < 4:
            raise ValueError(f"the view protocol needs 4 views per polyp, found {len(view_ids)}")
        rows = VIEW_PROTOCOL
    reports = []
    for qv, rv in rows:
        for v in qv + rv:
            if not 0 <= v < len(view_ids):
                raise ValueError(f"view slot {v} out of range for {len(view_ids)} views")
        rep = reid_from_views(views, qv, rv, args.metric, fusion)
        rep.meta = {
            "metric": args.metric,
            "query_views": [VIEW_NAMES.get(v, str(v)) for v in qv],
            "ref_views": [VIEW_NAMES.get(v, str(v)) for v in rv],
        }
        reports.append(rep)
    table = format_view_table(reports) if all(len(view_ids) >= 4 and max(q + r) < 4 for q, r in rows) else None
    _emit([r.to_dict() for r in reports], table)
    return 0


def cmd_eval_cls(args) -> int:
    store = load_snapshot(args.db)
    reports, summary = classification_cv(store, folds=args.folds, seed=args.seed, k=args.k)
    _emit({"folds": [vars(r) for r in reports], "summary": summary}, format_cls_table(reports, summary))
    return 0


def cmd_bench(args) -> int:
    rep = speed_benchmark(args.n, args.dim, args.dist, args.repeats, args.queries, args.k, args.seed, args.leaf_size)
    _emit(rep.to_dict(), format_speed_table(rep))
    return 0


def cmd_serve(args) -> int:
    cfg = ServiceConfig(args.db, args.host, args.port, args.k, args.metric, args.max_body_bytes)
    return serve(cfg, ready=lambda h, p: print(f"listening on http://{h}:{p}", file=sys.stderr, flush=True))


def cmd_synth(args) -> int:
    cfg = SyntheticConfig(n_polyps=args.polyps, n_views=args.views, dim=args.dim, n_classes=args.classes)
    views, labels = synthetic_views(cfg, args.seed)
    p, v = np.meshgrid(np.arange(cfg.n_polyps), np.arange(cfg.n_views), indexing="ij")
    row_labels = np.repeat(labels, cfg.n_views) if args.with_labels else -1
    n = write_embeddings(args.out, np.arange(p.size), p.ravel(), v.ravel(), row_labels, views.reshape(-1, cfg.dim))
    _emit({"bytes": n, "out": args.out, "polyps": cfg.n_polyps, "views": cfg.n_views})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lesion-retrieval", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def normalize_flag(p):
        p.add_argument("--no-normalize", action="store_true", help="skip L2 normalization in view fusion")

    p = sub.add_parser("ingest", help="fuse, quantize and snapshot an embedding file")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--labels", help="JSONL sidecar of {polyp_id, label}; wins over embedded labels")
    p.add_argument("--out", required=True)
    p.add_argument("--hash-bits", type=int, help="keep the first K dimensions (default K = D)")
    p.add_argument("--leaf-size", type=int, default=32)
    p.add_argument("--build-seed", type=int, default=0)
    normalize_flag(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("query", help="diagnose each polyp of an embedding file against a snapshot")
    p.add_argument("--db", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--k", type=int, default=DEFAULT_K)
    p.add_argument("--metric", choices=METRICS, default="hamming")
    p.add_argument("--exclude-self", action="store_true")
    normalize_flag(p)
    p.set_defaults(func=cmd_query)

    ev = sub.add_parser("eval", help="re-identification or classification protocols")
    esub = ev.add_subparsers(dest="mode", required=True)
    p = esub.add_parser("reid")
    p.add_argument("--embeddings", help="four-view file: run the view protocol (or one --query/--ref-views row)")
    p.add_argument("--db")
    p.add_argument("--input")
    p.add_argument("--query-views", type=_views_list)
    p.add_argument("--ref-views", type=_views_list)
    p.add_argument("--metric", choices=METRICS, default="cosine")
    normalize_flag(p)
    p.set_defaults(func=cmd_eval_reid)
    p = esub.add_parser("cls")
    p.add_argument("--db", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=DEFAULT_K)
    p.set_defaults(func=cmd_eval_cls)

    p = sub.add_parser("bench", help="cosine scan vs Hamming scan vs ball tree throughput")
    p.add_argument("--n", type=int, default=50_000)
    p.add_argument("--dim", type=int, default=1024)
    p.add_argument("--dist", choices=("clustered", "uniform"), default="clustered")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--queries", type=int, default=200)
    p.add_argument("--k", type=int, default=DEFAULT_K)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--leaf-size", type=int, default=32)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("serve", help="HTTP query service over a snapshot")
    p.add_argument("--db", required=True)
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--k", type=int, default=DEFAULT_K)
    p.add_argument("--metric", choices=METRICS, default="hamming")
    p.add_argument("--max-body-bytes", type=int, default=8 << 20)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("synth", help="write a synthetic multi-view embedding file")
    p.add_argument("--out", required=True)
    p.add_argument("--polyps", type=int, default=250)
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--dim", type=int, default=256)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--with-labels", action="store_true")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Throughput benchmark: float cosine scan vs packed Hamming scan vs Hamming ball tree."""

from __future__ import annotations

import hashlib
import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .hashing import CodeMatrix, HashCode, quantize_matrix
from .index import DEFAULT_LEAF_SIZE, build_ball_tree_from_codes, knn_ball_tree, knn_cosine_scan, knn_linear_scan

METHODS = ("cosine_scan", "hamming_scan", "hamming_ball_tree")


@dataclass
class SpeedReport:
    n: int
    dim: int
    distribution: str
    repeats: int
    n_queries: int
    k: int
    threads: int
    build_seconds: float
    qps: dict
    speedup_vs_cosine: dict
    tree_matches_scan: bool
    result_digest: dict

    def to_dict(self) -> dict:
        return asdict(self)


def make_dataset(n: int, dim: int, distribution: str, n_queries: int, seed: int = 0):
    """Float database and queries; clustered queries land near existing clusters."""
    rng = np.random.default_rng(seed)
    if distribution == "uniform":
        data = rng.standard_normal((n, dim), dtype=np.float32)
        queries = rng.standard_normal((n_queries, dim), dtype=np.float32)
    elif distribution == "clustered":
        n_clusters = max(1, n // 500)
        centers = rng.standard_normal((n_clusters, dim), dtype=np.float32)
        assign = rng.integers(n_clusters, size=n)
        data = centers[assign] + 0.5 * rng.standard_normal((n, dim), dtype=np.float32)
        q_assign = rng.integers(n_clusters, size=n_queries)
        queries = centers[q_assign] + 0.5 * rng.standard_normal((n_queries, dim), dtype=np.float32)
    else:
        raise ValueError(f"unknown distribution {distribution!r}")
    data /= np.linalg.norm(data, axis=1, keepdims=True)
    queries /= np.linalg.norm(queries, axis=1, keepdims=True)
    return data, queries


def _digest(results) -> str:
    h = hashlib.sha256()
    for r in results:
        h.update(np.asarray(r.record_ids, dtype="<u8").tobytes())
        h.update(np.asarray(r.distances, dtype="<f8").tobytes())
    return h.hexdigest()


def speed_benchmark(
    n: int,
    dim: int,
    distribution: str = "clustered",
    repeats: int = 3,
    n_queries: int = 200,
    k: int = 6,
    seed: int = 0,
    leaf_size: int = DEFAULT_LEAF_SIZE,
) -> SpeedReport:
    """Median-of-repeats queries/sec per method on identical data, one thread."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    data, queries = make_dataset(n, dim, distribution, n_queries, seed)
    ids = np.arange(n, dtype=np.uint64)
    codes = CodeMatrix(dim, quantize_matrix(data))
    query_codes = [HashCode(dim, row) for row in quantize_matrix(queries)]

    t0 = time.perf_counter()
    tree = build_ball_tree_from_codes(codes.words, ids, dim, leaf_size=leaf_size, build_seed=seed)
    build_seconds = time.perf_counter() - t0

    runners = {
        "cosine_scan": lambda i: knn_cosine_scan(data, ids, queries[i], k),
        "hamming_scan": lambda i: knn_linear_scan(codes, ids, query_codes[i], k),
        "hamming_ball_tree": lambda i: knn_ball_tree(tree, query_codes[i], k),
    }
    timings = {m: [] for m in METHODS}
    results = {}
    with threadpool_limits(limits=1):
        for m in METHODS:
            runners[m](0)  # warm caches and JIT
        for _ in range(repeats):
            for m in METHODS:
                run = runners[m]
                t0 = time.perf_counter()
                out = [run(i) for i in range(n_queries)]
                timings[m].append(n_queries / (time.perf_counter() - t0))
                results[m] = out
    qps = {m: statistics.median(v) for m, v in timings.items()}
    return SpeedReport(
        n=n,
        dim=dim,
        distribution=distribution,
        repeats=repeats,
        n_queries=n_queries,
        k=k,
        threads=1,
        build_seconds=build_seconds,
        qps=qps,
        speedup_vs_cosine={m: qps[m] / qps["cosine_scan"] for m in METHODS},
        tree_matches_scan=all(a == b for a, b in zip(results["hamming_scan"], results["hamming_ball_tree"])),
        result_digest={m: _digest(results[m]) for m in METHODS},
    )


def format_speed_table(report: SpeedReport) -> str:
    lines = [
        f"N={report.n} D=K={report.dim} dist={report.distribution} k={report.k} "
        f"queries={report.n_queries} repeats={report.repeats} threads={report.threads}",
        f"{'method':<18} {'queries/s':>12} {'x cosine':>9}",
        "-" * 41,
    ]
    for m in METHODS:
        lines.append(f"{m:<18} {report.qps[m]:>12.1f} {report.speedup_vs_cosine[m]:>9.2f}")
    return "\n".join(lines)

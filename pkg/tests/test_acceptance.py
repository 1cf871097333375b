"""Acceptance criteria, one test each, at their stated tolerances.

Each test records a PASS/FAIL line; the lines are printed together at the
end of the session (see ``conftest.pytest_terminal_summary``).  Run alone
with ``pytest tests/test_acceptance.py`` or ``python tests/test_acceptance.py``.
"""

import json
import math
import sys
import threading
import time
import urllib.request

import numpy as np
import pytest

import oracles
from conftest import ACCEPTANCE_LINES, random_code, random_store, write_synthetic
from lesion_retrieval.bench import speed_benchmark
from lesion_retrieval.core import LesionRecord, make_store
from lesion_retrieval.evaluation import VIEW_PROTOCOL, SyntheticConfig, reid_from_views, synthetic_views
from lesion_retrieval.formats import write_embeddings
from lesion_retrieval.hashing import HashCode, code_from_signs, hamming_distance, hamming_to_cosine, pack_bits
from lesion_retrieval.index import (
    build_ball_tree,
    knn_ball_tree,
    knn_linear_scan,
    load_snapshot,
    save_snapshot,
    snapshot_bytes,
)
from lesion_retrieval.losses import (
    MaskedImageBatch,
    entropy_regularizer,
    entropy_regularizer_grad,
    group_pairs,
    image_pairs,
    infonce_exclusive,
    infonce_exclusive_grad,
    infonce_inclusive,
    infonce_inclusive_grad,
    masked_mse,
    masked_mse_grad,
)
from lesion_retrieval.metrics import ReidTask, acc_at_1, f1_and_acc, micro_average_precision, recall_at_p90, roc_auc
from lesion_retrieval.pipeline import run_ingest, run_query
from lesion_retrieval.service import QueryServer, ServiceConfig


def record(name: str, ok: bool, detail: str):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------- index


def test_ball_tree_exactness():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    cases = mismatches = 0
    for s in range(60):
        n_bits = (64, 256, 1024)[s % 3]
        n = 5000 if s < 6 else int(np.exp(rng.uniform(0, np.log(5000))))
        if s % 2:
            # clustered codes with duplicates, where pruning matters
            centers = rng.integers(0, 2, (max(1, n // 200), n_bits)).astype(bool)
            bits = centers[rng.integers(0, len(centers), n)] ^ (rng.random((n, n_bits)) < 0.1)
            words = pack_bits(bits)
            ids = rng.choice(20 * n, size=n, replace=False)
            store = make_store(
                [LesionRecord(int(ids[i]), i, HashCode(n_bits, words[i])) for i in range(n)],
                hash_bits=n_bits, leaf_size=int(rng.integers(1, 64)), build_seed=s,
            )
        else:
            store = random_store(rng, n, n_bits, dup_rate=0.05, leaf_size=int(rng.integers(1, 64)), build_seed=s)
        tree = build_ball_tree(store)
        for _ in range(4):
            k = int(rng.integers(1, 51))
            if rng.random() < 0.5:
                q = store.records[int(rng.integers(n))].code
            else:
                q = random_code(rng, n_bits)
            excl = set(rng.choice(store.record_ids, size=min(n, 5), replace=False).tolist()) if rng.random() < 0.3 else None
            got = knn_ball_tree(tree, q, k, exclude_ids=excl)
            want = knn_linear_scan(store.code_matrix, store.record_ids, q, k, exclude_ids=excl)
            cases += 1
            mismatches += got != want
    elapsed = time.perf_counter() - t0
    record(
        "ball-tree exactness",
        cases >= 200 and mismatches == 0 and elapsed < 60,
        f"{cases - mismatches}/{cases} identical (N<=5000, K in 64/256/1024), {elapsed:.1f}s (< 60s)",
    )


def test_hamming_metric_properties():
    rng = np.random.default_rng(7)
    violations = 0
    for t in range(10_000):
        k = int(rng.integers(1, 300))
        a = rng.integers(0, 2, k).astype(bool)
        # near neighbors make the triangle inequality tight
        b = a ^ (rng.random(k) < rng.uniform(0, 0.5))
        c = b ^ (rng.random(k) < rng.uniform(0, 0.5)) if t % 2 else rng.integers(0, 2, k).astype(bool)
        ca, cb, cc = (HashCode(k, pack_bits(x)) for x in (a, b, c))
        ab, ba, bc, ac = (hamming_distance(x, y) for x, y in ((ca, cb), (cb, ca), (cb, cc), (ca, cc)))
        violations += hamming_distance(ca, ca) != 0
        violations += ab != ba
        violations += ac > ab + bc
        violations += (ab == 0) != bool(np.array_equal(a, b))
    record("Hamming metric properties", violations == 0, f"{violations} violations on 10000 triples")


def test_cosine_hamming_identity():
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(1, 2048))
        a, b = rng.choice([-1.0, 1.0], (2, k))
        cos = float(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))
        h = hamming_distance(code_from_signs(a), code_from_signs(b))
        worst = max(worst, abs(cos - hamming_to_cosine(h, k)))
    record("cosine-Hamming identity", worst < 1e-9, f"max |cos - (1 - 2h/K)| = {worst:.2e} over 1000 pairs")


# ---------------------------------------------------------------- losses


def _grouped_batch(rng):
    """M in [4, 8] items in groups of >= 2 with >= 2 groups, so every item has a positive and a negative."""
    while True:
        m = int(rng.integers(4, 9))
        g = rng.integers(0, m // 2, m)
        if len(set(g.tolist())) >= 2 and all((g == x).sum() >= 2 for x in g):
            return m, g


def test_loss_oracles():
    rng = np.random.default_rng(9)
    worst = {"infonce_exclusive": 0.0, "infonce_inclusive": 0.0, "entropy": 0.0, "entropy_raw": 0.0, "masked_mse": 0.0}
    for _ in range(100):
        m, groups = _grouped_batch(rng)
        d = int(rng.integers(2, 17))
        z = rng.standard_normal((m, d))
        pairs = group_pairs(groups)
        pos = [set(pairs.positives(i)) for i in range(m)]
        tau = float(rng.choice([0.05, 0.1, 0.5, 1.0]))
        zl = z.tolist()
        worst["infonce_exclusive"] = max(worst["infonce_exclusive"],
                                         abs(infonce_exclusive(z, pairs, tau) - oracles.infonce_exclusive(zl, pos, tau)))
        worst["infonce_inclusive"] = max(worst["infonce_inclusive"],
                                         abs(infonce_inclusive(z, pairs, tau) - oracles.infonce_inclusive(zl, pos, tau)))
        worst["entropy"] = max(worst["entropy"], abs(entropy_regularizer(z, pairs) - oracles.entropy_regularizer(zl, pos)))
        worst["entropy_raw"] = max(worst["entropy_raw"], abs(
            entropy_regularizer(z, pairs, raw_distances=True) - oracles.entropy_regularizer(zl, pos, raw=True)))
        orig, recon = rng.standard_normal((2, m, d))
        masks = rng.random((m, d)) < 0.4
        masks[np.arange(m), rng.integers(0, d, m)] = True
        worst["masked_mse"] = max(worst["masked_mse"], abs(
            masked_mse(MaskedImageBatch(orig, recon, masks)) - oracles.masked_mse(orig.tolist(), recon.tolist(), masks.tolist())))
    forced = float(infonce_exclusive(rng.standard_normal((2, 5)), image_pairs(1)))
    ok = max(worst.values()) < 1e-9 and forced == 0.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record("loss oracles", ok, f"max abs error over 100 batches: {detail}; no-negative InfoNCE = {forced!r}")


def test_gradient_check():
    rng = np.random.default_rng(10)
    worst = {}
    for _ in range(20):
        z = rng.standard_normal((4, 8))
        pairs = image_pairs(2)
        for name, fn in (
            ("infonce_exclusive", lambda x: infonce_exclusive_grad(x, pairs, 0.05)),
            ("infonce_inclusive", lambda x: infonce_inclusive_grad(x, pairs, 0.05)),
            ("entropy", lambda x: entropy_regularizer_grad(x, pairs)),
            ("entropy_raw", lambda x: entropy_regularizer_grad(x, pairs, raw_distances=True)),
        ):
            numeric = oracles.central_difference(lambda x: fn(x)[0], z, step=1e-4)
            worst[name] = max(worst.get(name, 0.0), oracles.relative_error(fn(z)[1], numeric))
        orig, recon = rng.standard_normal((2, 4, 8))
        masks = rng.random((4, 8)) < 0.5
        masks[:, 0] = True
        analytic = masked_mse_grad(MaskedImageBatch(orig, recon, masks))[1]
        numeric = oracles.central_difference(lambda r: masked_mse(MaskedImageBatch(orig, r, masks)), recon, step=1e-4)
        worst["masked_mse"] = max(worst.get("masked_mse", 0.0), oracles.relative_error(analytic, numeric))
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record("gradient check", max(worst.values()) < 1e-4, f"max relative error over 20 batches of 4: {detail}")


# ---------------------------------------------------------------- metrics


def test_metric_oracles():
    rng = np.random.default_rng(11)
    worst = 0.0
    for t in range(100):
        n_q, n_r = int(rng.integers(1, 21)), int(rng.integers(1, 41))
        refs = rng.choice(500, n_r, replace=False).tolist()
        queries = rng.choice(500, n_q, replace=False).tolist()
        truth = {q: int(rng.choice(refs)) for q in queries}
        scores = rng.standard_normal((n_q, n_r))
        if t % 3 == 0:
            scores = np.round(scores * 2) / 2  # heavy ties
        task = ReidTask(tuple(queries), tuple(refs), truth)
        args = (queries, refs, truth, scores.tolist())
        worst = max(
            worst,
            abs(micro_average_precision(task, scores) - oracles.micro_ap(*args)),
            abs(acc_at_1(task, scores) - oracles.acc_at_1(*args)),
            abs(recall_at_p90(task, scores) - oracles.recall_at_p90(*args)),
        )
        n = int(rng.integers(2, 60))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        s = rng.random(n) if t % 2 else np.round(rng.random(n) * 4) / 4
        preds = rng.integers(0, 2, n)
        worst = max(
            worst,
            abs(roc_auc(s, labels) - oracles.auc(s.tolist(), labels.tolist())),
            abs(f1_and_acc(preds, labels)[0] - oracles.f1(preds.tolist(), labels.tolist())),
        )
    # perfect rankings
    task = ReidTask.identity(range(20), range(40))
    perfect = np.full((20, 40), -1.0)
    perfect[np.arange(20), np.arange(20)] = 1.0
    labels = np.array([0, 1] * 10)
    exact = (
        micro_average_precision(task, perfect), acc_at_1(task, perfect), recall_at_p90(task, perfect),
        roc_auc(labels.astype(float), labels), f1_and_acc(labels, labels)[0],
    )
    ok = worst < 1e-9 and all(v == 1.0 for v in exact)
    record("metric oracles", ok, f"max abs error {worst:.1e} over 100 tasks; perfect-ranking values {exact}")


# ---------------------------------------------------------------- synthetic multi-view study


@pytest.fixture(scope="module")
def protocol_runs():
    cfg = SyntheticConfig()
    runs = []
    for seed in range(20):
        views, _ = synthetic_views(cfg, seed)
        cos = {row: reid_from_views(views, *row, metric="cosine").uap for row in VIEW_PROTOCOL}
        ham = {row: reid_from_views(views, *row, metric="hamming").uap for row in VIEW_PROTOCOL}
        runs.append((cos, ham))
    return runs


def _monotone(uap):
    """uAP never drops when views are added to the query side, the reference side, or both."""
    def sub(a, b):
        return set(a) <= set(b)

    return all(
        uap[a] <= uap[b]
        for a in uap
        for b in uap
        if a != b and sub(a[0], b[0]) and sub(a[1], b[1])
    )


def test_multi_view_trend(protocol_runs):
    one, two = VIEW_PROTOCOL[0], VIEW_PROTOCOL[-1]
    good = sum(cos[two] >= cos[one] and _monotone(cos) for cos, _ in protocol_runs)
    gain = np.mean([cos[two] - cos[one] for cos, _ in protocol_runs])
    record(
        "multi-view trend",
        good >= math.ceil(0.95 * len(protocol_runs)),
        f"monotone in {good}/{len(protocol_runs)} seeds (need >= 95%), mean 2v2 - 1v1 uAP gain {gain:+.3f}",
    )


def test_hash_degradation_bound(protocol_runs):
    gaps = [max(cos[r] - ham[r] for r in VIEW_PROTOCOL) for cos, ham in protocol_runs]
    record(
        "hash degradation bound",
        all(g <= 0.10 for g in gaps),
        f"worst uAP(cosine) - uAP(Hamming) over 20 seeds x 9 view rows = {max(gaps):.3f} (<= 0.10)",
    )


# ---------------------------------------------------------------- systems


def test_speedup():
    t0 = time.perf_counter()
    rep = speed_benchmark(50_000, 1024, "clustered", repeats=3, n_queries=200, k=6, seed=0)
    elapsed = time.perf_counter() - t0
    tree, scan = rep.speedup_vs_cosine["hamming_ball_tree"], rep.speedup_vs_cosine["hamming_scan"]
    ok = tree >= 2.0 and scan >= 4.0 and rep.tree_matches_scan and elapsed < 600
    record(
        "speedup",
        ok,
        f"N=50000 D=K=1024 1 thread: ball tree {tree:.1f}x, Hamming scan {scan:.1f}x cosine "
        f"({rep.qps['cosine_scan']:.0f} qps), tree == scan {rep.tree_matches_scan}, {elapsed:.0f}s",
    )


def test_persistence(tmp_path):
    rng = np.random.default_rng(12)
    failures = 0
    for s in range(50):
        n = int(rng.integers(1, 600))
        n_bits = int(rng.choice([8, 64, 100, 256, 1024]))
        store = random_store(rng, n, n_bits, n_classes=int(rng.integers(2, 5)), unlabeled_rate=0.2,
                             dup_rate=0.1, leaf_size=int(rng.integers(1, 50)), build_seed=s)
        path = tmp_path / f"{s}.snap"
        save_snapshot(store, path)
        back = load_snapshot(path)
        failures += snapshot_bytes(back) != path.read_bytes()
        t1, t2 = build_ball_tree(store), build_ball_tree(back)
        for _ in range(5):
            q = random_code(rng, n_bits)
            k = int(rng.integers(1, 20))
            failures += knn_ball_tree(t1, q, k) != knn_ball_tree(t2, q, k)
    record("persistence", failures == 0, f"{failures} mismatches over 50 stores (re-save bytes + 5 queries each)")


def test_cli_service_parity(tmp_path):
    src = tmp_path / "db.efem"
    write_synthetic(src, n_polyps=250, dim=128, seed=3)
    snap = tmp_path / "db.snap"
    run_ingest(src, None, snap)
    rng = np.random.default_rng(13)
    server = QueryServer(ServiceConfig(str(snap), port=0))
    threading.Thread(target=server.serve_forever, daemon=True).start()
    url = f"http://127.0.0.1:{server.server_address[1]}/v1/query"
    compared = equal = 0
    try:
        # four settings x five query polyps: random view subsets plus fresh noise
        for metric, exclude, k in (("hamming", False, 6), ("hamming", True, 3), ("cosine", False, 10), ("cosine", True, 1)):
            views, _ = synthetic_views(SyntheticConfig(n_polyps=250, dim=128), 3)
            pids = rng.choice(250, 5, replace=False)
            rows = []
            for pid in pids:
                kept = sorted(rng.choice(4, int(rng.integers(1, 5)), replace=False).tolist())
                for v in kept:
                    rows.append((int(pid), v, views[pid, v] + 0.3 * rng.standard_normal(128)))
            qfile = tmp_path / f"q-{metric}-{exclude}.efem"
            write_embeddings(qfile, range(len(rows)), [r[0] for r in rows], [r[1] for r in rows], -1,
                             np.stack([r[2] for r in rows]))
            lines = run_query(snap, qfile, k=k, metric=metric, exclude_self=exclude)
            for line, pid in zip(lines, sorted(int(p) for p in pids)):
                vecs = np.stack([r[2] for r in rows if r[0] == pid]).astype(np.float32)
                body = {"embeddings": vecs.tolist(), "k": k, "metric": metric, "polyp_id": pid, "exclude_self": exclude}
                req = urllib.request.Request(url, data=json.dumps(body).encode(), method="POST")
                with urllib.request.urlopen(req, timeout=30) as resp:
                    compared += 1
                    equal += resp.read() == line.encode("utf-8")
    finally:
        server.shutdown()
        server.server_close()
    record("CLI/service parity", compared == 20 and equal == 20, f"{equal}/{compared} response bodies byte-identical")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))

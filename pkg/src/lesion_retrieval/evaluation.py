"""Re-identification and cross-validated classification protocols."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import UNLABELED, CaseStore, MultiViewScene, ViewEmbedding
from .diagnosis import DEFAULT_K, CaseDatabase, majority_vote
from .fusion import FusionConfig, fuse_matrix, fuse_store
from .hashing import hamming_scan, quantize_matrix
from .metrics import (
    ReidTask,
    acc_at_1,
    f1_and_acc,
    kfold_split,
    micro_average_precision,
    recall_at_p90,
    roc_auc,
)

# view slots of a four-view scene
Q1, Q2, R1, R2 = 0, 1, 2, 3
VIEW_NAMES = {Q1: "Q1", Q2: "Q2", R1: "R1", R2: "R2"}

# query/reference view subsets, in the row order of the multi-view table
VIEW_PROTOCOL = (
    ((Q1,), (R1,)),
    ((Q1,), (R2,)),
    ((Q2,), (R1,)),
    ((Q2,), (R2,)),
    ((Q1,), (R1, R2)),
    ((Q2,), (R1, R2)),
    ((Q1, Q2), (R1,)),
    ((Q1, Q2), (R2,)),
    ((Q1, Q2), (R1, R2)),
)


@dataclass
class MetricsReport:
    uap: float
    acc_at_1: float
    recall_at_p90: float
    auc: float | None = None
    acc: float | None = None
    f1: float | None = None
    queries_per_sec: float | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None and v != {}}

    def to_json(self) -> str:
        return canonical_json(self.to_dict())


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SyntheticConfig:
    """Clustered multi-view generator.

    Each class has a centroid; each polyp sits at ``polyp_spread`` around
    its class centroid.  A view is the polyp center plus Gaussian noise of
    scale ``view_noise``, with a random ``occlusion_rate`` fraction of its
    coordinates further corrupted by noise of scale ``occlusion_scale``
    (glare, occlusion and blur hit parts of a frame, not all of it).
    """

    n_polyps: int = 500
    n_views: int = 4
    dim: int = 256
    n_classes: int = 2
    class_spread: float = 0.6
    polyp_spread: float = 1.0
    view_noise: float = 1.0
    occlusion_rate: float = 0.2
    occlusion_scale: float = 3.5


def synthetic_views(cfg: SyntheticConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (views[n_polyps, n_views, dim], labels[n_polyps])."""
    rng = np.random.default_rng(seed)
    class_centers = rng.standard_normal((cfg.n_classes, cfg.dim)) * cfg.class_spread
    labels = rng.integers(cfg.n_classes, size=cfg.n_polyps)
    centers = class_centers[labels] + rng.standard_normal((cfg.n_polyps, cfg.dim)) * cfg.polyp_spread
    shape = (cfg.n_polyps, cfg.n_views, cfg.dim)
    views = centers[:, None, :] + rng.standard_normal(shape) * cfg.view_noise
    occluded = rng.random(shape) < cfg.occlusion_rate
    views += occluded * rng.standard_normal(shape) * cfg.occlusion_scale
    return views, labels


def synthetic_scenes(cfg: SyntheticConfig, seed: int) -> list[MultiViewScene]:
    views, labels = synthetic_views(cfg, seed)
    return [
        MultiViewScene(
            p,
            tuple(ViewEmbedding(p, v, views[p, v]) for v in range(cfg.n_views)),
            int(labels[p]),
        )
        for p in range(cfg.n_polyps)
    ]


# ---------------------------------------------------------------- re-identification


def similarity_matrix(queries: np.ndarray, references: np.ndarray, metric: str) -> np.ndarray:
    """Cosine for floats or ``1 - 2h/K`` on sign codes, so both share one scale."""
    if metric == "cosine":
        qn = queries / np.linalg.norm(queries, axis=1, keepdims=True)
        rn = references / np.linalg.norm(references, axis=1, keepdims=True)
        return qn @ rn.T
    if metric == "hamming":
        n_bits = queries.shape[1]
        qc, rc = quantize_matrix(queries), quantize_matrix(references)
        out = np.empty((len(qc), len(rc)), dtype=np.int64)
        for i in range(len(qc)):
            hamming_scan(rc, qc[i], out[i])
        return 1.0 - 2.0 * out / n_bits
    raise ValueError(f"unknown metric {metric!r}")


def reid_scores(task: ReidTask, scores: np.ndarray) -> MetricsReport:
    return MetricsReport(
        uap=micro_average_precision(task, scores),
        acc_at_1=acc_at_1(task, scores),
        recall_at_p90=recall_at_p90(task, scores),
    )


def reid_benchmark(
    scenes,
    query_views,
    ref_views,
    metric: str = "cosine",
    cfg: FusionConfig = FusionConfig(),
) -> MetricsReport:
    """Fuse query and reference view subsets of every scene, then score re-identification."""
    scenes = list(scenes)
    queries = fuse_store(scenes, cfg, query_views)
    refs = fuse_store(scenes, cfg, ref_views)
    task = ReidTask.identity([q.polyp_id for q in queries], [r.polyp_id for r in refs])
    t0 = time.perf_counter()
    scores = similarity_matrix(np.stack([q.values for q in queries]), np.stack([r.values for r in refs]), metric)
    elapsed = time.perf_counter() - t0
    report = reid_scores(task, scores)
    report.queries_per_sec = len(queries) / elapsed if elapsed > 0 else None
    report.meta = {
        "metric": metric,
        "query_views": [VIEW_NAMES.get(v, str(v)) for v in query_views],
        "ref_views": [VIEW_NAMES.get(v, str(v)) for v in ref_views],
    }
    return report


def reid_from_views(
    views: np.ndarray, query_views, ref_views, metric: str = "cosine", cfg: FusionConfig = FusionConfig()
) -> MetricsReport:
    """Vectorized :func:`reid_benchmark` over a (polyps, views, D) array; polyp id = row."""
    q = fuse_matrix(views[:, list(query_views)], cfg)
    r = fuse_matrix(views[:, list(ref_views)], cfg)
    ids = range(len(views))
    return reid_scores(ReidTask.identity(ids, ids), similarity_matrix(q, r, metric))


def view_protocol_table(scenes, metric: str = "cosine", cfg: FusionConfig = FusionConfig()) -> list[MetricsReport]:
    scenes = list(scenes)
    return [reid_benchmark(scenes, qv, rv, metric, cfg) for qv, rv in VIEW_PROTOCOL]


def format_view_table(reports: list[MetricsReport]) -> str:
    header = f"{'Q1':>3} {'Q2':>3} {'R1':>3} {'R2':>3} | {'uAP':>6} {'Acc@1':>6} {'R@P90':>6}"
    lines = [header, "-" * len(header)]
    for rep in reports:
        marks = [
            "x" if name in rep.meta["query_views"] + rep.meta["ref_views"] else ""
            for name in ("Q1", "Q2", "R1", "R2")
        ]
        lines.append(
            " ".join(f"{m:>3}" for m in marks)
            + f" | {rep.uap:6.3f} {rep.acc_at_1:6.3f} {rep.recall_at_p90:6.3f}"
        )
    return "\n".join(lines)


# ---------------------------------------------------------------- classification


@dataclass
class FoldReport:
    fold: int
    n_test: int
    acc: float
    auc: float | None
    f1: float | None


def classification_cv(
    store: CaseStore, folds: int = 5, seed: int = 0, k: int = DEFAULT_K, db: CaseDatabase | None = None
) -> tuple[list[FoldReport], dict]:
    """Leave-fold-out kNN: each test fold is queried against the other folds only."""
    if store.label_space is None:
        raise ValueError("classification needs a labeled store")
    db = CaseDatabase(store) if db is None else db
    labeled = [r for r in store.records if r.label != UNLABELED]
    n_classes = store.label_space.num_classes
    splits = kfold_split([r.record_id for r in labeled], folds, seed)
    reports = []
    for fold, (_, test_ids) in enumerate(splits):
        excluded = set(test_ids)
        preds, scores, truth = [], [], []
        for rid in test_ids:
            rec = store.by_id[rid]
            neighbors = db.search_code(rec.code, k, exclude_ids=excluded)
            d = majority_vote(neighbors, db.label_lookup, n_classes)
            preds.append(d.predicted_label)
            scores.append(d.class_scores[1] if n_classes == 2 else np.nan)
            truth.append(rec.label)
        preds, truth = np.asarray(preds), np.asarray(truth)
        auc = f1 = None
        if n_classes == 2:
            f1, _ = f1_and_acc(preds, truth)
            if len(set(truth.tolist())) == 2:
                auc = roc_auc(scores, truth)
        reports.append(FoldReport(fold, len(test_ids), float(np.mean(preds == truth)), auc, f1))

    def mean_of(attr):
        vals = [getattr(r, attr) for r in reports if getattr(r, attr) is not None]
        return float(np.mean(vals)) if vals else None

    summary = {"folds": folds, "k": k, "seed": seed, "acc": mean_of("acc"), "auc": mean_of("auc"), "f1": mean_of("f1")}
    return reports, summary


def format_cls_table(reports: list[FoldReport], summary: dict) -> str:
    def cell(v):
        return f"{v:6.3f}" if v is not None else f"{'-':>6}"

    lines = [f"{'fold':>4} {'n':>4} | {'AUC':>6} {'ACC':>6} {'F1':>6}", "-" * 32]
    for r in reports:
        lines.append(f"{r.fold:>4} {r.n_test:>4} | {cell(r.auc)} {cell(r.acc)} {cell(r.f1)}")
    lines.append(f"{'mean':>4} {'':>4} | {cell(summary['auc'])} {cell(summary['acc'])} {cell(summary['f1'])}")
    return "\n".join(lines)

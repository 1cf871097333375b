"""Ingest and query pipelines shared by the CLI and the HTTP service."""

from __future__ import annotations

import logging
from collections import defaultdict

import numpy as np

from .core import UNLABELED, LabelSpace, LesionRecord, MultiViewScene, ViewEmbedding, infer_label_space, make_store
from .diagnosis import DEFAULT_K, METRICS, CaseDatabase, DiagnosisError, majority_vote
from .evaluation import canonical_json
from .formats import EmbeddingTable, read_embeddings, read_label_sidecar
from .fusion import FusionConfig, fuse_average
from .hashing import sign_quantize
from .index import DEFAULT_LEAF_SIZE, load_snapshot, save_snapshot

log = logging.getLogger(__name__)


class IngestError(ValueError):
    code = "ingest_error"


class EmptyInputError(IngestError):
    code = "no_records"


class DimensionMismatchError(IngestError):
    code = "dimension_mismatch"


class DuplicateViewError(IngestError):
    code = "duplicate_view"


class UnknownLabelError(IngestError):
    code = "unknown_label"


class QueryError(ValueError):
    """A request the service answers with HTTP 400."""

    def __init__(self, code: str, message: str):
        self.code = code
        super().__init__(message)


def group_scenes(table: EmbeddingTable) -> list[MultiViewScene]:
    """Group view rows into scenes by polyp id (ascending), views by view id."""
    groups: dict[int, list] = defaultdict(list)
    seen = set()
    for row in table.rows:
        key = (int(row["polyp_id"]), int(row["view_id"]))
        if key in seen:
            raise DuplicateViewError(f"duplicate view: polyp {key[0]} view {key[1]}")
        seen.add(key)
        label = int(row["label"])
        if label < UNLABELED:
            raise UnknownLabelError(f"unknown label value {label} for polyp {key[0]}")
        groups[key[0]].append((key[1], label, row["values"].astype(np.float64)))
    scenes = []
    for polyp in sorted(groups):
        views = sorted(groups[polyp], key=lambda v: v[0])
        labels = {lab for _, lab, _ in views if lab != UNLABELED}
        if len(labels) > 1:
            raise UnknownLabelError(f"views of polyp {polyp} disagree on label: {sorted(labels)}")
        scenes.append(
            MultiViewScene(
                polyp,
                tuple(ViewEmbedding(polyp, vid, vals) for vid, _, vals in views),
                labels.pop() if labels else UNLABELED,
            )
        )
    return scenes


def run_ingest(
    embeddings_path,
    labels_path,
    out_path,
    fusion: FusionConfig = FusionConfig(),
    hash_bits: int | None = None,
    leaf_size: int = DEFAULT_LEAF_SIZE,
    build_seed: int = 0,
) -> int:
    """Group, fuse, quantize and snapshot; returns the record count."""
    table = read_embeddings(embeddings_path)
    if len(table) == 0:
        raise EmptyInputError("no records")
    k_bits = table.dim if hash_bits is None else hash_bits
    if not 1 <= k_bits <= table.dim:
        raise DimensionMismatchError(f"hash length {k_bits} must lie in [1, D={table.dim}]")
    scenes = group_scenes(table)
    if labels_path is not None:
        sidecar = read_label_sidecar(labels_path)
        present = {s.polyp_id for s in scenes}
        for polyp in sorted(set(sidecar) - present):
            log.warning("label sidecar names unknown polyp %d; ignored", polyp)
        relabeled = []
        for s in scenes:
            if s.polyp_id in sidecar:
                new = sidecar[s.polyp_id]
                if new < UNLABELED:
                    raise UnknownLabelError(f"unknown label value {new} for polyp {s.polyp_id}")
                if s.label != UNLABELED and new != s.label:
                    log.warning("polyp %d: sidecar label %d overrides embedded label %d", s.polyp_id, new, s.label)
                s = MultiViewScene(s.polyp_id, s.views, new)
            relabeled.append(s)
        scenes = relabeled
    records = []
    for s in scenes:
        fused = fuse_average(s, fusion)
        records.append(LesionRecord(s.polyp_id, s.polyp_id, sign_quantize(fused.values[:k_bits]), s.label))
    label_space = None
    if any(r.label != UNLABELED for r in records):
        label_space = infer_label_space(records)
        label_space = LabelSpace(max(label_space.num_classes, 2))
    store = make_store(records, hash_bits=k_bits, dimension=table.dim, label_space=label_space,
                       leaf_size=leaf_size, build_seed=build_seed)
    save_snapshot(store, out_path)
    return len(store)


def open_database(snapshot_path) -> CaseDatabase:
    return CaseDatabase(load_snapshot(snapshot_path))


def query_payload(
    db: CaseDatabase,
    embeddings,
    k: int = DEFAULT_K,
    metric: str = "hamming",
    polyp_id: int | None = None,
    exclude_self: bool = False,
    fusion: FusionConfig = FusionConfig(),
) -> dict:
    """Fuse the views of one query lesion, retrieve, vote, and build the response object."""
    if metric not in METRICS:
        raise QueryError("bad_metric", f"metric must be one of {list(METRICS)}")
    if isinstance(k, bool) or not isinstance(k, (int, np.integer)) or k < 1:
        raise QueryError("bad_k", "k must be a positive integer")
    views = np.asarray(embeddings, dtype=np.float32)
    if views.ndim != 2 or views.shape[0] == 0:
        raise QueryError("bad_embeddings", "embeddings must be a non-empty list of vectors")
    if views.shape[1] != db.store.hash_bits:
        raise QueryError(
            "dimension_mismatch",
            f"embedding dimension {views.shape[1]} does not match store dimension {db.store.hash_bits}",
        )
    if not np.all(np.isfinite(views)):
        raise QueryError("bad_embeddings", "embeddings contain non-finite values")
    pid = -1 if polyp_id is None else int(polyp_id)
    scene = MultiViewScene(pid, tuple(ViewEmbedding(pid, i, v.astype(np.float64)) for i, v in enumerate(views)))
    try:
        fused = fuse_average(scene, fusion)
    except ValueError as exc:
        raise QueryError("degenerate_query", str(exc)) from None
    exclude = None
    if exclude_self:
        if polyp_id is None:
            raise QueryError("missing_polyp_id", "exclude_self requires polyp_id")
        exclude = {int(polyp_id)}
    neighbors = db.search(fused, int(k), metric=metric, exclude_ids=exclude)
    diagnosis = None
    if db.store.label_space is not None and len(neighbors):
        try:
            d = majority_vote(neighbors, db.label_lookup, db.n_classes)
            diagnosis = {"label": d.predicted_label, "scores": list(d.class_scores), "votes": list(d.class_votes)}
        except DiagnosisError:
            diagnosis = None
    by_id = db.store.by_id
    return {
        "diagnosis": diagnosis,
        "k": int(k),
        "metric": metric,
        "neighbors": [
            {
                "distance": n.distance,
                "label": by_id[n.record_id].label,
                "polyp_id": by_id[n.record_id].polyp_id,
                "record_id": n.record_id,
            }
            for n in neighbors.entries
        ],
    }


def run_query(
    snapshot_path,
    input_path,
    k: int = DEFAULT_K,
    metric: str = "hamming",
    exclude_self: bool = False,
    fusion: FusionConfig = FusionConfig(),
    db: CaseDatabase | None = None,
) -> list[str]:
    """One canonical JSON document per query polyp, in ascending polyp id order."""
    db = open_database(snapshot_path) if db is None else db
    scenes = group_scenes(read_embeddings(input_path))
    out = []
    for s in scenes:
        views = np.stack([v.values for v in s.views]).astype(np.float32)
        out.append(canonical_json(query_payload(db, views, k, metric, s.polyp_id, exclude_self, fusion)))
    return out

"""kNN retrieval over a case store and majority-vote diagnosis."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .core import UNLABELED, CaseStore, MultiViewScene, SceneEmbedding, StoreError
from .fusion import FusionConfig, fuse_average, l2_normalize
from .hashing import HashCode, sign_quantize
from .index import (
    BallTreeIndex,
    RankedNeighbors,
    build_ball_tree,
    knn_ball_tree,
    knn_cosine_scan,
)

DEFAULT_K = 6
METRICS = ("hamming", "cosine")


class DiagnosisError(ValueError):
    pass


@dataclass(frozen=True)
class Diagnosis:
    predicted_label: int
    class_votes: tuple[int, ...]
    class_scores: tuple[float, ...]
    neighbors: RankedNeighbors
    k_used: int


def class_score_vector(d: Diagnosis) -> np.ndarray:
    votes = np.asarray(d.class_votes, dtype=np.float64)
    total = votes.sum()
    return votes / total if total else votes


def majority_vote(neighbors: RankedNeighbors, labels, n_classes: int) -> Diagnosis:
    """Vote over labeled neighbors.

    Ties go to the tied class whose first member appears earliest in the
    ranking; unlabeled neighbors do not vote but stay in ``neighbors``.
    """
    if n_classes < 2:
        raise DiagnosisError("majority vote needs at least two classes")
    votes = np.zeros(n_classes, dtype=np.int64)
    ranked_labels = []
    for rid in neighbors.record_ids:
        lab = int(labels[int(rid)])
        if lab == UNLABELED:
            continue
        if not 0 <= lab < n_classes:
            raise DiagnosisError(f"neighbor {int(rid)} has label {lab} outside [0, {n_classes})")
        votes[lab] += 1
        ranked_labels.append(lab)
    if not ranked_labels:
        raise DiagnosisError("no labeled evidence")
    tied = set(np.flatnonzero(votes == votes.max()).tolist())
    winner = next(lab for lab in ranked_labels if lab in tied)
    scores = votes / votes.sum()
    return Diagnosis(
        predicted_label=int(winner),
        class_votes=tuple(int(v) for v in votes),
        class_scores=tuple(float(s) for s in scores),
        neighbors=neighbors,
        k_used=len(neighbors),
    )


class CaseDatabase:
    """An immutable store with its ball tree; safe to query from many threads."""

    def __init__(self, store: CaseStore, index: BallTreeIndex | None = None):
        if len(store) == 0:
            raise StoreError("cannot index empty store")
        self.store = store
        self.index = build_ball_tree(store) if index is None else index

    @property
    def n_classes(self) -> int:
        if self.store.label_space is None:
            raise DiagnosisError("store has no label space")
        return self.store.label_space.num_classes

    @cached_property
    def label_lookup(self) -> dict[int, int]:
        return {r.record_id: r.label for r in self.store.records}

    @cached_property
    def sign_matrix(self) -> np.ndarray:
        """Stored codes as unit-norm +/-1 float rows (for cosine ranking)."""
        cm = self.store.code_matrix
        bits = np.unpackbits(cm.words.view(np.uint8), axis=1, bitorder="little")[:, : cm.n_bits]
        return (bits.astype(np.float64) * 2.0 - 1.0) / np.sqrt(cm.n_bits)

    def search_code(self, code: HashCode, k: int, exclude_ids=None) -> RankedNeighbors:
        return knn_ball_tree(self.index, code, k, exclude_ids=exclude_ids)

    def search(self, embedding: SceneEmbedding, k: int, metric: str = "hamming", exclude_ids=None):
        if embedding.dim != self.store.hash_bits:
            raise DiagnosisError(
                f"query dimension {embedding.dim} does not match store hash length {self.store.hash_bits}"
            )
        if metric == "hamming":
            return self.search_code(sign_quantize(embedding), k, exclude_ids)
        if metric == "cosine":
            return knn_cosine_scan(
                self.sign_matrix, self.store.record_ids, l2_normalize(embedding.values), k, exclude_ids
            )
        raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def diagnose(
    db: CaseDatabase,
    query,
    k: int = DEFAULT_K,
    cfg: FusionConfig = FusionConfig(),
    exclude_ids=None,
    metric: str = "hamming",
) -> Diagnosis:
    """Fuse (if multi-view), quantize, retrieve and vote."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if isinstance(query, MultiViewScene):
        query = fuse_average(query, cfg)
    elif not isinstance(query, SceneEmbedding):
        query = SceneEmbedding(-1, np.asarray(query, dtype=np.float64))
    neighbors = db.search(query, k, metric=metric, exclude_ids=exclude_ids)
    if len(neighbors) == 0:
        raise DiagnosisError("exclusion leaves no candidate records")
    return majority_vote(neighbors, db.label_lookup, db.n_classes)

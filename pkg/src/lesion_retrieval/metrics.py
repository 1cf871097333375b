"""Retrieval and classification metrics.

Re-identification metrics take a :class:`ReidTask` and a score matrix of
shape (queries, references), higher = more similar.  Every query has
exactly one true reference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class ReidTask:
    query_ids: tuple[int, ...]
    reference_ids: tuple[int, ...]
    ground_truth: dict

    def __post_init__(self):
        object.__setattr__(self, "query_ids", tuple(int(q) for q in self.query_ids))
        object.__setattr__(self, "reference_ids", tuple(int(r) for r in self.reference_ids))
        if len(set(self.query_ids)) != len(self.query_ids):
            raise MetricError("duplicate query ids")
        refs = set(self.reference_ids)
        if len(refs) != len(self.reference_ids):
            raise MetricError("duplicate reference ids")
        for q in self.query_ids:
            if q not in self.ground_truth:
                raise MetricError(f"missing ground truth for query {q}")
            if self.ground_truth[q] not in refs:
                raise MetricError(f"ground truth reference {self.ground_truth[q]} of query {q} is absent")

    @classmethod
    def identity(cls, query_ids, reference_ids) -> "ReidTask":
        """Each query's true match is the reference with the same id."""
        return cls(tuple(query_ids), tuple(reference_ids), {int(q): int(q) for q in query_ids})

    def truth_matrix(self) -> np.ndarray:
        col = {r: c for c, r in enumerate(self.reference_ids)}
        truth = np.zeros((len(self.query_ids), len(self.reference_ids)), dtype=bool)
        for row, q in enumerate(self.query_ids):
            truth[row, col[self.ground_truth[q]]] = True
        return truth


@dataclass(frozen=True)
class PooledRanking:
    query_ids: np.ndarray
    reference_ids: np.ndarray
    scores: np.ndarray
    is_match: np.ndarray


def _check_scores(task: ReidTask, scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (len(task.query_ids), len(task.reference_ids)):
        raise MetricError(
            f"score matrix shape {scores.shape} does not cover "
            f"{len(task.query_ids)} queries x {len(task.reference_ids)} references"
        )
    if not len(task.query_ids):
        raise MetricError("task has no queries")
    return scores


def pooled_ranking(task: ReidTask, scores) -> PooledRanking:
    """All query/reference pairs by descending score, ties by (query, reference) id."""
    scores = _check_scores(task, scores)
    q = np.repeat(np.asarray(task.query_ids, dtype=np.int64), len(task.reference_ids))
    r = np.tile(np.asarray(task.reference_ids, dtype=np.int64), len(task.query_ids))
    s = scores.ravel()
    order = np.lexsort((r, q, -s))
    match = task.truth_matrix().ravel()
    return PooledRanking(q[order], r[order], s[order], match[order])


def micro_average_precision(task: ReidTask, scores, macro: bool = False) -> float:
    """Average precision of the pooled ranking (or mean per-query AP with ``macro``)."""
    if macro:
        return float(np.mean(1.0 / _true_match_ranks(task, scores)))
    ranking = pooled_ranking(task, scores)
    hits = np.cumsum(ranking.is_match)
    ranks = np.arange(1, len(hits) + 1)
    precision_at_hits = hits[ranking.is_match] / ranks[ranking.is_match]
    return float(precision_at_hits.sum() / len(task.query_ids))


def _true_match_ranks(task: ReidTask, scores) -> np.ndarray:
    scores = _check_scores(task, scores)
    truth = task.truth_matrix()
    ref_ids = np.asarray(task.reference_ids)
    ranks = np.empty(len(task.query_ids))
    for row in range(len(task.query_ids)):
        order = np.lexsort((ref_ids, -scores[row]))
        ranks[row] = 1 + int(np.flatnonzero(truth[row, order])[0])
    return ranks


def acc_at_1(task: ReidTask, scores) -> float:
    """Fraction of queries whose top reference (ties: lowest id) is the true match."""
    return float(np.mean(_true_match_ranks(task, scores) == 1))


def recall_at_precision(task: ReidTask, scores, precision: float = 0.9) -> float:
    ranking = pooled_ranking(task, scores)
    hits = np.cumsum(ranking.is_match)
    ranks = np.arange(1, len(hits) + 1)
    ok = hits >= precision * ranks - 1e-12
    if not ok.any():
        return 0.0
    return float(hits[ok].max() / len(task.query_ids))


def recall_at_p90(task: ReidTask, scores) -> float:
    """Largest recall over pooled prefixes whose precision is at least 0.9."""
    ranking = pooled_ranking(task, scores)
    hits = np.cumsum(ranking.is_match)
    ranks = np.arange(1, len(hits) + 1)
    ok = 10 * hits >= 9 * ranks
    if not ok.any():
        return 0.0
    return float(hits[ok].max() / len(task.query_ids))


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with half credit for ties; class 1 is positive."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise MetricError("scores and labels differ in length")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes present")
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    # average 1-based rank of each distinct value
    upper = np.cumsum(counts)
    avg_rank = upper - (counts - 1) / 2.0
    ranks = avg_rank[inverse]
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def f1_and_acc(predictions, labels) -> tuple[float, float]:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape or predictions.size == 0:
        raise MetricError("predictions and labels must be non-empty and equal length")
    acc = float(np.mean(predictions == labels))
    tp = int(np.sum((predictions == 1) & (labels == 1)))
    fp = int(np.sum((predictions == 1) & (labels != 1)))
    fn = int(np.sum((predictions != 1) & (labels == 1)))
    f1 = 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)
    return float(f1), acc


def kfold_split(ids, folds: int, seed: int = 0) -> list[tuple[list[int], list[int]]]:
    """Shuffle ids under ``seed`` and cut them into ``folds`` near-equal test sets."""
    ids = [int(i) for i in ids]
    if len(set(ids)) != len(ids):
        raise MetricError("ids must be unique")
    if folds < 2:
        raise MetricError("need at least two folds")
    if folds > len(ids):
        raise MetricError(f"{folds} folds requested for only {len(ids)} ids")
    perm = np.random.default_rng(seed).permutation(len(ids))
    shuffled = np.asarray(sorted(ids), dtype=np.int64)[perm]
    splits = []
    for test in np.array_split(shuffled, folds):
        test_set = set(test.tolist())
        train = sorted(i for i in ids if i not in test_set)
        splits.append((train, sorted(test_set)))
    return splits

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_store
from lesion_retrieval.core import LabelSpace, LesionRecord, MultiViewScene, SceneEmbedding, ViewEmbedding, make_store
from lesion_retrieval.diagnosis import CaseDatabase, DiagnosisError, class_score_vector, diagnose, majority_vote
from lesion_retrieval.hashing import sign_quantize
from lesion_retrieval.index import RankedNeighbors


def ranked(ids):
    return RankedNeighbors(np.array(ids, dtype=np.uint64), np.arange(len(ids), dtype=np.float64), len(ids))


def test_clear_majority():
    d = majority_vote(ranked([1, 2, 3]), {1: 0, 2: 1, 3: 1}, 2)
    assert d.predicted_label == 1 and d.class_votes == (1, 2)
    assert np.allclose(class_score_vector(d), [1 / 3, 2 / 3])


def test_tie_goes_to_nearest_class():
    labels = {1: 1, 2: 0, 3: 0, 4: 1}
    assert majority_vote(ranked([1, 2, 3, 4]), labels, 2).predicted_label == 1
    assert majority_vote(ranked([2, 1, 3, 4]), labels, 2).predicted_label == 0


def test_unlabeled_neighbors_do_not_vote():
    d = majority_vote(ranked([1, 2, 3]), {1: -1, 2: -1, 3: 0}, 3)
    assert d.predicted_label == 0 and d.class_votes == (1, 0, 0)
    assert len(d.neighbors) == 3
    with pytest.raises(DiagnosisError, match="no labeled evidence"):
        majority_vote(ranked([1, 2]), {1: -1, 2: -1}, 2)


def test_needs_two_classes():
    with pytest.raises(DiagnosisError):
        majority_vote(ranked([1]), {1: 0}, 1)


def small_db():
    recs = [
        LesionRecord(i, 100 + i, sign_quantize(np.array([1.0, 1.0, 1.0, 1.0]) * (1 if i < 3 else -1)), int(i >= 3))
        for i in range(6)
    ]
    return CaseDatabase(make_store(recs, hash_bits=4, label_space=LabelSpace(2)))


def test_diagnose_from_views_and_vectors():
    db = small_db()
    views = tuple(ViewEmbedding(7, v, np.array([1.0, 2.0, 0.5, 0.1])) for v in range(2))
    d = diagnose(db, MultiViewScene(7, views), k=3)
    assert d.predicted_label == 0 and d.class_votes == (3, 0)
    assert diagnose(db, -np.ones(4), k=3).predicted_label == 1
    assert diagnose(db, SceneEmbedding(1, -np.ones(4)), k=3, metric="cosine").predicted_label == 1


def test_diagnose_errors():
    db = small_db()
    with pytest.raises(DiagnosisError, match="dimension"):
        diagnose(db, np.ones(5))
    with pytest.raises(ValueError):
        diagnose(db, np.ones(4), k=0)
    with pytest.raises(DiagnosisError, match="no candidate"):
        diagnose(db, np.ones(4), exclude_ids=set(range(6)))
    with pytest.raises(ValueError, match="metric"):
        db.search(SceneEmbedding(0, np.ones(4)), 1, metric="l2")


def test_exclusion_removes_self():
    db = small_db()
    out = db.search(SceneEmbedding(0, np.ones(4)), 3, exclude_ids={0})
    assert 0 not in out.record_ids.tolist()


@given(st.integers(2, 150), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_cosine_ranking_agrees_with_hamming_on_codes(n, k, seed):
    # for a +/-1 query, cosine to +/-1 codes is an affine map of Hamming distance
    rng = np.random.default_rng(seed)
    store = random_store(rng, n, 64)
    db = CaseDatabase(store)
    q = rng.choice([-1.0, 1.0], 64)
    h = db.search(SceneEmbedding(0, q), k, metric="hamming")
    c = db.search(SceneEmbedding(0, q), k, metric="cosine")
    assert h.record_ids.tolist() == c.record_ids.tolist()
    assert np.allclose(c.distances, 2.0 * h.distances / 64)


@given(st.lists(st.integers(-1, 2), min_size=1, max_size=15))
def test_vote_is_consistent(labels):
    ids = list(range(len(labels)))
    lookup = dict(zip(ids, labels))
    if all(x == -1 for x in labels):
        with pytest.raises(DiagnosisError):
            majority_vote(ranked(ids), lookup, 3)
        return
    d = majority_vote(ranked(ids), lookup, 3)
    assert sum(d.class_votes) == sum(x >= 0 for x in labels)
    assert d.class_votes[d.predicted_label] == max(d.class_votes)
    assert abs(sum(d.class_scores) - 1.0) < 1e-12

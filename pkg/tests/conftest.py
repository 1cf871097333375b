import numpy as np
import pytest
from hypothesis import settings

from lesion_retrieval.core import LabelSpace, LesionRecord, make_store
from lesion_retrieval.evaluation import SyntheticConfig, synthetic_views
from lesion_retrieval.formats import write_embeddings
from lesion_retrieval.hashing import HashCode, pack_bits

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

# filled by tests/test_acceptance.py, printed once at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_code(rng, n_bits: int) -> HashCode:
    return HashCode(n_bits, pack_bits(rng.integers(0, 2, n_bits).astype(bool)))


def random_store(rng, n: int, n_bits: int, n_classes: int = 2, unlabeled_rate: float = 0.0, dup_rate: float = 0.0,
                 leaf_size: int = 32, build_seed: int = 0):
    """Store with shuffled non-contiguous ids, optional duplicate codes and unlabeled records."""
    ids = rng.choice(10 * n + 10, size=n, replace=False)
    bits = rng.integers(0, 2, (n, n_bits)).astype(bool)
    if dup_rate and n > 1:
        dup = rng.random(n) < dup_rate
        bits[dup] = bits[rng.integers(0, n, int(dup.sum()))]
    words = pack_bits(bits)
    labels = rng.integers(0, n_classes, n)
    labels[rng.random(n) < unlabeled_rate] = -1
    records = [
        LesionRecord(int(ids[i]), int(ids[i]) + 7, HashCode(n_bits, words[i]), int(labels[i])) for i in range(n)
    ]
    return make_store(records, hash_bits=n_bits, label_space=LabelSpace(n_classes),
                      leaf_size=leaf_size, build_seed=build_seed)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def write_synthetic(path, n_polyps=40, n_views=4, dim=32, seed=0, labeled=True, polyp_offset=0):
    """Synthetic multi-view embedding file; returns (views, labels)."""
    views, labels = synthetic_views(SyntheticConfig(n_polyps=n_polyps, n_views=n_views, dim=dim), seed)
    p, v = np.meshgrid(np.arange(n_polyps), np.arange(n_views), indexing="ij")
    row_labels = np.repeat(labels, n_views) if labeled else -1
    write_embeddings(path, np.arange(p.size), p.ravel() + polyp_offset, v.ravel(), row_labels, views.reshape(-1, dim))
    return views.astype(np.float32), labels

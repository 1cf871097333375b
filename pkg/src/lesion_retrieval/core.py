"""Domain types shared by fusion, indexing, diagnosis and evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .hashing import CodeMatrix, HashCode, n_words

UNLABELED = -1


class StoreError(ValueError):
    """Raised for structurally invalid stores or store operations."""


def _finite_vector(values, what: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 1:
        raise ValueError(f"{what} must be a non-empty 1-D vector")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite values")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ViewEmbedding:
    polyp_id: int
    view_id: int
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _finite_vector(self.values, "view embedding"))

    @property
    def dim(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class MultiViewScene:
    polyp_id: int
    views: tuple[ViewEmbedding, ...]
    label: int = UNLABELED

    def __post_init__(self):
        views = tuple(self.views)
        if not views:
            raise ValueError(f"scene {self.polyp_id} has no views")
        dims = {v.dim for v in views}
        if len(dims) != 1:
            raise ValueError(f"scene {self.polyp_id} mixes dimensions {sorted(dims)}")
        if any(v.polyp_id != self.polyp_id for v in views):
            raise ValueError(f"scene {self.polyp_id} contains views of another polyp")
        view_ids = [v.view_id for v in views]
        if len(set(view_ids)) != len(view_ids):
            raise ValueError(f"scene {self.polyp_id} has duplicate view ids")
        if self.label < UNLABELED:
            raise ValueError(f"invalid label {self.label}")
        object.__setattr__(self, "views", views)

    @property
    def dim(self) -> int:
        return self.views[0].dim

    @property
    def view_ids(self) -> tuple[int, ...]:
        return tuple(v.view_id for v in self.views)


@dataclass(frozen=True)
class SceneEmbedding:
    polyp_id: int
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _finite_vector(self.values, "scene embedding"))

    @property
    def dim(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class LabelSpace:
    num_classes: int
    class_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if self.class_names is not None:
            names = tuple(self.class_names)
            if len(names) != self.num_classes:
                raise ValueError("class_names must have one entry per class")
            object.__setattr__(self, "class_names", names)

    def contains(self, label: int) -> bool:
        return label == UNLABELED or 0 <= label < self.num_classes


@dataclass(frozen=True)
class LesionRecord:
    record_id: int
    polyp_id: int
    code: HashCode
    label: int = UNLABELED


@dataclass(frozen=True)
class CaseStore:
    """The reference database: one hash-coded record per historical lesion.

    ``leaf_size`` and ``build_seed`` parametrize the ball tree built over the
    store; they travel with the store so a reloaded snapshot rebuilds the
    identical tree.
    """

    dimension: int
    hash_bits: int
    label_space: LabelSpace | None = None
    records: tuple[LesionRecord, ...] = ()
    leaf_size: int = 32
    build_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self):
        return len(self.records)

    @cached_property
    def code_matrix(self) -> CodeMatrix:
        if not self.records:
            return CodeMatrix(self.hash_bits, np.zeros((0, n_words(self.hash_bits)), np.uint64))
        return CodeMatrix(self.hash_bits, np.stack([r.code.words for r in self.records]))

    @cached_property
    def record_ids(self) -> np.ndarray:
        return np.array([r.record_id for r in self.records], dtype=np.uint64)

    @cached_property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    @cached_property
    def by_id(self) -> dict[int, LesionRecord]:
        return {r.record_id: r for r in self.records}

    def label_of(self, record_id: int) -> int:
        return self.by_id[record_id].label


def validate_store(store: CaseStore) -> list[str]:
    """Return a message for every invariant violation; an empty list means valid."""
    report = []
    if store.hash_bits < 1:
        report.append(f"hash length {store.hash_bits} is not positive")
    if store.leaf_size < 1:
        report.append(f"leaf size {store.leaf_size} is not positive")
    seen = set()
    for rec in store.records:
        rid = rec.record_id
        if rid < 0:
            report.append(f"record {rid}: negative record_id")
        if rid in seen:
            report.append(f"record {rid}: duplicate record_id")
        seen.add(rid)
        if rec.code.n_bits != store.hash_bits:
            report.append(
                f"record {rid}: code length {rec.code.n_bits} != store hash length {store.hash_bits}"
            )
        if store.label_space is not None and not store.label_space.contains(rec.label):
            report.append(f"record {rid}: label {rec.label} outside label space")
        elif rec.label < UNLABELED:
            report.append(f"record {rid}: invalid label {rec.label}")
    return report


def infer_label_space(records) -> LabelSpace:
    records = list(records)
    if not records:
        raise ValueError("at least one record is required")
    labels = [r.label for r in records if r.label != UNLABELED]
    if not labels:
        raise ValueError("no labels present")
    return LabelSpace(max(labels) + 1)


def make_store(
    records,
    hash_bits: int,
    dimension: int | None = None,
    label_space: LabelSpace | None = None,
    leaf_size: int = 32,
    build_seed: int = 0,
) -> CaseStore:
    """Construct a store and reject it if any invariant fails."""
    store = CaseStore(
        dimension=hash_bits if dimension is None else dimension,
        hash_bits=hash_bits,
        label_space=label_space,
        records=tuple(records),
        leaf_size=leaf_size,
        build_seed=build_seed,
    )
    problems = validate_store(store)
    if problems:
        raise StoreError("; ".join(problems))
    return store


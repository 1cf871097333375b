"""Exact Hamming kNN: packed linear scan, ball tree, and the store snapshot format."""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass

import numba
import numpy as np

from .core import CaseStore, LabelSpace, LesionRecord, StoreError, validate_store
from .hashing import CodeMatrix, HashCode, hamming_scan, n_words, pack_bits, popcount64

DEFAULT_LEAF_SIZE = 32
DEFAULT_REFINE_ITERS = 2


@dataclass(frozen=True)
class Neighbor:
    record_id: int
    distance: float


@dataclass(frozen=True, eq=False)
class RankedNeighbors:
    """Neighbors in ascending (distance, record_id) order."""

    record_ids: np.ndarray
    distances: np.ndarray
    k: int

    def __len__(self):
        return len(self.record_ids)

    def __eq__(self, other):
        if not isinstance(other, RankedNeighbors):
            return NotImplemented
        return (
            self.k == other.k
            and np.array_equal(self.record_ids, other.record_ids)
            and np.array_equal(self.distances, other.distances)
        )

    @property
    def entries(self) -> list[Neighbor]:
        return [Neighbor(int(i), d.item()) for i, d in zip(self.record_ids, self.distances)]


def _check_k(k: int):
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")


def _check_bits(expected: int, query: HashCode):
    if query.n_bits != expected:
        raise ValueError(f"hash length mismatch: index K={expected}, query K={query.n_bits}")


def select_smallest(distances: np.ndarray, ids: np.ndarray, k: int) -> np.ndarray:
    """Positions of the ``k`` smallest (distance, id) pairs, in order."""
    n = len(distances)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if k < n:
        kth = np.partition(distances, k - 1)[k - 1]
        cand = np.flatnonzero(distances <= kth)
    else:
        cand = np.arange(n)
    order = np.lexsort((ids[cand], distances[cand]))
    return cand[order[:k]]


def _exclusion_mask(ids: np.ndarray, exclude_ids) -> np.ndarray | None:
    if not exclude_ids:
        return None
    excl = np.fromiter((int(x) for x in exclude_ids), dtype=np.uint64)
    return np.isin(ids, excl)


def knn_linear_scan(
    matrix: CodeMatrix, ids, query: HashCode, k: int, exclude_ids=None
) -> RankedNeighbors:
    """Brute-force exact kNN; ties break by ascending record id."""
    _check_k(k)
    _check_bits(matrix.n_bits, query)
    ids = np.asarray(ids, dtype=np.uint64)
    if len(ids) != len(matrix):
        raise ValueError("ids and code matrix differ in length")
    dist = np.empty(len(matrix), dtype=np.int64)
    if len(matrix):
        hamming_scan(matrix.words, query.words, dist)
    mask = _exclusion_mask(ids, exclude_ids)
    if mask is not None:
        keep = ~mask
        dist, ids = dist[keep], ids[keep]
    pos = select_smallest(dist, ids, k)
    return RankedNeighbors(ids[pos], dist[pos], k)


def knn_cosine_scan(
    matrix: np.ndarray, ids, query: np.ndarray, k: int, exclude_ids=None
) -> RankedNeighbors:
    """Exact kNN by cosine similarity over unit-norm float rows.

    Distances are reported as ``1 - cosine``; ``matrix`` rows and ``query``
    must already be L2-normalized.
    """
    _check_k(k)
    ids = np.asarray(ids, dtype=np.uint64)
    if matrix.shape[1] != query.shape[0]:
        raise ValueError(f"dimension mismatch: {matrix.shape[1]} vs {query.shape[0]}")
    dist = 1.0 - matrix @ query.astype(matrix.dtype, copy=False)
    mask = _exclusion_mask(ids, exclude_ids)
    if mask is not None:
        keep = ~mask
        dist, ids = dist[keep], ids[keep]
    pos = select_smallest(dist, ids, k)
    return RankedNeighbors(ids[pos], dist[pos].astype(np.float64), k)


# ---------------------------------------------------------------- ball tree


@dataclass(frozen=True, eq=False)
class BallTreeIndex:
    """Ball tree over Hamming space.

    Points are stored permuted so every node owns the contiguous row range
    ``[start, end)``.  ``center`` indexes a member row of that range.
    """

    n_bits: int
    points: np.ndarray  # (N, W) uint64, permuted
    ids: np.ndarray  # (N,) uint64, record id per permuted row
    center: np.ndarray
    radius: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    end: np.ndarray
    leaf_size: int
    build_seed: int

    @property
    def n_nodes(self) -> int:
        return len(self.center)

    def node_arrays(self) -> tuple[np.ndarray, ...]:
        return (self.center, self.radius, self.left, self.right, self.start, self.end)

    def same_structure(self, other: "BallTreeIndex") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.node_arrays(), other.node_arrays())) and (
            np.array_equal(self.points, other.points) and np.array_equal(self.ids, other.ids)
        )


def _dist_to(words: np.ndarray, rows: np.ndarray, target: np.ndarray) -> np.ndarray:
    out = np.empty(len(rows), dtype=np.int64)
    hamming_scan(words[rows], target, out)
    return out


def _majority_code(words: np.ndarray, rows: np.ndarray, n_bits: int) -> np.ndarray:
    bits = np.unpackbits(words[rows].view(np.uint8), axis=1, bitorder="little")[:, :n_bits]
    return pack_bits(bits.sum(axis=0, dtype=np.int64) * 2 >= len(rows))


def _majority_center(words: np.ndarray, rows: np.ndarray, n_bits: int) -> tuple[int, int]:
    """Member closest to the bitwise majority code; returns (row, radius)."""
    target = _majority_code(words, rows, n_bits)
    best = rows[int(np.argmin(_dist_to(words, rows, target)))]
    radius = int(_dist_to(words, rows, words[best]).max())
    return best, radius


def _refine_split(words, rows, n_bits, to_left, iters):
    # Lloyd steps on majority codes; farthest-point pivots alone scatter
    # clusters that sit at similar distance from both pivots
    for _ in range(iters):
        da = _dist_to(words, rows, _majority_code(words, rows[to_left], n_bits))
        db = _dist_to(words, rows, _majority_code(words, rows[~to_left], n_bits))
        new = da <= db
        if np.array_equal(new, to_left) or new.all() or not new.any():
            break
        to_left = new
    return to_left


def build_ball_tree(
    store: CaseStore,
    leaf_size: int | None = None,
    build_seed: int | None = None,
    refine_iters: int = DEFAULT_REFINE_ITERS,
) -> BallTreeIndex:
    """Deterministic ball tree over the store's codes.

    Each node is split by the farthest-point rule (random seed point, pivot
    farthest from it, second pivot farthest from the first, members to the
    nearer pivot), then polished by ``refine_iters`` two-means steps on
    majority codes.  ``refine_iters=0`` gives the plain farthest-point split.
    """
    if len(store) == 0:
        raise StoreError("cannot index empty store")
    problems = validate_store(store)
    if problems:
        raise StoreError("; ".join(problems))
    leaf_size = store.leaf_size if leaf_size is None else leaf_size
    build_seed = store.build_seed if build_seed is None else build_seed
    if leaf_size < 1:
        raise ValueError("leaf_size must be positive")
    return _build(store.code_matrix.words, store.record_ids, store.hash_bits, leaf_size, build_seed, refine_iters)


def build_ball_tree_from_codes(
    words: np.ndarray,
    ids,
    n_bits: int,
    leaf_size: int = DEFAULT_LEAF_SIZE,
    build_seed: int = 0,
    refine_iters: int = DEFAULT_REFINE_ITERS,
) -> BallTreeIndex:
    ids = np.asarray(ids, dtype=np.uint64)
    if len(ids) == 0:
        raise StoreError("cannot index empty store")
    if len(np.unique(ids)) != len(ids):
        raise StoreError("record ids must be unique")
    if leaf_size < 1:
        raise ValueError("leaf_size must be positive")
    return _build(np.ascontiguousarray(words, dtype=np.uint64), ids, n_bits, leaf_size, build_seed, refine_iters)


def _build(words, ids, n_bits, leaf_size, build_seed, refine_iters) -> BallTreeIndex:
    rng = np.random.default_rng(build_seed)
    center, radius, left, right, start, end = [], [], [], [], [], []
    order: list[np.ndarray] = []
    placed = 0

    def new_node() -> int:
        for arr in (center, radius, left, right, start, end):
            arr.append(-1)
        return len(center) - 1

    # explicit stack of (node, member rows); rows stay sorted by original position
    root = new_node()
    stack = [(root, np.arange(len(ids)))]
    # children are pushed right-then-left so the left subtree is laid out first
    pending_ranges: list[int] = []
    while stack:
        node, rows = stack.pop()
        c, r = _majority_center(words, rows, n_bits)
        center[node], radius[node] = c, r
        split = None
        if len(rows) > leaf_size and r > 0:
            seed = rows[int(rng.integers(len(rows)))]
            p1 = rows[int(np.argmax(_dist_to(words, rows, words[seed])))]
            d1 = _dist_to(words, rows, words[p1])
            p2 = rows[int(np.argmax(d1))]
            d2 = _dist_to(words, rows, words[p2])
            to_left = _refine_split(words, rows, n_bits, d1 <= d2, refine_iters)
            if 0 < to_left.sum() < len(rows):
                split = rows[to_left], rows[~to_left]
        if split is None:
            start[node] = placed
            placed += len(rows)
            end[node] = placed
            order.append(rows)
            continue
        lnode, rnode = new_node(), new_node()
        left[node], right[node] = lnode, rnode
        pending_ranges.append(node)
        stack.append((rnode, split[1]))
        stack.append((lnode, split[0]))

    perm = np.concatenate(order)
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(len(perm))

    center_a = inverse[np.asarray(center, dtype=np.int64)]
    left_a = np.asarray(left, dtype=np.int64)
    right_a = np.asarray(right, dtype=np.int64)
    start_a = np.asarray(start, dtype=np.int64)
    end_a = np.asarray(end, dtype=np.int64)
    # internal ranges: children are created after parents, so fill bottom-up
    for node in reversed(pending_ranges):
        start_a[node] = start_a[left_a[node]]
        end_a[node] = end_a[right_a[node]]

    points = np.ascontiguousarray(words[perm])
    points.flags.writeable = False
    return BallTreeIndex(
        n_bits=n_bits,
        points=points,
        ids=np.ascontiguousarray(ids[perm]),
        center=center_a,
        radius=np.asarray(radius, dtype=np.int64),
        left=left_a,
        right=right_a,
        start=start_a,
        end=end_a,
        leaf_size=leaf_size,
        build_seed=build_seed,
    )


@numba.njit(cache=True)
def _insert(best_d, best_id, count, k, d, rid):
    # keep best_* sorted ascending by (distance, id)
    if count == k:
        wd = best_d[k - 1]
        if d > wd or (d == wd and rid >= best_id[k - 1]):
            return count
        pos = k - 1
    else:
        pos = count
        count += 1
    while pos > 0 and (best_d[pos - 1] > d or (best_d[pos - 1] == d and best_id[pos - 1] > rid)):
        best_d[pos] = best_d[pos - 1]
        best_id[pos] = best_id[pos - 1]
        pos -= 1
    best_d[pos] = d
    best_id[pos] = rid
    return count


@numba.njit(cache=True, inline="always")
def _row_distance(points, row, q):
    total = 0
    for j in range(q.shape[0]):
        total += popcount64(points[row, j] ^ q[j])
    return total


@numba.njit(cache=True)
def _tree_query(points, ids, center, radius, left, right, start, end, q, k, excluded, best_d, best_id):
    count = 0
    visited = 0
    n_nodes = center.shape[0]
    stack_node = np.empty(n_nodes + 1, dtype=np.int64)
    stack_lb = np.empty(n_nodes + 1, dtype=np.int64)
    d0 = _row_distance(points, center[0], q) - radius[0]
    stack_node[0] = 0
    stack_lb[0] = d0 if d0 > 0 else 0
    top = 1
    while top > 0:
        top -= 1
        node = stack_node[top]
        lb = stack_lb[top]
        # equal bound may still hold a smaller-id tie, so prune only on strict excess
        if count == k and lb > best_d[k - 1]:
            continue
        visited += 1
        if left[node] < 0:
            for row in range(start[node], end[node]):
                if excluded[row]:
                    continue
                d = _row_distance(points, row, q)
                # inline rejection test; a call per row costs more than the distance
                if count == k and (d > best_d[k - 1] or (d == best_d[k - 1] and ids[row] >= best_id[k - 1])):
                    continue
                count = _insert(best_d, best_id, count, k, d, ids[row])
        else:
            a = left[node]
            b = right[node]
            la = _row_distance(points, center[a], q) - radius[a]
            lb_b = _row_distance(points, center[b], q) - radius[b]
            if la < 0:
                la = 0
            if lb_b < 0:
                lb_b = 0
            if la <= lb_b:
                stack_node[top] = b
                stack_lb[top] = lb_b
                stack_node[top + 1] = a
                stack_lb[top + 1] = la
            else:
                stack_node[top] = a
                stack_lb[top] = la
                stack_node[top + 1] = b
                stack_lb[top + 1] = lb_b
            top += 2
    return count, visited


def knn_ball_tree(
    index: BallTreeIndex, query: HashCode, k: int, exclude_ids=None, return_visits: bool = False
):
    """Exact kNN through the tree; identical output to :func:`knn_linear_scan`."""
    _check_k(k)
    _check_bits(index.n_bits, query)
    mask = _exclusion_mask(index.ids, exclude_ids)
    if mask is None:
        mask = np.zeros(len(index.ids), dtype=np.bool_)
    kk = min(k, len(index.ids))
    best_d = np.empty(kk, dtype=np.int64)
    best_id = np.empty(kk, dtype=np.uint64)
    count, visited = _tree_query(
        index.points, index.ids, index.center, index.radius, index.left, index.right,
        index.start, index.end, query.words, kk, mask, best_d, best_id,
    )
    result = RankedNeighbors(best_id[:count].copy(), best_d[:count].copy(), k)
    if return_visits:
        return result, int(visited)
    return result


def audit_tree(index: BallTreeIndex) -> list[str]:
    """Check membership and radius invariants node by node."""
    problems = []
    n = len(index.ids)
    leaf_hits = np.zeros(n, dtype=np.int64)
    for node in range(index.n_nodes):
        s, e = index.start[node], index.end[node]
        if not s <= index.center[node] < e:
            problems.append(f"node {node}: center outside its range")
        out = np.empty(e - s, dtype=np.int64)
        hamming_scan(index.points[s:e], index.points[index.center[node]], out)
        if out.max() > index.radius[node]:
            problems.append(f"node {node}: member at {out.max()} > radius {index.radius[node]}")
        if index.left[node] < 0:
            leaf_hits[s:e] += 1
        else:
            l, r = index.left[node], index.right[node]
            if index.start[l] != s or index.end[l] != index.start[r] or index.end[r] != e:
                problems.append(f"node {node}: children do not tile its range")
    if np.any(leaf_hits != 1):
        problems.append("some point is not in exactly one leaf")
    return problems


# ---------------------------------------------------------------- snapshot

MAGIC = b"EFIX"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct("<4sIIIQIQ")


class SnapshotError(ValueError):
    pass


def _record_dtype(n_bits: int) -> np.dtype:
    return np.dtype(
        [("record_id", "<u8"), ("polyp_id", "<u8"), ("label", "<i4"), ("code", "<u8", (n_words(n_bits),))]
    )


def snapshot_bytes(store: CaseStore) -> bytes:
    problems = validate_store(store)
    if problems:
        raise StoreError("; ".join(problems))
    n_classes = 0 if store.label_space is None else store.label_space.num_classes
    header = _HEADER.pack(
        MAGIC, SNAPSHOT_VERSION, store.hash_bits, store.leaf_size, store.build_seed, n_classes, len(store)
    )
    table = np.zeros(len(store), dtype=_record_dtype(store.hash_bits))
    if len(store):
        table["record_id"] = store.record_ids
        table["polyp_id"] = [r.polyp_id for r in store.records]
        table["label"] = store.labels
        table["code"] = store.code_matrix.words
    return header + table.tobytes()


def save_snapshot(store: CaseStore, path) -> int:
    """Write the store atomically; returns the byte count."""
    payload = snapshot_bytes(store)
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".snapshot-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return len(payload)


def parse_snapshot(data: bytes) -> CaseStore:
    if len(data) < _HEADER.size:
        raise SnapshotError(f"truncated header at byte {len(data)}")
    magic, version, n_bits, leaf_size, seed, n_classes, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise SnapshotError(f"bad magic {magic!r} at byte 0")
    if version != SNAPSHOT_VERSION:
        raise SnapshotError(f"unsupported snapshot version {version} at byte 4")
    if n_bits < 1:
        raise SnapshotError("hash length must be positive (byte 8)")
    dtype = _record_dtype(n_bits)
    expected = _HEADER.size + count * dtype.itemsize
    if len(data) != expected:
        raise SnapshotError(
            f"payload size mismatch: header declares {count} records ({expected} bytes), "
            f"file has {len(data)} bytes; first bad byte at {min(len(data), expected)}"
        )
    table = np.frombuffer(data, dtype=dtype, count=count, offset=_HEADER.size)
    records = tuple(
        LesionRecord(int(row["record_id"]), int(row["polyp_id"]), HashCode(n_bits, row["code"].astype(np.uint64)), int(row["label"]))
        for row in table
    )
    store = CaseStore(
        dimension=n_bits,
        hash_bits=n_bits,
        label_space=LabelSpace(n_classes) if n_classes else None,
        records=records,
        leaf_size=leaf_size,
        build_seed=seed,
    )
    problems = validate_store(store)
    if problems:
        raise SnapshotError("corrupt snapshot: " + "; ".join(problems))
    return store


def load_snapshot(path) -> CaseStore:
    with open(path, "rb") as fh:
        return parse_snapshot(fh.read())

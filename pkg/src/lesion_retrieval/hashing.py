"""Sign quantization into packed binary codes and Hamming arithmetic.

Bit layout (normative for the snapshot format): dimension ``k`` lives in
word ``k // 64`` at bit ``k % 64`` (little-endian within the word).  A set
bit encodes +1, a clear bit encodes -1.  Bits beyond ``K`` are zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from numba.core import types as nbtypes
from numba.extending import intrinsic

WORD_BITS = 64


def n_words(n_bits: int) -> int:
    return (n_bits + WORD_BITS - 1) // WORD_BITS


@dataclass(frozen=True, eq=False)
class HashCode:
    """A K-bit code stored as ``ceil(K/64)`` little-endian uint64 words."""

    n_bits: int
    words: np.ndarray

    def __post_init__(self):
        if self.n_bits < 1:
            raise ValueError("hash length must be positive")
        words = np.ascontiguousarray(self.words, dtype=np.uint64)
        if words.shape != (n_words(self.n_bits),):
            raise ValueError(
                f"expected {n_words(self.n_bits)} words for K={self.n_bits}, got shape {words.shape}"
            )
        if _pad_bits(words, self.n_bits):
            raise ValueError("trailing pad bits must be zero")
        words.flags.writeable = False
        object.__setattr__(self, "words", words)

    def __eq__(self, other):
        if not isinstance(other, HashCode):
            return NotImplemented
        return self.n_bits == other.n_bits and np.array_equal(self.words, other.words)

    def __hash__(self):
        return hash((self.n_bits, self.words.tobytes()))

    def __repr__(self):
        return f"HashCode(K={self.n_bits}, bits={''.join(map(str, self.bits()))[:72]})"

    def bits(self) -> np.ndarray:
        """0/1 bit vector of length K."""
        raw = np.unpackbits(self.words.astype("<u8").view(np.uint8), bitorder="little")
        return raw[: self.n_bits]

    def to_signs(self) -> np.ndarray:
        """The code as a float vector in {-1, +1}^K."""
        return self.bits().astype(np.float64) * 2.0 - 1.0

    def complement(self) -> "HashCode":
        flipped = ~self.words
        flipped = _clear_pad(flipped, self.n_bits)
        return HashCode(self.n_bits, flipped)


def _pad_mask(n_bits: int) -> np.uint64:
    rem = n_bits % WORD_BITS
    if rem == 0:
        return np.uint64(0xFFFFFFFFFFFFFFFF)
    return np.uint64((1 << rem) - 1)


def _pad_bits(words: np.ndarray, n_bits: int) -> bool:
    return bool(np.any(words[..., -1] & ~_pad_mask(n_bits)))


def _clear_pad(words: np.ndarray, n_bits: int) -> np.ndarray:
    words = words.copy()
    words[..., -1] &= _pad_mask(n_bits)
    return words


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a (..., K) 0/1 array into (..., ceil(K/64)) uint64 words."""
    bits = np.asarray(bits, dtype=bool)
    k = bits.shape[-1]
    pad = n_words(k) * WORD_BITS - k
    if pad:
        bits = np.concatenate([bits, np.zeros(bits.shape[:-1] + (pad,), dtype=bool)], axis=-1)
    packed = np.packbits(bits, axis=-1, bitorder="little")
    packed = np.ascontiguousarray(packed)
    return packed.view("<u8").astype(np.uint64)


def quantize_matrix(values: np.ndarray) -> np.ndarray:
    """Sign-quantize each row of a float matrix into packed words.

    ``x >= 0`` maps to +1 (bit set), so an exact zero becomes +1.
    """
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError("expected a 2-D matrix of embeddings")
    if not np.all(np.isfinite(values)):
        raise ValueError("non-finite embedding")
    return pack_bits(values >= 0)


def sign_quantize(embedding) -> HashCode:
    """Quantize a scene embedding (or plain vector) to a K=D code."""
    values = np.asarray(getattr(embedding, "values", embedding), dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise ValueError("expected a non-empty 1-D embedding")
    if not np.all(np.isfinite(values)):
        raise ValueError("non-finite embedding")
    return HashCode(values.size, pack_bits(values >= 0))


def code_from_signs(signs) -> HashCode:
    """Build a code from a {-1, +1} vector; any non-negative entry counts as +1."""
    return sign_quantize(np.asarray(signs, dtype=np.float64))


@intrinsic
def _ctpop64(typingctx, x):
    sig = nbtypes.int64(nbtypes.uint64)

    def codegen(context, builder, signature, args):
        return builder.ctpop(args[0])

    return sig, codegen


@numba.njit(cache=True, inline="always")
def popcount64(v):
    # int64 result: int64 + uint64 would promote sums to float64 in numba
    return _ctpop64(v)


@numba.njit(cache=True)
def hamming_words(a, b):
    total = 0
    for j in range(a.shape[0]):
        total += popcount64(a[j] ^ b[j])
    return total


@numba.njit(cache=True)
def hamming_scan(matrix, query, out):
    """Write the Hamming distance of every row of ``matrix`` to ``query`` into ``out``."""
    n, w = matrix.shape
    for i in range(n):
        total = 0
        for j in range(w):
            total += popcount64(matrix[i, j] ^ query[j])
        out[i] = total


def hamming_distance(a: HashCode, b: HashCode) -> int:
    if a.n_bits != b.n_bits:
        raise ValueError(f"hash length mismatch: {a.n_bits} vs {b.n_bits}")
    return int(hamming_words(a.words, b.words))


def hamming_to_cosine(h: int, n_bits: int) -> float:
    """Cosine similarity of two +/-1 vectors that differ in ``h`` of ``n_bits`` places."""
    if n_bits < 1:
        raise ValueError("hash length must be positive")
    if not 0 <= h <= n_bits:
        raise ValueError(f"Hamming distance {h} outside [0, {n_bits}]")
    return 1.0 - 2.0 * h / n_bits


@dataclass(frozen=True, eq=False)
class CodeMatrix:
    """Row-major packed code matrix with the hash length recorded."""

    n_bits: int
    words: np.ndarray

    def __post_init__(self):
        words = np.ascontiguousarray(self.words, dtype=np.uint64)
        if words.ndim != 2 or words.shape[1] != n_words(self.n_bits):
            raise ValueError(f"code matrix must have shape (N, {n_words(self.n_bits)})")
        if words.shape[0] and _pad_bits(words, self.n_bits):
            raise ValueError("trailing pad bits must be zero")
        words.flags.writeable = False
        object.__setattr__(self, "words", words)

    def __len__(self):
        return self.words.shape[0]

    def row(self, i: int) -> HashCode:
        return HashCode(self.n_bits, self.words[i].copy())


def pack_codes(codes, n_bits: int | None = None) -> CodeMatrix:
    """Stack codes into a contiguous matrix; ``n_bits`` is required for an empty list."""
    codes = list(codes)
    if not codes:
        if n_bits is None:
            raise ValueError("hash length required to pack an empty list")
        return CodeMatrix(n_bits, np.zeros((0, n_words(n_bits)), dtype=np.uint64))
    k = codes[0].n_bits
    if n_bits is not None and n_bits != k:
        raise ValueError(f"hash length mismatch: {k} vs {n_bits}")
    for c in codes:
        if c.n_bits != k:
            raise ValueError(f"mixed hash lengths: {k} and {c.n_bits}")
    return CodeMatrix(k, np.stack([c.words for c in codes]))


def unpack_row(matrix: CodeMatrix, i: int) -> HashCode:
    return matrix.row(i)

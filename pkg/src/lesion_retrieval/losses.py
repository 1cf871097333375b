"""Forward-only contrastive, entropy and masked-reconstruction objectives.

Each loss has a ``*_grad`` twin returning ``(loss, gradient)`` with respect
to the raw (unnormalized) embeddings, or to the reconstructions for the
masked MSE.  They are reference values for external training code; nothing
here optimizes anything.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

DEFAULT_TEMPERATURE = 0.05


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = DEFAULT_TEMPERATURE
    entropy_weight: float = 1.0
    reconstruction_weight: float = 1.0
    scene_entropy_weight: float = 1.0
    scene_reconstruction_weight: float = 1.0
    raw_distances: bool = False

    def __post_init__(self):
        if not self.temperature > 0:
            raise LossError("temperature must be positive")
        for name in ("entropy_weight", "reconstruction_weight", "scene_entropy_weight", "scene_reconstruction_weight"):
            if getattr(self, name) < 0:
                raise LossError(f"{name} must be non-negative")


@dataclass(frozen=True)
class PositivePairSet:
    """Ordered positive pairs over a batch of ``size`` items."""

    size: int
    pairs: frozenset

    def __post_init__(self):
        pairs = frozenset((int(i), int(j)) for i, j in self.pairs)
        for i, j in pairs:
            if i == j:
                raise LossError(f"self pair ({i}, {j}) is not a positive")
            if not (0 <= i < self.size and 0 <= j < self.size):
                raise LossError(f"pair ({i}, {j}) out of range for batch of {self.size}")
        object.__setattr__(self, "pairs", pairs)

    def positives(self, i: int) -> list[int]:
        return sorted(j for a, j in self.pairs if a == i)

    def positive_mask(self) -> np.ndarray:
        mask = np.zeros((self.size, self.size), dtype=bool)
        for i, j in self.pairs:
            mask[i, j] = True
        return mask

    def sorted_pairs(self) -> list[tuple[int, int]]:
        return sorted(self.pairs)


def image_pairs(n_images: int) -> PositivePairSet:
    """Two augmented views per image: item ``i`` pairs with ``i + n``."""
    pairs = set()
    for i in range(n_images):
        pairs.add((i, i + n_images))
        pairs.add((i + n_images, i))
    return PositivePairSet(2 * n_images, frozenset(pairs))


def group_pairs(groups) -> PositivePairSet:
    """Every two distinct items sharing a group id are mutual positives."""
    groups = list(groups)
    pairs = {
        (i, j) for i, gi in enumerate(groups) for j, gj in enumerate(groups) if i != j and gi == gj
    }
    return PositivePairSet(len(groups), frozenset(pairs))


def _as_batch(batch) -> np.ndarray:
    z = np.asarray(batch, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 1 or z.shape[1] < 1:
        raise LossError("embedding batch must be a non-empty (M, D) matrix")
    if not np.all(np.isfinite(z)):
        raise LossError("embedding batch contains non-finite values")
    return z


def _normalize(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms == 0):
        raise LossError(f"zero-norm vector at index {int(np.flatnonzero(norms == 0)[0])}")
    return z / norms[:, None], norms


def _normalize_backward(u: np.ndarray, norms: np.ndarray, grad_u: np.ndarray) -> np.ndarray:
    radial = np.sum(u * grad_u, axis=1, keepdims=True)
    return (grad_u - u * radial) / norms[:, None]


def _logsumexp(x: np.ndarray) -> float:
    m = x.max()
    return m + np.log(np.sum(np.exp(x - m)))


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def pairwise_similarity(batch, temperature: float = DEFAULT_TEMPERATURE) -> np.ndarray:
    """Cosine similarity divided by the temperature, for every pair of items."""
    if not temperature > 0:
        raise LossError("temperature must be positive")
    u, _ = _normalize(_as_batch(batch))
    sim = u @ u.T / temperature
    return (sim + sim.T) / 2.0


def _check_pairs(z: np.ndarray, pairs: PositivePairSet):
    if pairs.size != z.shape[0]:
        raise LossError(f"pair set covers {pairs.size} items, batch has {z.shape[0]}")
    for i in range(pairs.size):
        if not pairs.positives(i):
            raise LossError(f"index {i} has no positive partner")


def _similarity_grad_to_z(u, norms, g_sim, temperature):
    grad_u = (g_sim + g_sim.T) @ u / temperature
    return _normalize_backward(u, norms, grad_u)


def infonce_exclusive_grad(batch, pairs: PositivePairSet, temperature: float = DEFAULT_TEMPERATURE):
    """InfoNCE whose denominator drops the anchor's other positives."""
    z = _as_batch(batch)
    _check_pairs(z, pairs)
    u, norms = _normalize(z)
    s = pairwise_similarity(z, temperature)
    m = z.shape[0]
    pos = pairs.positive_mask()
    g = np.zeros_like(s)
    total = 0.0
    for i in range(m):
        p_i = np.flatnonzero(pos[i])
        negatives = np.flatnonzero(~pos[i])
        negatives = negatives[negatives != i]
        w = 1.0 / (m * len(p_i))
        for j in p_i:
            cols = np.concatenate(([j], negatives))
            logits = s[i, cols]
            total += w * (_logsumexp(logits) - s[i, j])
            g[i, cols] += w * _softmax(logits)
            g[i, j] -= w
    return total, _similarity_grad_to_z(u, norms, g, temperature)


def infonce_inclusive_grad(batch, pairs: PositivePairSet, temperature: float = DEFAULT_TEMPERATURE):
    """InfoNCE over every non-self item, averaged over the positive pairs."""
    z = _as_batch(batch)
    _check_pairs(z, pairs)
    u, norms = _normalize(z)
    s = pairwise_similarity(z, temperature)
    m = z.shape[0]
    plist = pairs.sorted_pairs()
    w = 1.0 / len(plist)
    g = np.zeros_like(s)
    total = 0.0
    others = [np.array([k for k in range(m) if k != i]) for i in range(m)]
    lse = [_logsumexp(s[i, others[i]]) for i in range(m)]
    for i, j in plist:
        total += w * (lse[i] - s[i, j])
        g[i, others[i]] += w * _softmax(s[i, others[i]])
        g[i, j] -= w
    return total, _similarity_grad_to_z(u, norms, g, temperature)


def entropy_regularizer_grad(
    batch,
    pairs: PositivePairSet,
    level: Literal["image", "scene"] = "image",
    raw_distances: bool = False,
):
    """Mean negative log distance from each item to its nearest non-positive.

    Distances are taken between L2-normalized vectors unless
    ``raw_distances`` is set.  ``level`` only names the batch kind; both
    levels average over every item in the batch.
    """
    if level not in ("image", "scene"):
        raise LossError(f"unknown level {level!r}")
    z = _as_batch(batch)
    if pairs.size != z.shape[0]:
        raise LossError(f"pair set covers {pairs.size} items, batch has {z.shape[0]}")
    if raw_distances:
        x, norms = z, None
    else:
        x, norms = _normalize(z)
    m = z.shape[0]
    pos = pairs.positive_mask()
    grad_x = np.zeros_like(x)
    total = 0.0
    for i in range(m):
        cand = np.flatnonzero(~pos[i])
        cand = cand[cand != i]
        if cand.size == 0:
            raise LossError("entropy undefined: no negatives")
        diffs = x[i] - x[cand]
        dists = np.sqrt(np.sum(diffs * diffs, axis=1))
        a = int(np.argmin(dists))
        d = dists[a]
        if d == 0.0:
            raise LossError(f"item {i} and its nearest negative {int(cand[a])} coincide; entropy is infinite")
        total -= np.log(d) / m
        step = diffs[a] / (d * d * m)
        grad_x[i] -= step
        grad_x[cand[a]] += step
    if raw_distances:
        return total, grad_x
    return total, _normalize_backward(x, norms, grad_x)


def infonce_exclusive(batch, pairs, temperature=DEFAULT_TEMPERATURE) -> float:
    return infonce_exclusive_grad(batch, pairs, temperature)[0]


def infonce_inclusive(batch, pairs, temperature=DEFAULT_TEMPERATURE) -> float:
    return infonce_inclusive_grad(batch, pairs, temperature)[0]


def entropy_regularizer(batch, pairs, level="image", raw_distances=False) -> float:
    return entropy_regularizer_grad(batch, pairs, level, raw_distances)[0]


@dataclass(frozen=True)
class MaskedImageBatch:
    """Originals and reconstructions as (items, pixels); ``masks`` marks masked pixels."""

    originals: np.ndarray
    reconstructions: np.ndarray
    masks: np.ndarray

    def __post_init__(self):
        orig = np.asarray(self.originals, dtype=np.float64)
        recon = np.asarray(self.reconstructions, dtype=np.float64)
        if orig.shape != recon.shape:
            raise LossError(f"shape mismatch: originals {orig.shape} vs reconstructions {recon.shape}")
        orig = orig.reshape(orig.shape[0], -1)
        recon = recon.reshape(recon.shape[0], -1)
        masks = self.masks
        if isinstance(masks, np.ndarray) and masks.dtype == bool:
            masks = masks.reshape(masks.shape[0], -1)
            if masks.shape != orig.shape:
                raise LossError("boolean mask shape must match the images")
        else:
            bool_masks = np.zeros(orig.shape, dtype=bool)
            masks = list(masks)
            if len(masks) != orig.shape[0]:
                raise LossError("one mask per item is required")
            for i, idx in enumerate(masks):
                idx = np.asarray(idx, dtype=np.int64)
                if idx.size and (idx.min() < 0 or idx.max() >= orig.shape[1]):
                    raise LossError(f"mask index out of range for item {i}")
                bool_masks[i, idx] = True
            masks = bool_masks
        object.__setattr__(self, "originals", orig)
        object.__setattr__(self, "reconstructions", recon)
        object.__setattr__(self, "masks", masks)


def masked_mse_grad(batch: MaskedImageBatch):
    """Per-item MSE over masked pixels, averaged over items; gradient w.r.t. reconstructions."""
    counts = batch.masks.sum(axis=1)
    if np.any(counts == 0):
        raise LossError(f"empty mask for item {int(np.flatnonzero(counts == 0)[0])}")
    n = batch.originals.shape[0]
    diff = np.where(batch.masks, batch.reconstructions - batch.originals, 0.0)
    per_item = np.sum(diff * diff, axis=1) / counts
    grad = 2.0 * diff / (counts[:, None] * n)
    return float(per_item.mean()), grad


def masked_mse(batch: MaskedImageBatch) -> float:
    return masked_mse_grad(batch)[0]


@dataclass(frozen=True)
class LossParts:
    infonce: float
    entropy: float = 0.0
    mse: float = 0.0


def total_image_loss(parts: LossParts, cfg: ContrastiveConfig = ContrastiveConfig()) -> float:
    """Contrastive term plus weighted entropy, plus weighted reconstruction."""
    contrastive = parts.infonce + cfg.entropy_weight * parts.entropy
    return contrastive + cfg.reconstruction_weight * parts.mse


def total_scene_loss(parts: LossParts, cfg: ContrastiveConfig = ContrastiveConfig()) -> float:
    return parts.infonce + cfg.scene_entropy_weight * parts.entropy + cfg.scene_reconstruction_weight * parts.mse

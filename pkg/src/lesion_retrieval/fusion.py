"""Average fusion of per-view embeddings into one scene embedding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import MultiViewScene, SceneEmbedding


class FusionError(ValueError):
    pass


@dataclass(frozen=True)
class FusionConfig:
    normalize_inputs: bool = True
    normalize_output: bool = True


def l2_normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise FusionError("non-finite vector")
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise FusionError("zero-norm vector")
    return v / norm


def fuse_average(scene: MultiViewScene, cfg: FusionConfig = FusionConfig()) -> SceneEmbedding:
    if not scene.views:
        raise FusionError(f"scene {scene.polyp_id} has no views")
    # sort by view id so the float sum is order independent
    views = sorted(scene.views, key=lambda v: v.view_id)
    stack = np.stack([v.values for v in views])
    if cfg.normalize_inputs:
        stack = np.stack([l2_normalize(row) for row in stack])
    fused = stack.mean(axis=0)
    if cfg.normalize_output:
        if np.linalg.norm(fused) <= 1e-12 * max(1.0, np.abs(stack).max()):
            raise FusionError(f"degenerate fusion for polyp {scene.polyp_id}")
        fused = l2_normalize(fused)
    return SceneEmbedding(scene.polyp_id, fused)


def select_views(scene: MultiViewScene, view_filter) -> MultiViewScene:
    if view_filter is None:
        return scene
    wanted = set(view_filter)
    kept = tuple(v for v in scene.views if v.view_id in wanted)
    if not kept:
        raise FusionError(
            f"view filter {sorted(wanted)} leaves polyp {scene.polyp_id} without views"
        )
    return MultiViewScene(scene.polyp_id, kept, scene.label)


def fuse_store(scenes, cfg: FusionConfig = FusionConfig(), view_filter=None) -> list[SceneEmbedding]:
    """Fuse every scene, optionally restricted to the view ids in ``view_filter``."""
    return [fuse_average(select_views(s, view_filter), cfg) for s in scenes]


def fuse_matrix(views: np.ndarray, cfg: FusionConfig = FusionConfig()) -> np.ndarray:
    """Vectorized fusion over a (scenes, views, D) array; no degeneracy checks."""
    views = np.asarray(views, dtype=np.float64)
    if cfg.normalize_inputs:
        views = views / np.linalg.norm(views, axis=-1, keepdims=True)
    fused = views.mean(axis=1)
    if cfg.normalize_output:
        fused = fused / np.linalg.norm(fused, axis=-1, keepdims=True)
    return fused

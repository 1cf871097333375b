import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lesion_retrieval.core import MultiViewScene, ViewEmbedding
from lesion_retrieval.fusion import FusionConfig, FusionError, fuse_average, fuse_matrix, fuse_store, l2_normalize, select_views


def scene(vectors, polyp=0, view_ids=None):
    view_ids = range(len(vectors)) if view_ids is None else view_ids
    return MultiViewScene(polyp, tuple(ViewEmbedding(polyp, v, np.asarray(x, float)) for v, x in zip(view_ids, vectors)))


def test_single_view_is_normalized_input():
    out = fuse_average(scene([[3.0, 4.0]]))
    assert np.allclose(out.values, [0.6, 0.8])


def test_opposite_views_are_degenerate():
    with pytest.raises(FusionError, match="degenerate"):
        fuse_average(scene([[1.0, 0.0], [-1.0, 0.0]]))


def test_no_normalization_is_plain_mean():
    cfg = FusionConfig(normalize_inputs=False, normalize_output=False)
    out = fuse_average(scene([[2.0, 0.0], [0.0, 4.0]]), cfg)
    assert np.array_equal(out.values, [1.0, 2.0])


def test_input_normalization_equalizes_views():
    out = fuse_average(scene([[100.0, 0.0], [0.0, 1.0]]))
    assert np.allclose(out.values, [np.sqrt(0.5), np.sqrt(0.5)])


def test_zero_vector():
    with pytest.raises(FusionError, match="zero-norm"):
        l2_normalize(np.zeros(3))


def test_view_filter():
    s = scene([[1, 0], [0, 1], [1, 1]], polyp=9, view_ids=[0, 1, 2])
    assert select_views(s, [0, 2]).view_ids == (0, 2)
    with pytest.raises(FusionError, match="polyp 9"):
        select_views(s, [7])
    fused = fuse_store([s], view_filter=[1])
    assert np.allclose(fused[0].values, [0, 1])


@given(st.integers(1, 6), st.integers(1, 32), st.integers(0, 2**32 - 1), st.randoms())
def test_permutation_invariance(n_views, dim, seed, rnd):
    x = np.random.default_rng(seed).standard_normal((n_views, dim))
    ids = list(range(n_views))
    perm = ids[:]
    rnd.shuffle(perm)
    try:
        a = fuse_average(scene(x, view_ids=ids))
    except FusionError:
        # opposite unit views cancel exactly (e.g. dim 1); every order must agree
        with pytest.raises(FusionError, match="degenerate"):
            fuse_average(scene(x[perm], view_ids=perm))
        return
    b = fuse_average(scene(x[perm], view_ids=perm))
    # bit-identical, not just close: views are summed in view-id order
    assert np.array_equal(a.values, b.values)
    assert abs(np.linalg.norm(a.values) - 1.0) < 1e-12


@given(st.integers(1, 5), st.integers(2, 16), st.integers(0, 2**32 - 1), st.booleans())
def test_matrix_path_matches_scene_path(n_views, dim, seed, normalize):
    x = np.random.default_rng(seed).standard_normal((3, n_views, dim))
    cfg = FusionConfig(normalize, normalize)
    got = fuse_matrix(x, cfg)
    for p in range(3):
        assert np.allclose(got[p], fuse_average(scene(x[p]), cfg).values, atol=1e-12)

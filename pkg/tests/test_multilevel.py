import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clusterseg.clustering import KmeansConfig
from clusterseg.multilevel import (
    BinaryPatchMask, LevelMask, binarize_level, check_corners,
    cluster_category_level, cluster_dataset_level, cluster_image_level,
    combine_masks, group_by_superclass, iter_batches, orient_image_mask,
    select_foreground_cluster,
)
from clusterseg.synthetic import SceneSpec, gen_synthetic_dataset, plant_scene
from clusterseg.tensorio import FeatureGrid, load_manifest

from conftest import same_partition


def _image_mask(grid, image_id="img"):
    return LevelMask(image_id=image_id, level="image", grid=np.asarray(grid), k=2)


def _bool_grid(shape, fill=False):
    return np.full(shape, fill, dtype=bool)


# --- corner checks / orientation ---


def test_check_corners_all_false():
    assert check_corners(_bool_grid((5, 5))) == 4


def test_check_corners_three_one():
    g = _bool_grid((4, 4), True)
    g[-1, -1] = False
    assert check_corners(g) == 3


def test_check_corners_two_two():
    g = _bool_grid((4, 4))
    g[0, 0] = g[0, -1] = True
    assert check_corners(g) == 2


def test_check_corners_needs_2x2():
    with pytest.raises(ValueError):
        check_corners(np.zeros((1, 3), dtype=bool))


def test_orient_unanimous_false_corners_unchanged():
    g = np.zeros((6, 6), dtype=np.int64)
    g[2:4, 2:4] = 1
    out = orient_image_mask(_image_mask(g))
    assert np.array_equal(out.grid, g.astype(bool))


def test_orient_unanimous_true_corners_flips():
    g = np.ones((6, 6), dtype=np.int64)
    g[2:4, 2:4] = 0
    out = orient_image_mask(_image_mask(g))
    assert np.array_equal(out.grid, g == 0)


def test_orient_two_two_smaller_area_wins():
    # 28x28 = 784 patches, cluster 1 holds 300, cluster 0 holds 484;
    # corners split 2-2 so the smaller cluster (1) is foreground
    g = np.zeros((28, 28), dtype=np.int64)
    g.ravel()[:300] = 1  # fills rows 0..10 -> corners (0,0) and (0,27) are 1
    assert check_corners(g) == 2
    assert int((g == 1).sum()) == 300
    out = orient_image_mask(_image_mask(g))
    assert np.array_equal(out.grid, g == 1)


def test_orient_is_idempotent():
    rng = np.random.default_rng(0)
    for trial in range(50):
        g = (rng.random((8, 8)) < rng.uniform(0.2, 0.8)).astype(np.int64)
        once = orient_image_mask(_image_mask(g))
        twice = orient_image_mask(_image_mask(once.grid.astype(np.int64)))
        assert np.array_equal(once.grid, twice.grid)


def test_orient_rejects_non_image_level():
    with pytest.raises(ValueError):
        orient_image_mask(LevelMask("x", "dataset", np.zeros((4, 4), dtype=int), 4))


# --- mask combination ---


def test_combine_full_truth_table():
    for d, c, i in itertools.product([0, 1], repeat=3):
        out = combine_masks(
            BinaryPatchMask("x", np.array([[bool(d)]])),
            BinaryPatchMask("x", np.array([[bool(c)]])),
            BinaryPatchMask("x", np.array([[bool(i)]])),
        )
        assert out.grid[0, 0] == (bool(d) and bool(c) and bool(i))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_combine_output_subset_of_inputs(seed):
    rng = np.random.default_rng(seed)
    d, c, i = (rng.random((6, 6)) < 0.5 for _ in range(3))
    out = combine_masks(
        BinaryPatchMask("x", d), BinaryPatchMask("x", c), BinaryPatchMask("x", i)
    )
    for src in (d, c, i):
        assert not np.any(out.grid & ~src)


def test_combine_shape_mismatch():
    with pytest.raises(ValueError):
        combine_masks(
            BinaryPatchMask("x", _bool_grid((3, 3))),
            BinaryPatchMask("x", _bool_grid((4, 4))),
            BinaryPatchMask("x", _bool_grid((3, 3))),
        )


# --- foreground voting ---


def _level_mask(grid, k, image_id="img", level="dataset"):
    return LevelMask(image_id=image_id, level=level, grid=np.asarray(grid), k=k)


def _confident_pair(fg_cluster, image_id, grid=8):
    """Image mask with a centered blob; level mask whose fg_cluster overlaps it."""
    im = np.zeros((grid, grid), dtype=np.int64)
    im[3:5, 3:5] = 1
    lvl = np.zeros((grid, grid), dtype=np.int64)
    lvl[3:5, 3:5] = fg_cluster
    lvl[0, :] = (fg_cluster + 1) % 4
    return _level_mask(lvl, 4, image_id), _image_mask(im, image_id)


def test_select_foreground_unanimous_vote():
    pairs = [_confident_pair(2, f"i{j}") for j in range(3)]
    vote = select_foreground_cluster([p[0] for p in pairs], [p[1] for p in pairs])
    assert vote.fg_cluster == 2
    assert vote.confident_count == 3
    assert vote.cluster_vote == {0: 0, 1: 0, 2: 3, 3: 0}


def test_select_foreground_tie_breaks_low():
    pairs = [_confident_pair(0, "a"), _confident_pair(1, "b")]
    vote = select_foreground_cluster([p[0] for p in pairs], [p[1] for p in pairs])
    assert vote.cluster_vote[0] == 1 and vote.cluster_vote[1] == 1
    assert vote.fg_cluster == 0


def test_select_foreground_fallback_when_no_confident_mask():
    # 2-2 corner splits everywhere: the corner gate never passes
    im = np.zeros((6, 6), dtype=np.int64)
    im[0, :] = 1  # corners (0,0) and (0,5) true -> 2-2 split
    lvl = np.zeros((6, 6), dtype=np.int64)
    lvl[0, :] = 3
    vote = select_foreground_cluster(
        [_level_mask(lvl, 4)], [_image_mask(im)]
    )
    assert check_corners(im) == 2
    # the smaller cluster (row 0) is foreground and overlaps level cluster 3
    assert vote.fg_cluster == 3
    assert vote.confident_count == 1


def test_select_foreground_order_invariant():
    pairs = [_confident_pair(c, f"i{j}") for j, c in enumerate([2, 2, 1, 2])]
    fwd = select_foreground_cluster([p[0] for p in pairs], [p[1] for p in pairs])
    rev = select_foreground_cluster(
        [p[0] for p in reversed(pairs)], [p[1] for p in pairs]
    )
    assert fwd.fg_cluster == rev.fg_cluster == 2
    assert fwd.cluster_vote == rev.cluster_vote


def test_select_foreground_relabel_equivariance():
    pairs = [_confident_pair(c, f"i{j}") for j, c in enumerate([2, 2, 1])]
    base = select_foreground_cluster([p[0] for p in pairs], [p[1] for p in pairs])
    perm = [3, 0, 1, 2]  # relabel c -> perm[c]
    relabeled = [
        _level_mask(np.array(perm)[p[0].grid], 4, p[0].image_id) for p in pairs
    ]
    out = select_foreground_cluster(relabeled, [p[1] for p in pairs])
    assert out.fg_cluster == perm[base.fg_cluster]


def test_select_foreground_empty_input():
    with pytest.raises(ValueError):
        select_foreground_cluster([], [])


# --- level clustering ---


def _planted_grid(rng, grid, dim, rect, fg_dir, bg_dirs, noise=0.05):
    mask = np.zeros((grid, grid), dtype=bool)
    r0, c0, r1, c1 = rect
    mask[r0:r1, c0:c1] = True
    dirs = bg_dirs[rng.integers(0, len(bg_dirs), size=(grid, grid))]
    dirs[mask] = fg_dir
    vals = dirs + rng.standard_normal((grid, grid, dim)) * noise
    return FeatureGrid(vals.astype(np.float32)), mask


def _directions(dim=12):
    e = np.eye(dim)
    fg = e[0]
    bg = np.stack([e[1], (e[1] + 0.5 * e[2]) / np.linalg.norm(e[1] + 0.5 * e[2]),
                   (e[1] + 0.5 * e[3]) / np.linalg.norm(e[1] + 0.5 * e[3])])
    return fg, bg


def test_cluster_image_level_recovers_planted_square():
    rng = np.random.default_rng(0)
    fg, bg = _directions()
    grid, mask = _planted_grid(rng, 10, 12, (3, 3, 7, 7), fg, bg)
    out = cluster_image_level("img", grid, KmeansConfig(k=2, seed=1))
    assert same_partition(out.grid.ravel(), mask.ravel().astype(int))


def test_cluster_image_level_constant_grid():
    grid = FeatureGrid(np.ones((6, 6, 8), dtype=np.float32))
    out = cluster_image_level("img", grid, KmeansConfig(k=2, seed=0))
    assert len(set(out.grid.ravel().tolist())) == 1


def test_cluster_category_level_shares_foreground_cluster():
    rng = np.random.default_rng(1)
    fg, bg = _directions()
    g1, m1 = _planted_grid(rng, 10, 12, (2, 2, 6, 6), fg, bg)
    g2, m2 = _planted_grid(rng, 10, 12, (4, 5, 8, 9), fg, bg)
    masks = cluster_category_level(
        [("a", g1), ("b", g2)], KmeansConfig(k=3, seed=2, restarts=5)
    )
    fg_labels_a = set(masks[0].grid[m1].tolist())
    fg_labels_b = set(masks[1].grid[m2].tolist())
    assert len(fg_labels_a) == 1 and fg_labels_a == fg_labels_b


def test_cluster_category_level_single_image_group():
    rng = np.random.default_rng(2)
    fg, bg = _directions()
    g, _ = _planted_grid(rng, 8, 12, (2, 2, 5, 5), fg, bg)
    masks = cluster_category_level([("solo", g)], KmeansConfig(k=3, seed=0))
    assert len(masks) == 1 and masks[0].k == 3


def test_cluster_category_level_empty_group():
    with pytest.raises(ValueError):
        cluster_category_level([], KmeansConfig(k=3))


def test_iter_batches_partition_arithmetic():
    sizes = [len(b) for b in iter_batches(list(range(2500)), 1000)]
    assert sizes == [1000, 1000, 500]
    assert [len(b) for b in iter_batches(list(range(3)), 1000)] == [3]


def test_cluster_dataset_level_batching_and_recovery(tmp_path):
    spec = SceneSpec(n_images=9, grid=10, dim=12, noise=0.05,
                     num_superclasses=1, num_classes=1, image_size=80, seed=5)
    scene = gen_synthetic_dataset(spec, tmp_path)
    manifest = load_manifest(tmp_path / "manifest.jsonl")
    batches = cluster_dataset_level(
        manifest, KmeansConfig(k=4, seed=3, restarts=3), batch_size=4
    )
    assert [len(b) for b in batches] == [4, 4, 1]
    # foreground patches stay isolated in one cluster per batch
    for batch in batches:
        for mask in batch:
            planted = scene.patch_masks[mask.image_id]
            fg_labels = set(mask.grid[planted].tolist())
            bg_labels = set(mask.grid[~planted].tolist())
            assert len(fg_labels) == 1
            assert fg_labels.isdisjoint(bg_labels)


def test_binarize_level():
    lm = _level_mask(np.array([[0, 1], [2, 1]]), 4)
    out = binarize_level(lm, 1)
    assert np.array_equal(out.grid, np.array([[False, True], [False, True]]))


# --- superclass grouping ---


def test_group_by_superclass_planted_blobs():
    rng = np.random.default_rng(3)
    centers = np.eye(4)
    tokens = []
    for i in range(24):
        blob = i % 4
        tokens.append((f"im{i}", centers[blob] + rng.normal(0, 0.05, 4)))
    grouping = group_by_superclass(tokens, 4)
    labels = [grouping.group_of[f"im{i}"] for i in range(24)]
    assert same_partition(labels, [i % 4 for i in range(24)])


def test_group_by_superclass_single_group():
    tokens = [(f"im{i}", np.random.default_rng(i).standard_normal(4)) for i in range(5)]
    grouping = group_by_superclass(tokens, 1)
    assert set(grouping.group_of.values()) == {0}


def test_group_by_superclass_too_few_images():
    tokens = [("a", np.ones(4)), ("b", np.ones(4) * 2)]
    with pytest.raises(ValueError, match="exceeds"):
        group_by_superclass(tokens, 3)

"""Dataset-, category- and image-level clustering, foreground-cluster voting,
and the conjunction of the three binary masks into the final patch mask."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

import dataclasses

from .clustering import (
    KmeansConfig, SpectralConfig, cosine_kmeans, derive_seed, kmeans, spectral_cluster,
)
from .tensorio import DatasetManifest, FeatureGrid, load_feature_grid

LEVELS = ("dataset", "category", "image")


@dataclass
class LevelMask:
    """Per-image patch grid of cluster indices from one clustering level."""

    image_id: str
    level: str
    grid: np.ndarray  # (grid, grid) int
    k: int

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ValueError(f"unknown level {self.level!r}")
        if self.grid.min(initial=0) < 0 or self.grid.max(initial=0) >= self.k:
            raise ValueError(f"cluster indices outside [0, {self.k})")


@dataclass
class BinaryPatchMask:
    image_id: str
    grid: np.ndarray  # (grid, grid) bool, True = foreground


@dataclass
class CategoryGrouping:
    num_groups: int
    group_of: dict[str, int]


@dataclass
class ForegroundVote:
    cluster_vote: dict[int, int]
    fg_cluster: int
    confident_count: int


def _cluster_pool(m: np.ndarray, cfg: KmeansConfig, metric: str) -> np.ndarray:
    if metric == "cosine":
        return cosine_kmeans(m, cfg).assignments
    if metric == "euclidean":
        return kmeans(m, cfg).assignments
    raise ValueError(f"unknown metric {metric!r}")


def cluster_image_level(
    image_id: str,
    features: FeatureGrid,
    cfg: KmeansConfig | None = None,
    metric: str = "cosine",
) -> LevelMask:
    """Cluster one image's patches into foreground/background candidates (k=2)."""
    cfg = cfg or KmeansConfig(k=2)
    labels = _cluster_pool(features.flat(), cfg, metric)
    return LevelMask(
        image_id=image_id,
        level="image",
        grid=labels.reshape(features.grid_h, features.grid_w),
        k=cfg.k,
    )


def _pooled_level(
    named_grids: Sequence[tuple[str, FeatureGrid]],
    cfg: KmeansConfig,
    level: str,
    metric: str,
) -> list[LevelMask]:
    """One k-means over all patches pooled across images, sliced back per image."""
    if not named_grids:
        raise ValueError(f"{level}-level clustering needs at least one image")
    pool = np.concatenate([g.flat() for _, g in named_grids], axis=0)
    labels = _cluster_pool(pool, cfg, metric)
    masks, offset = [], 0
    for image_id, g in named_grids:
        n = g.grid_h * g.grid_w
        masks.append(LevelMask(
            image_id=image_id,
            level=level,
            grid=labels[offset:offset + n].reshape(g.grid_h, g.grid_w),
            k=cfg.k,
        ))
        offset += n
    return masks


def cluster_category_level(
    named_grids: Sequence[tuple[str, FeatureGrid]],
    cfg: KmeansConfig | None = None,
    metric: str = "cosine",
) -> list[LevelMask]:
    """Cluster all patches of one superclass group (default k=3)."""
    return _pooled_level(named_grids, cfg or KmeansConfig(k=3), "category", metric)


def iter_batches(items: Sequence, batch_size: int):
    """Consecutive batches of ``batch_size`` (last one may be shorter)."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    for start in range(0, len(items), batch_size):
        yield items[start:start + batch_size]


def cluster_dataset_level(
    manifest: DatasetManifest,
    cfg: KmeansConfig | None = None,
    batch_size: int = 1000,
    feature_kind: str = "key",
    metric: str = "cosine",
    loader: Callable[[str], FeatureGrid] | None = None,
    seed_per_batch: bool = True,
) -> list[list[LevelMask]]:
    """Cluster the whole dataset in consecutive batches (default k=4).

    Returns one list of LevelMasks per batch; cluster indices are
    batch-local, so foreground selection must also run per batch.  By
    default every batch is an independent run with its own derived seed.
    """
    cfg = cfg or KmeansConfig(k=4, restarts=3)
    if loader is None:
        loader = lambda p: load_feature_grid(p)
    out: list[list[LevelMask]] = []
    for b, batch in enumerate(iter_batches(list(manifest.entries), batch_size)):
        named = [
            (e.image_id, loader(str(manifest.resolve(e.feature_paths[feature_kind]))))
            for e in batch
        ]
        batch_cfg = (
            dataclasses.replace(cfg, seed=derive_seed(cfg.seed, "batch", b))
            if seed_per_batch else cfg
        )
        out.append(_pooled_level(named, batch_cfg, "dataset", metric))
    return out


def _corner_values(grid: np.ndarray) -> np.ndarray:
    return np.array([grid[0, 0], grid[0, -1], grid[-1, 0], grid[-1, -1]])


def check_corners(mask: BinaryPatchMask | np.ndarray) -> int:
    """Size of the largest same-label subset among the four corner patches."""
    grid = mask.grid if isinstance(mask, BinaryPatchMask) else np.asarray(mask)
    if grid.shape[0] < 2 or grid.shape[1] < 2:
        raise ValueError("corner check needs at least a 2x2 grid")
    ones = int(np.count_nonzero(_corner_values(grid)))
    return max(ones, 4 - ones)


def _orient_grid(grid: np.ndarray) -> np.ndarray:
    """Pick the foreground label of a binary grid and return a bool mask.

    If three or more corners agree, that label is background.  Otherwise the
    smaller-area label is foreground; an exact area tie keeps label 1
    foreground so that orienting an oriented mask is a no-op.
    """
    corners = _corner_values(grid).astype(bool)
    ones = int(np.count_nonzero(corners))
    if ones >= 3:
        return grid == 0
    if ones <= 1:
        return grid != 0
    area1 = int(np.count_nonzero(grid))
    area0 = grid.size - area1
    fg_label = 1 if area1 <= area0 else 0
    return (grid != 0) if fg_label == 1 else (grid == 0)


def orient_image_mask(mask: LevelMask) -> BinaryPatchMask:
    """Flip-check an image-level 2-cluster mask so True covers the foreground."""
    if mask.level != "image" or mask.k != 2:
        raise ValueError("orientation requires an image-level mask with k=2")
    return BinaryPatchMask(image_id=mask.image_id, grid=_orient_grid(mask.grid))


def _overlap_vote(level_grid: np.ndarray, fg: np.ndarray, k: int) -> int:
    counts = np.array([np.count_nonzero((level_grid == c) & fg) for c in range(k)])
    return int(np.argmax(counts))  # lowest index wins ties


def select_foreground_cluster(
    level_masks: Sequence[LevelMask],
    image_masks: Sequence[LevelMask],
) -> ForegroundVote:
    """Identify the foreground cluster of a 3/4-way level by corner-gated voting.

    Images whose binary mask has unanimous corners are oriented and vote for
    the level cluster with maximal patch overlap.  If no image passes the
    corner gate, every image votes with its oriented mask instead.
    """
    if not level_masks:
        raise ValueError("no level masks to vote over")
    k = level_masks[0].k
    if any(lm.k != k for lm in level_masks):
        raise ValueError("level masks disagree on cluster count")
    by_id = {im.image_id: im for im in image_masks}
    votes = {c: 0 for c in range(k)}
    confident = 0
    for lm in level_masks:
        im = by_id.get(lm.image_id)
        if im is None:
            raise ValueError(f"no image-level mask for {lm.image_id!r}")
        if check_corners(im.grid) == 4:
            fg = _orient_grid(im.grid)
            votes[_overlap_vote(lm.grid, fg, k)] += 1
            confident += 1
    if confident == 0:
        # tiny or corner-ambiguous datasets: fall back to voting with every
        # oriented mask
        for lm in level_masks:
            fg = _orient_grid(by_id[lm.image_id].grid)
            votes[_overlap_vote(lm.grid, fg, k)] += 1
    tally = np.array([votes[c] for c in range(k)])
    return ForegroundVote(
        cluster_vote=votes,
        fg_cluster=int(np.argmax(tally)),
        confident_count=int(tally.sum()),
    )


def binarize_level(mask: LevelMask, fg_cluster: int) -> BinaryPatchMask:
    return BinaryPatchMask(image_id=mask.image_id, grid=mask.grid == fg_cluster)


def combine_masks(
    dataset_fg: BinaryPatchMask,
    category_fg: BinaryPatchMask,
    image_fg: BinaryPatchMask,
) -> BinaryPatchMask:
    """Per-patch conjunction: keep foreground agreed by all three levels."""
    grids = (dataset_fg.grid, category_fg.grid, image_fg.grid)
    if not (grids[0].shape == grids[1].shape == grids[2].shape):
        raise ValueError("mask shape mismatch")
    return BinaryPatchMask(
        image_id=dataset_fg.image_id,
        grid=grids[0] & grids[1] & grids[2],
    )


def group_by_superclass(
    named_tokens: Sequence[tuple[str, np.ndarray]],
    num_groups: int,
    cfg: SpectralConfig | None = None,
    method: str = "spectral",
) -> CategoryGrouping:
    """Cluster per-image CLS tokens into superclass groups."""
    if num_groups > len(named_tokens):
        raise ValueError(
            f"num_groups={num_groups} exceeds image count {len(named_tokens)}"
        )
    ids = [i for i, _ in named_tokens]
    tokens = np.stack([t for _, t in named_tokens], axis=0)
    if method == "spectral":
        labels = spectral_cluster(tokens, num_groups, cfg or SpectralConfig())
    elif method == "kmeans":
        scfg = cfg or SpectralConfig()
        labels = kmeans(tokens, KmeansConfig(
            k=num_groups, max_iters=scfg.max_iters, rel_tol=scfg.rel_tol,
            restarts=scfg.restarts, seed=scfg.seed,
        )).assignments
    else:
        raise ValueError(f"unknown grouping method {method!r}")
    return CategoryGrouping(
        num_groups=num_groups,
        group_of={i: int(g) for i, g in zip(ids, labels)},
    )
